use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{numel_of, Element, Tensor};
use crate::error::{Error, Result};

/// Index of a learnable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Initialization rule applied when a parameter is registered.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// N(0, std²)
    Normal(f64),
    /// U(-bound, bound)
    Uniform(f64),
}

/// Receives parameter declarations while a model is being assembled.
///
/// Layers are built against a sink so the same construction code can either
/// allocate weights ([`ParamStore`]) or only record shapes ([`ShapeRecorder`]).
pub trait ParamSink {
    fn register(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId;
}

/// Records names and shapes without allocating any weights.
#[derive(Clone, Debug, Default)]
pub struct ShapeRecorder {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl ShapeRecorder {
    pub fn total(&self) -> usize {
        self.entries.iter().map(|(_, s)| numel_of(s)).sum()
    }
}

impl ParamSink for ShapeRecorder {
    fn register(&mut self, name: &str, shape: &[usize], _init: Init) -> ParamId {
        self.entries.push((name.to_string(), shape.to_vec()));
        ParamId(self.entries.len() - 1)
    }
}

/// Owns every learnable tensor of a model, in registration order.
///
/// Initial values are drawn from a ChaCha8 stream seeded at construction, so
/// a given seed and registration sequence always yield identical weights.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    rng: ChaCha8Rng,
}

impl<T: Element> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, keeping names and order. Shapes must match.
    pub fn load_from(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for ((name, dst), (src_name, src)) in self.names.iter().zip(&mut self.tensors).zip(named) {
            if name != src_name {
                return Err(Error::CorruptCheckpoint(format!(
                    "expected tensor {name}, found {src_name}"
                )));
            }
            if dst.shape() != src.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_params",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

impl<T: Element> ParamSink for ParamStore<T> {
    fn register(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal(std) => Tensor::randn(shape, std, &mut self.rng),
            Init::Uniform(b) => Tensor::uniform(shape, -b, b, &mut self.rng),
        };
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }
}
