use super::{Element, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded operation.
///
/// Implementations receive the forward inputs, the forward output and the
/// upstream gradient, and return one entry per input. Entries for inputs
/// that do not need a gradient may be `None`.
pub trait Backward<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>>;
}

pub struct BackwardCx<'a, T> {
    inputs: Vec<&'a Tensor<T>>,
    needs: Vec<bool>,
    output: &'a Tensor<T>,
    grad: &'a Tensor<T>,
}

impl<'a, T> BackwardCx<'a, T> {
    pub fn input(&self, i: usize) -> &'a Tensor<T> {
        self.inputs[i]
    }

    pub fn needs_grad(&self, i: usize) -> bool {
        self.needs[i]
    }

    pub fn output(&self) -> &'a Tensor<T> {
        self.output
    }

    pub fn grad(&self) -> &'a Tensor<T> {
        self.grad
    }
}

enum Value<'p, T> {
    Owned(Tensor<T>),
    Param(&'p Tensor<T>),
}

struct Node<'p, T: Element> {
    value: Value<'p, T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    keep_grad: bool,
}

/// Per-forward-pass tape.
///
/// Nodes are appended in evaluation order, so index order is a topological
/// order of the DAG. Parameters are borrowed from a [`ParamStore`] rather
/// than copied; each parameter gets at most one leaf node per graph.
pub struct Graph<'p, T: Element> {
    nodes: Vec<Node<'p, T>>,
    store: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    params_require_grad: bool,
}

impl<'p, T: Element> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: Vec::new(),
            params_require_grad: false,
        }
    }

    /// Graph whose parameter leaves are differentiable.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: vec![None; store.len()],
            params_require_grad: true,
        }
    }

    /// Graph for inference: parameters are constants and no backward rules
    /// are retained.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self {
            params_require_grad: false,
            ..Self::with_params(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Value<'p, T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
            keep_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Value::Owned(t), false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Value::Owned(t), true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.leaf(Value::Param(store.get(id)), self.params_require_grad);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Asks [`Graph::backward`] to report the gradient of an interior node.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].keep_grad = true;
    }

    /// Records the result of an operation. The backward rule is dropped when
    /// no input requires a gradient.
    pub fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Box<dyn Backward<T>>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            inputs: if requires_grad { inputs.to_vec() } else { Vec::new() },
            op: requires_grad.then_some(op),
            requires_grad,
            keep_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a rank-0 `loss`, seeded with 1. Consumes the tape.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss).to_vec();
        if !shape.is_empty() {
            return Err(Error::NonScalarLoss(shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut kept: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(T::one()));
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect();
                let cx = BackwardCx {
                    inputs,
                    needs,
                    output: self.value(Var(i)),
                    grad: &g,
                };
                let results = op.backward(&cx);
                debug_assert_eq!(results.len(), node.inputs.len(), "{}", op.name());
                for (input, r) in node.inputs.iter().zip(results) {
                    let Some(r) = r else { continue };
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    if r.shape() != self.shape(*input) {
                        return Err(Error::ShapeMismatch {
                            op: op.name(),
                            lhs: self.shape(*input).to_vec(),
                            rhs: r.shape().to_vec(),
                        });
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&r),
                        slot @ None => *slot = Some(r),
                    }
                }
            }
            if node.keep_grad {
                kept[i] = Some(g);
            }
            // Values of interior nodes are not needed once their gradient has
            // been propagated.
            if node.op.is_some() {
                self.nodes[i].value = Value::Owned(Tensor::scalar(T::zero()));
                self.nodes[i].op = None;
            }
        }

        Ok(Gradients {
            grads: kept,
            param_vars: self.param_vars,
        })
    }
}

/// Gradients reported by [`Graph::backward`]: leaves that require a gradient
/// and any node marked with [`Graph::retain_grad`].
///
/// A reachable leaf that received no contribution reports `None`; callers
/// treat that as zero.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Element> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_vars[id.0].and_then(|v| self.grads[v.0].as_ref())
    }

    /// Gradient of every parameter in store order.
    pub fn into_param_grads(mut self) -> Vec<Option<Tensor<T>>> {
        self.param_vars
            .iter()
            .map(|pv| pv.and_then(|v| self.grads[v.0].take()))
            .collect()
    }
}
