//! Datasets: NPY/NPZ ingestion in the MedMNIST layout, preprocessing and a
//! synthetic generator.
//!
//! An archive holds `{train,val,test}_{images,labels}.npy`. Images are
//! `N×H×W` (grayscale) or `N×H×W×C`, usually `u8`; labels are `N` or `N×1`
//! integers. Loaded images become `N×C×H×W` `f32` in `[0, 1]`.

mod image;
pub mod npy;
pub mod npz;
mod synth;

use std::collections::BTreeMap;
use std::path::Path;

pub use image::{denormalize, normalize, resize_bilinear, resize_plane};
pub use npy::{parse_npy, NpyArray, NpyDtype};
pub use npz::{read_npz, read_npz_bytes, write_npz, write_npz_bytes};
pub use synth::{split_sizes, synth_blobs, SynthConfig};

use crate::error::{data_err, Result};
use crate::tensor::{kernels, Tensor};

/// One labelled split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `N×C×H×W`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: &str, images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(data_err(format!("{name}: images must be N×C×H×W, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(data_err(format!(
                "{name}: {} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(data_err(format!("{name}: need at least 2 classes, got {num_classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(data_err(format!("{name}: label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            name: name.to_string(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let t = Tensor::new(&[indices.len(), c, h, w], data).expect("batch shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Resizes to `size×size` (when given) and applies [`normalize`].
    pub fn prepare(&self, size: Option<usize>) -> Result<Self> {
        let images = match size {
            Some(s) => resize_bilinear(&self.images, s, s)?,
            None => self.images.clone(),
        };
        Ok(Self {
            images: normalize(&images),
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&Dataset> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn prepare(&self, size: Option<usize>) -> Result<Self> {
        Ok(Self {
            train: self.train.prepare(size)?,
            val: self.val.prepare(size)?,
            test: self.test.prepare(size)?,
        })
    }

    /// NPZ members in the MedMNIST layout: `u8` images (`N×H×W` or
    /// `N×H×W×C`) when every pixel is a multiple of 1/255, `f32` otherwise;
    /// `u8` labels of shape `N×1`.
    pub fn to_members(&self) -> Vec<(String, NpyArray)> {
        let mut out = Vec::new();
        for d in [&self.train, &self.val, &self.test] {
            out.push((format!("{}_images", d.name), images_to_npy(&d.images)));
            let labels: Vec<i64> = d.labels.iter().map(|&l| l as i64).collect();
            let arr = if d.num_classes <= 256 {
                NpyArray::from_u8(&[labels.len(), 1], labels.iter().map(|&l| l as u8).collect())
            } else {
                NpyArray::from_i64(&[labels.len(), 1], &labels)
            };
            out.push((format!("{}_labels", d.name), arr));
        }
        out
    }

    pub fn save_npz(&self, path: impl AsRef<Path>, compress: bool) -> Result<()> {
        let members = self.to_members();
        let refs: Vec<(&str, &NpyArray)> = members.iter().map(|(k, v)| (k.as_str(), v)).collect();
        write_npz(path, &refs, compress)
    }
}

fn images_to_npy(images: &Tensor<f32>) -> NpyArray {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (nhwc, _) = kernels::permute(images.data(), s, &[0, 2, 3, 1]);
    let shape: Vec<usize> = if c == 1 { vec![n, h, w] } else { vec![n, h, w, c] };
    let bytes: Option<Vec<u8>> = nhwc
        .iter()
        .map(|&v| {
            let q = (v * 255.0).round();
            ((0.0..=255.0).contains(&q) && q / 255.0 == v).then_some(q as u8)
        })
        .collect();
    match bytes {
        Some(b) => NpyArray::from_u8(&shape, b),
        None => NpyArray::from_f32(&shape, &nhwc),
    }
}

fn images_from_npy(name: &str, arr: &NpyArray) -> Result<Tensor<f32>> {
    let (n, h, w, c) = match arr.shape[..] {
        [n, h, w] => (n, h, w, 1),
        [n, h, w, c] => (n, h, w, c),
        _ => {
            return Err(data_err(format!(
                "{name}: images must be N×H×W or N×H×W×C, got shape {:?}",
                arr.shape
            )))
        }
    };
    if n == 0 || h == 0 || w == 0 || c == 0 {
        return Err(data_err(format!("{name}: empty image array {:?}", arr.shape)));
    }
    let scale = match arr.dtype {
        NpyDtype::U8 => 1.0 / 255.0,
        NpyDtype::F32 | NpyDtype::F64 => 1.0,
        NpyDtype::I64 => return Err(data_err(format!("{name}: integer images must be u8"))),
    };
    let vals: Vec<f32> = arr.to_f64().into_iter().map(|v| (v * scale) as f32).collect();
    let (nchw, _) = kernels::permute(&vals, &[n, h, w, c], &[0, 3, 1, 2]);
    Tensor::new(&[n, c, h, w], nchw)
}

fn labels_from_npy(name: &str, arr: &NpyArray) -> Result<Vec<i64>> {
    let flat_ok = match arr.shape[..] {
        [_] => true,
        [_, 1] => true,
        _ => false,
    };
    if !flat_ok {
        return Err(data_err(format!("{name}: labels must be N or N×1, got {:?}", arr.shape)));
    }
    arr.to_i64().map_err(|e| data_err(format!("{name}: {e}")))
}

/// Assembles the three splits from archive members.
pub fn splits_from_members(members: &BTreeMap<String, NpyArray>) -> Result<Splits> {
    let get = |key: &str| {
        members
            .get(key)
            .ok_or_else(|| data_err(format!("archive member {key}.npy is missing")))
    };
    let mut raw = Vec::new();
    for split in ["train", "val", "test"] {
        let images = images_from_npy(&format!("{split}_images"), get(&format!("{split}_images"))?)?;
        let labels = labels_from_npy(&format!("{split}_labels"), get(&format!("{split}_labels"))?)?;
        if images.shape()[0] != labels.len() {
            return Err(data_err(format!(
                "{split}: {} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l < 0) {
            return Err(data_err(format!("{split}_labels: negative label {bad}")));
        }
        raw.push((split, images, labels));
    }
    let shapes: Vec<_> = raw.iter().map(|(_, im, _)| im.shape()[1..].to_vec()).collect();
    if shapes.windows(2).any(|p| p[0] != p[1]) {
        return Err(data_err(format!("splits disagree on image shape: {shapes:?}")));
    }
    let num_classes = raw
        .iter()
        .flat_map(|(_, _, l)| l.iter())
        .max()
        .map_or(2, |&m| (m as usize + 1).max(2));
    let mut it = raw.into_iter().map(|(split, images, labels)| {
        Dataset::new(split, images, labels.into_iter().map(|l| l as usize).collect(), num_classes)
    });
    Ok(Splits {
        train: it.next().unwrap()?,
        val: it.next().unwrap()?,
        test: it.next().unwrap()?,
    })
}

/// Loads a MedMNIST-layout `.npz` archive.
pub fn load_npz_dataset(path: impl AsRef<Path>) -> Result<Splits> {
    splits_from_members(&read_npz(path)?)
}
