use std::path::Path;

use super::metrics::{argmax, softmax_rows};
use crate::arch::MedKan;
use crate::data::resize_plane;
use crate::error::{config_err, data_err, Result};
use crate::tensor::{Element, Graph, ParamStore, Tensor};

/// Stage output named by `layer` (`"stage0"`, `"stage1"`, ...); `None`
/// selects the last stage.
pub fn resolve_layer(model: &MedKan, layer: Option<&str>) -> Result<usize> {
    let n = model.stages().len();
    let Some(id) = layer else { return Ok(n - 1) };
    id.strip_prefix("stage")
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&i| i < n)
        .ok_or_else(|| config_err(format!("unknown layer {id:?}; expected stage0..stage{}", n - 1)))
}

/// Class activation map of one `C×h×w` feature block and its gradient:
/// `ReLU(Σ_c mean(∂y/∂A_c) · A_c)`, min-max scaled to `[0, 1]` (a constant
/// map becomes all zeros).
pub fn cam_from_features(features: &[f64], grads: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    let mut cam = vec![0.0; plane];
    for c in 0..channels {
        let g = &grads[c * plane..(c + 1) * plane];
        let w = g.iter().sum::<f64>() / plane as f64;
        for (m, &a) in cam.iter_mut().zip(&features[c * plane..(c + 1) * plane]) {
            *m += w * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let lo = cam.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        cam.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        cam.iter_mut().for_each(|v| *v = 0.0);
    }
    cam
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major, values in `[0, 1]`.
    pub values: Vec<f32>,
    pub target: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
    pub layer: usize,
}

/// Grad-CAM of one `C×H×W` image for class `target` (default: the
/// predicted class), upsampled bilinearly to the input size.
pub fn gradcam<T: Element>(
    model: &MedKan,
    store: &ParamStore<T>,
    image: &Tensor<T>,
    target: Option<usize>,
    layer: Option<&str>,
) -> Result<Heatmap> {
    let layer = resolve_layer(model, layer)?;
    let x = match image.rank() {
        3 => image.clone().reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
        4 if image.shape()[0] == 1 => image.clone(),
        _ => return Err(config_err(format!("gradcam takes one C×H×W image, got {:?}", image.shape()))),
    };
    let classes = model.config().num_classes;
    if let Some(t) = target.filter(|&t| t >= classes) {
        return Err(data_err(format!("target class {t} outside [0, {classes})")));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);

    let mut g = Graph::inference(store);
    let xv = g.input(x);
    let (logits, feats) = model.forward_features(&mut g, xv)?;
    let feat = feats[layer];
    g.retain_grad(feat);
    let probs = softmax_rows(g.value(logits)).into_data();
    let predicted = argmax(&probs);
    let target = target.unwrap_or(predicted);
    let features: Vec<f64> = g.value(feat).data().iter().map(|v| v.as_f64()).collect();
    let fshape = g.shape(feat).to_vec();
    let picked = g.slice(logits, 1, target, 1)?;
    let y = g.sum(picked);
    let grads = g.backward(y)?;
    let grad: Vec<f64> = match grads.wrt(feat) {
        Some(t) => t.data().iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; features.len()],
    };

    let (c, fh, fw) = (fshape[1], fshape[2], fshape[3]);
    let cam: Vec<f32> = cam_from_features(&features, &grad, c, fh * fw)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    let mut values = vec![0.0f32; h * w];
    resize_plane(&cam, fh, fw, &mut values, h, w);
    Ok(Heatmap {
        height: h,
        width: w,
        values,
        target,
        predicted,
        probs,
        layer,
    })
}

/// Fixed 256-entry blue→red palette.
pub fn colormap(v: f32) -> [u8; 3] {
    let i = (v.clamp(0.0, 1.0) * 255.0).round() as i32;
    [i as u8, (255 - (2 * i - 255).abs()) as u8, (255 - i) as u8]
}

impl Heatmap {
    /// Binary PPM (P6, maxval 255) through [`colormap`].
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for &v in &self.values {
            out.extend_from_slice(&colormap(v));
        }
        out
    }

    /// Little-endian `f32` row-major dump.
    pub fn to_raw(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn save(&self, ppm: impl AsRef<Path>, raw: impl AsRef<Path>) -> Result<()> {
        std::fs::write(ppm, self.to_ppm())?;
        std::fs::write(raw, self.to_raw())?;
        Ok(())
    }
}
