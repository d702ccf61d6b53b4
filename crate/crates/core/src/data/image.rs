use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// Source coordinate and blend weight for each destination index, with the
/// half-pixel (align-corners = false) mapping `s = (d + 0.5)·in/out − 0.5`.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, w: f32) -> f32 {
    (a + w * (b - a)).clamp(a.min(b), a.max(b))
}

/// Bilinear resampling of one `sh×sw` plane into `dst[dh×dw]`.
pub fn resize_plane(src: &[f32], sh: usize, sw: usize, dst: &mut [f32], dh: usize, dw: usize) {
    let ty = taps(sh, dh);
    let tx = taps(sw, dw);
    for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (x, &(x0, x1, wx)) in tx.iter().enumerate() {
            let top = lerp(src[y0 * sw + x0], src[y0 * sw + x1], wx);
            let bottom = lerp(src[y1 * sw + x0], src[y1 * sw + x1], wx);
            dst[y * dw + x] = lerp(top, bottom, wy);
        }
    }
}

/// Resizes `N×C×H×W` images channel by channel. Same-size input is
/// returned unchanged.
pub fn resize_bilinear(images: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    if height == 0 || width == 0 {
        return Err(config_err(format!("resize target {height}x{width} must be positive")));
    }
    let s = images.shape();
    if s.len() != 4 {
        return Err(config_err(format!("resize expects N×C×H×W images, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if (h, w) == (height, width) {
        return Ok(images.clone());
    }
    let mut out = vec![0.0f32; n * c * height * width];
    for (src, dst) in images.data().chunks(h * w).zip(out.chunks_mut(height * width)) {
        resize_plane(src, h, w, dst, height, width);
    }
    Tensor::new(&[n, c, height, width], out)
}

/// `x ↦ (x − 0.5) / 0.5`, mapping `[0, 1]` to `[−1, 1]`.
pub fn normalize(images: &Tensor<f32>) -> Tensor<f32> {
    images.map(|x| (x - 0.5) / 0.5)
}

/// Inverse of [`normalize`].
pub fn denormalize(images: &Tensor<f32>) -> Tensor<f32> {
    images.map(|x| x * 0.5 + 0.5)
}
