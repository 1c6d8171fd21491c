//! Image preprocessing on channel-first `[C, H, W]` tensors.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

/// Per-channel ImageNet mean used by pretrained-model pipelines.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
/// Per-channel ImageNet standard deviation.
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Precomputed interpolation taps for one output axis.
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f32>,
}

fn axis_taps(input: usize, output: usize) -> AxisTaps {
    let scale = input as f64 / output as f64;
    let max = (input - 1) as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for d in 0..output {
        // half-pixel centres
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
        let lo = libm::floor(s) as usize;
        let hi = (lo + 1).min(input - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push((s - lo as f64) as f32);
    }
    taps
}

/// Bilinear resize of a `[C, H, W]` image with half-pixel centres.
///
/// The source coordinate of output index `d` is `(d + 0.5) * in / out - 0.5`,
/// clamped to `[0, in - 1]`. Channels are resampled independently.
pub fn bilinear_resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                shape: img.shape().to_vec(),
                reason: "expected a [C, H, W] image",
            })
        }
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {out_h}x{out_w} must be at least 1x1"
        )));
    }
    if out_h == h && out_w == w {
        return Ok(img.clone());
    }
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (r0, r1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
            for ox in 0..out_w {
                let (c0, c1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                let top = plane[r0 * w + c0] + (plane[r0 * w + c1] - plane[r0 * w + c0]) * fx;
                let bottom = plane[r1 * w + c0] + (plane[r1 * w + c1] - plane[r1 * w + c0]) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Ok(Tensor::from_parts(alloc::vec![c, out_h, out_w], out))
}

/// Per-channel standardisation `(x - mean[c]) / std[c]` of a `[3, H, W]` image.
pub fn normalize_image(img: &Tensor, mean: [f32; 3], std: [f32; 3]) -> Result<Tensor> {
    let plane = match *img.shape() {
        [3, h, w] => h * w,
        _ => {
            return Err(Error::InvalidShape {
                shape: img.shape().to_vec(),
                reason: "expected a [3, H, W] image",
            })
        }
    };
    if let Some(bad) = std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "standard deviation must be positive, got {bad}"
        )));
    }
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let ch = i / plane;
            (x - mean[ch]) / std[ch]
        })
        .collect();
    Ok(Tensor::from_parts(img.shape().to_vec(), data))
}

/// Resizes (when the size differs) and normalises one image, the standard
/// preprocessing applied before both training and feature extraction.
pub fn preprocess(
    img: &Tensor,
    size: (usize, usize),
    mean: [f32; 3],
    std: [f32; 3],
) -> Result<Tensor> {
    let resized = bilinear_resize(img, size.0, size.1)?;
    normalize_image(&resized, mean, std)
}

/// Applies [`preprocess`] to every image of an `[N, 3, H, W]` batch.
pub fn preprocess_batch(
    images: &Tensor,
    size: (usize, usize),
    mean: [f32; 3],
    std: [f32; 3],
) -> Result<Tensor> {
    let [n, ..] = images.dims4()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let img = images.slice_outer(i, 1)?;
        let shape = img.shape()[1..].to_vec();
        out.push(preprocess(&img.reshape(&shape)?, size, mean, std)?);
    }
    Tensor::stack(&out)
}
