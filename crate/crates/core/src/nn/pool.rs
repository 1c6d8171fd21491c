use alloc::vec;
use alloc::vec::Vec;

use super::conv::window_out;
use super::{Layer, LayerGrad, Mode};
use crate::{Error, Result, Tensor};

/// Square-window max pooling with implicit `-inf` padding.
///
/// Gradients go to the first (row-major) maximum of each window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 || 2 * padding > kernel {
            return Err(Error::InvalidArgument(alloc::format!(
                "maxpool2d: invalid kernel {kernel}, stride {stride}, padding {padding}"
            )));
        }
        Ok(MaxPool2d {
            kernel,
            stride,
            padding,
        })
    }

    fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            window_out(h, self.kernel, self.stride, self.padding, "maxpool2d")?,
            window_out(w, self.kernel, self.stride, self.padding, "maxpool2d")?,
        ))
    }

    /// Flat index into the input plane of each window's first maximum.
    fn argmax(&self, plane: &[f32], h: usize, w: usize, ho: usize, wo: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(ho * wo);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best_idx);
            }
        }
        out
    }
}

impl Layer for MaxPool2d {
    fn forward(&self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let [n, c, h, w] = input.dims4()?;
        let (ho, wo) = self.out_dims(h, w)?;
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in input.data().chunks_exact(h * w) {
            out.extend(self.argmax(plane, h, w, ho, wo).into_iter().map(|i| plane[i]));
        }
        Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
    }

    fn backward(&self, input: &Tensor, grad_output: &Tensor, _mode: Mode) -> Result<LayerGrad> {
        let [n, c, h, w] = input.dims4()?;
        let (ho, wo) = self.out_dims(h, w)?;
        if grad_output.shape() != [n, c, ho, wo] {
            return Err(Error::ShapeMismatch {
                op: "maxpool2d backward",
                expected: vec![n, c, ho, wo],
                actual: grad_output.shape().to_vec(),
            });
        }
        let mut dx = vec![0.0f32; input.len()];
        for ((plane, go), dplane) in input
            .data()
            .chunks_exact(h * w)
            .zip(grad_output.data().chunks_exact(ho * wo))
            .zip(dx.chunks_exact_mut(h * w))
        {
            for (idx, &g) in self.argmax(plane, h, w, ho, wo).into_iter().zip(go) {
                dplane[idx] += g;
            }
        }
        Ok(LayerGrad {
            input: Tensor::from_parts(input.shape().to_vec(), dx),
            params: vec![],
        })
    }
}

/// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GlobalAvgPool;

impl Layer for GlobalAvgPool {
    fn forward(&self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let [n, c, h, w] = input.dims4()?;
        let area = (h * w) as f64;
        let out = input
            .data()
            .chunks_exact(h * w)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / area) as f32)
            .collect();
        Ok(Tensor::from_parts(vec![n, c], out))
    }

    fn backward(&self, input: &Tensor, grad_output: &Tensor, _mode: Mode) -> Result<LayerGrad> {
        let [n, c, h, w] = input.dims4()?;
        if grad_output.shape() != [n, c] {
            return Err(Error::ShapeMismatch {
                op: "global_avgpool backward",
                expected: vec![n, c],
                actual: grad_output.shape().to_vec(),
            });
        }
        let scale = 1.0 / (h * w) as f32;
        let dx = grad_output
            .data()
            .iter()
            .flat_map(|&g| core::iter::repeat_n(g * scale, h * w))
            .collect();
        Ok(LayerGrad {
            input: Tensor::from_parts(input.shape().to_vec(), dx),
            params: vec![],
        })
    }
}
