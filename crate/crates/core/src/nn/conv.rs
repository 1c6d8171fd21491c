use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use super::gemm::{gemm, Mat};
use super::{he_uniform, Layer, LayerGrad, Mode};
use crate::{Error, Result, Tensor};

/// 2-D cross-correlation with zero padding.
///
/// `weight` is `[C_out, C_in, kh, kw]`, `bias` is `[C_out]`. Output spatial
/// size is `floor((H + 2 * padding - kh) / stride) + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output length of a sliding window along one axis.
pub(crate) fn window_out(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    op: &str,
) -> Result<usize> {
    let padded = len + 2 * padding;
    if padded < kernel {
        return Err(Error::InvalidArgument(format!(
            "{op}: kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        let [cout, ..] = weight.dims4()?;
        if let Some(b) = &bias {
            if b.shape() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    expected: vec![cout],
                    actual: b.shape().to_vec(),
                });
            }
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be at least 1".into()));
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Square-kernel convolution with He-uniform weights and zero bias.
    pub fn he_init<R: Rng>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let weight = he_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        Conv2d {
            weight,
            bias: Some(Tensor::from_parts(vec![cout], vec![0.0; cout])),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn geometry(&self, input: &Tensor) -> Result<(usize, Geometry)> {
        let [n, cin, h, w] = input.dims4()?;
        let [_, wcin, kh, kw] = self.weight.dims4()?;
        if cin != wcin {
            return Err(Error::ShapeMismatch {
                op: "conv2d input channels",
                expected: vec![wcin],
                actual: vec![cin],
            });
        }
        let ho = window_out(h, kh, self.stride, self.padding, "conv2d")?;
        let wo = window_out(w, kw, self.stride, self.padding, "conv2d")?;
        Ok((
            n,
            Geometry {
                cin,
                h,
                w,
                kh,
                kw,
                ho,
                wo,
                stride: self.stride,
                padding: self.padding,
            },
        ))
    }
}

/// Unfolds one image `[C_in, H, W]` into columns `[C_in * kh * kw, Ho * Wo]`.
fn im2col(img: &[f32], g: &Geometry, col: &mut [f32]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into an image.
fn col2im(col: &[f32], g: &Geometry, img: &mut [f32]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn forward(&self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (n, g) = self.geometry(input)?;
        let cout = self.out_channels();
        let (k, p) = (g.k(), g.p());
        let in_len = g.cin * g.h * g.w;
        let mut col = vec![0.0f32; k * p];
        let mut out = vec![0.0f32; n * cout * p];
        for (img, dst) in input
            .data()
            .chunks_exact(in_len)
            .zip(out.chunks_exact_mut(cout * p))
        {
            im2col(img, &g, &mut col);
            if let Some(b) = &self.bias {
                for (row, &bv) in dst.chunks_exact_mut(p).zip(b.data()) {
                    row.fill(bv);
                }
            }
            let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
            gemm(
                Mat::new(self.weight.data(), cout, k),
                Mat::new(&col, k, p),
                dst,
                beta,
            );
        }
        Ok(Tensor::from_parts(vec![n, cout, g.ho, g.wo], out))
    }

    fn backward(&self, input: &Tensor, grad_output: &Tensor, _mode: Mode) -> Result<LayerGrad> {
        let (n, g) = self.geometry(input)?;
        let cout = self.out_channels();
        let expected = [n, cout, g.ho, g.wo];
        if grad_output.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "conv2d backward",
                expected: expected.to_vec(),
                actual: grad_output.shape().to_vec(),
            });
        }
        let (k, p) = (g.k(), g.p());
        let in_len = g.cin * g.h * g.w;
        let mut col = vec![0.0f32; k * p];
        let mut dcol = vec![0.0f32; k * p];
        let mut dw = vec![0.0f32; cout * k];
        let mut dx = vec![0.0f32; input.len()];
        let mut db = vec![0.0f64; cout];
        for (i, (img, go)) in input
            .data()
            .chunks_exact(in_len)
            .zip(grad_output.data().chunks_exact(cout * p))
            .enumerate()
        {
            im2col(img, &g, &mut col);
            // dW += dY · colᵀ
            gemm(
                Mat::new(go, cout, p),
                Mat::new(&col, k, p).t(),
                &mut dw,
                if i == 0 { 0.0 } else { 1.0 },
            );
            // dcol = Wᵀ · dY
            gemm(
                Mat::new(self.weight.data(), cout, k).t(),
                Mat::new(go, cout, p),
                &mut dcol,
                0.0,
            );
            col2im(&dcol, &g, &mut dx[i * in_len..(i + 1) * in_len]);
            for (acc, row) in db.iter_mut().zip(go.chunks_exact(p)) {
                *acc += row.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let mut params = vec![Tensor::from_parts(self.weight.shape().to_vec(), dw)];
        if self.bias.is_some() {
            params.push(Tensor::from_parts(
                vec![cout],
                db.into_iter().map(|v| v as f32).collect(),
            ));
        }
        Ok(LayerGrad {
            input: Tensor::from_parts(input.shape().to_vec(), dx),
            params,
        })
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }

    fn param_names(&self) -> &'static [&'static str] {
        if self.bias.is_some() {
            &["weight", "bias"]
        } else {
            &["weight"]
        }
    }
}
