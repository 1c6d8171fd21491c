use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{Layer, LayerGrad, Mode};
use crate::{Error, Result, Tensor};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Per-channel batch normalisation over `[N, C, H, W]`.
///
/// Training mode normalises with the biased batch variance; eval mode uses
/// the running statistics, which start unset until [`BatchNorm2d::init_running_stats`]
/// or the first [`BatchNorm2d::forward_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: Option<RunningStats>,
    pub momentum: f32,
    pub eps: f32,
    /// Used in error messages only.
    pub label: String,
}

struct ChannelStats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    var: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::from_parts(vec![channels], vec![1.0; channels]),
            beta: Tensor::from_parts(vec![channels], vec![0.0; channels]),
            running: None,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            label: String::from("batchnorm2d"),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Sets running mean 0 and variance 1.
    pub fn init_running_stats(&mut self) {
        let c = self.channels();
        self.running = Some(RunningStats {
            mean: Tensor::from_parts(vec![c], vec![0.0; c]),
            var: Tensor::from_parts(vec![c], vec![1.0; c]),
        });
    }

    fn check_input(&self, input: &Tensor) -> Result<[usize; 4]> {
        let dims = input.dims4()?;
        if dims[1] != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d channels",
                expected: vec![self.channels()],
                actual: vec![dims[1]],
            });
        }
        Ok(dims)
    }

    fn batch_stats(&self, input: &Tensor) -> Result<ChannelStats> {
        let [n, c, h, w] = self.check_input(input)?;
        let plane = h * w;
        let count = n * plane;
        if count < 2 {
            return Err(Error::InvalidArgument(format!(
                "{}: training mode needs at least 2 values per channel, got {count}",
                self.label
            )));
        }
        let x = input.data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                sum += x[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mu = sum / count as f64;
            let mut sq = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                sq += x[off..off + plane]
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mu;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = sq / count as f64;
        }
        let inv_std = var
            .iter()
            .map(|&v| 1.0 / libm::sqrt(v + self.eps as f64))
            .collect();
        Ok(ChannelStats { mean, inv_std, var })
    }

    fn running_stats(&self, input: &Tensor) -> Result<ChannelStats> {
        self.check_input(input)?;
        let running = self
            .running
            .as_ref()
            .ok_or_else(|| Error::UninitializedRunningStats {
                layer: self.label.clone(),
            })?;
        let mean = running.mean.data().iter().map(|&v| v as f64).collect();
        let var: Vec<f64> = running.var.data().iter().map(|&v| v as f64).collect();
        let inv_std = var
            .iter()
            .map(|&v| 1.0 / libm::sqrt(v + self.eps as f64))
            .collect();
        Ok(ChannelStats { mean, inv_std, var })
    }

    fn stats(&self, input: &Tensor, mode: Mode) -> Result<ChannelStats> {
        match mode {
            Mode::Train => self.batch_stats(input),
            Mode::Eval => self.running_stats(input),
        }
    }

    fn apply(&self, input: &Tensor, stats: &ChannelStats) -> Tensor {
        let [_, c, h, w] = self.check_input(input).expect("checked by stats");
        let plane = h * w;
        let gamma = self.gamma.data();
        let beta = self.beta.data();
        let data = input
            .data()
            .chunks_exact(plane)
            .enumerate()
            .flat_map(|(i, chunk)| {
                let ch = i % c;
                let (mu, inv) = (stats.mean[ch], stats.inv_std[ch]);
                let (g, b) = (gamma[ch] as f64, beta[ch] as f64);
                chunk
                    .iter()
                    .map(move |&v| ((v as f64 - mu) * inv * g + b) as f32)
            })
            .collect();
        Tensor::from_parts(input.shape().to_vec(), data)
    }

    /// Training-mode forward that also folds the batch statistics into the
    /// running statistics: `running = (1 - momentum) * running + momentum * batch`.
    pub fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let stats = self.batch_stats(input)?;
        let out = self.apply(input, &stats);
        if self.running.is_none() {
            self.init_running_stats();
        }
        let m = self.momentum as f64;
        let running = self.running.as_mut().expect("initialised above");
        for (r, &b) in running.mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = ((1.0 - m) * *r as f64 + m * b) as f32;
        }
        for (r, &b) in running.var.data_mut().iter_mut().zip(&stats.var) {
            *r = ((1.0 - m) * *r as f64 + m * b) as f32;
        }
        Ok(out)
    }
}

impl Layer for BatchNorm2d {
    /// Pure forward; in training mode the running statistics are left alone.
    fn forward(&self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let stats = self.stats(input, mode)?;
        Ok(self.apply(input, &stats))
    }

    fn backward(&self, input: &Tensor, grad_output: &Tensor, mode: Mode) -> Result<LayerGrad> {
        input.same_shape(grad_output, "batchnorm2d backward")?;
        let stats = self.stats(input, mode)?;
        let [n, c, h, w] = input.dims4()?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let x = input.data();
        let g = grad_output.data();
        let gamma = self.gamma.data();

        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for (i, (xc, gc)) in x.chunks_exact(plane).zip(g.chunks_exact(plane)).enumerate() {
            let ch = i % c;
            let (mu, inv) = (stats.mean[ch], stats.inv_std[ch]);
            for (&xv, &gv) in xc.iter().zip(gc) {
                let xhat = (xv as f64 - mu) * inv;
                dgamma[ch] += gv as f64 * xhat;
                dbeta[ch] += gv as f64;
            }
        }

        let mut dx = Vec::with_capacity(x.len());
        for (i, (xc, gc)) in x.chunks_exact(plane).zip(g.chunks_exact(plane)).enumerate() {
            let ch = i % c;
            let (mu, inv, gm) = (stats.mean[ch], stats.inv_std[ch], gamma[ch] as f64);
            match mode {
                Mode::Train => {
                    let scale = gm * inv / count;
                    dx.extend(xc.iter().zip(gc).map(|(&xv, &gv)| {
                        let xhat = (xv as f64 - mu) * inv;
                        (scale * (count * gv as f64 - dbeta[ch] - xhat * dgamma[ch])) as f32
                    }));
                }
                Mode::Eval => {
                    dx.extend(gc.iter().map(|&gv| (gv as f64 * gm * inv) as f32));
                }
            }
        }
        Ok(LayerGrad {
            input: Tensor::from_parts(input.shape().to_vec(), dx),
            params: vec![
                Tensor::from_parts(vec![c], dgamma.into_iter().map(|v| v as f32).collect()),
                Tensor::from_parts(vec![c], dbeta.into_iter().map(|v| v as f32).collect()),
            ],
        })
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["gamma", "beta"]
    }
}
