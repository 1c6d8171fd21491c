//! Layer kernels with hand-derived backward passes.
//!
//! Every layer is a pure function of `(input, parameters)`: `backward`
//! recomputes whatever intermediate values it needs from the forward input,
//! so gradients can be checked against finite differences of `forward`.

mod activation;
mod batchnorm;
mod conv;
mod gemm;
mod linear;
mod loss;
mod pool;
mod residual;

pub use activation::Relu;
pub use batchnorm::{BatchNorm2d, RunningStats, BN_EPS, BN_MOMENTUM};
pub use conv::Conv2d;
pub use linear::Linear;
pub use loss::{softmax, softmax_xent, softmax_xent_backward};
pub use pool::{GlobalAvgPool, MaxPool2d};
pub use residual::{residual_add, residual_add_backward};

use alloc::vec::Vec;
use rand::Rng;

use crate::{Result, Tensor};

/// Whether batch normalisation uses batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients produced by one backward call.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    /// Gradient with respect to the layer input; same shape as the input.
    pub input: Tensor,
    /// Gradients with respect to each parameter, in [`Layer::params`] order.
    pub params: Vec<Tensor>,
}

pub trait Layer {
    fn forward(&self, input: &Tensor, mode: Mode) -> Result<Tensor>;

    fn backward(&self, input: &Tensor, grad_output: &Tensor, mode: Mode) -> Result<LayerGrad>;

    fn params(&self) -> Vec<&Tensor> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }

    /// Short parameter names (`weight`, `bias`, ...) in [`Layer::params`] order.
    fn param_names(&self) -> &'static [&'static str] {
        &[]
    }
}

/// Total number of scalar parameters held by a layer.
pub fn param_count(layer: &dyn Layer) -> usize {
    layer.params().iter().map(|t| t.len()).sum()
}

/// He-uniform initialisation: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub(crate) fn he_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = libm::sqrtf(6.0 / fan_in as f32);
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
