use alloc::vec;
use alloc::vec::Vec;

use super::{Layer, LayerGrad, Mode};
use crate::{Result, Tensor};

/// Elementwise `max(0, x)`. The derivative at exactly zero is taken as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Relu;

impl Layer for Relu {
    fn forward(&self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let data = input.data().iter().map(|&x| x.max(0.0)).collect();
        Ok(Tensor::from_parts(input.shape().to_vec(), data))
    }

    fn backward(&self, input: &Tensor, grad_output: &Tensor, _mode: Mode) -> Result<LayerGrad> {
        input.same_shape(grad_output, "relu backward")?;
        let data: Vec<f32> = input
            .data()
            .iter()
            .zip(grad_output.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        Ok(LayerGrad {
            input: Tensor::from_parts(input.shape().to_vec(), data),
            params: vec![],
        })
    }
}
