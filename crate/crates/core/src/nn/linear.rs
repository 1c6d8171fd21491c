use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use super::gemm::{gemm, Mat};
use super::{he_uniform, Layer, LayerGrad, Mode};
use crate::{Error, Result, Tensor};

/// Fully connected layer `y = x · Wᵀ + b` with `W: [K, D]`, `b: [K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [k, _] = weight.dims2()?;
        if bias.shape() != [k] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                expected: vec![k],
                actual: bias.shape().to_vec(),
            });
        }
        Ok(Linear { weight, bias })
    }

    pub fn he_init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Linear {
            weight: he_uniform(&[outputs, inputs], inputs, rng),
            bias: Tensor::from_parts(vec![outputs], vec![0.0; outputs]),
        }
    }

    /// Weight and bias both `U(-b, b)` with `b = 1 / sqrt(inputs)`. Keeps the
    /// initial logits small, so the first epochs at a high learning rate
    /// start near the uniform prediction.
    pub fn fan_in_init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / libm::sqrtf(inputs as f32);
        let mut draw = |len: usize| -> Vec<f32> {
            (0..len).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let weight = draw(outputs * inputs);
        let bias = draw(outputs);
        Linear {
            weight: Tensor::from_parts(vec![outputs, inputs], weight),
            bias: Tensor::from_parts(vec![outputs], bias),
        }
    }

    fn dims(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        let [n, d] = input.dims2()?;
        let [k, wd] = self.weight.dims2()?;
        if d != wd {
            return Err(Error::ShapeMismatch {
                op: "linear input features",
                expected: vec![wd],
                actual: vec![d],
            });
        }
        Ok((n, d, k))
    }
}

impl Layer for Linear {
    fn forward(&self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (n, d, k) = self.dims(input)?;
        let mut out: Vec<f32> = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(self.bias.data());
        }
        gemm(
            Mat::new(input.data(), n, d),
            Mat::new(self.weight.data(), k, d).t(),
            &mut out,
            1.0,
        );
        Ok(Tensor::from_parts(vec![n, k], out))
    }

    fn backward(&self, input: &Tensor, grad_output: &Tensor, _mode: Mode) -> Result<LayerGrad> {
        let (n, d, k) = self.dims(input)?;
        if grad_output.shape() != [n, k] {
            return Err(Error::ShapeMismatch {
                op: "linear backward",
                expected: vec![n, k],
                actual: grad_output.shape().to_vec(),
            });
        }
        let g = grad_output.data();
        let mut dx = vec![0.0f32; n * d];
        gemm(Mat::new(g, n, k), Mat::new(self.weight.data(), k, d), &mut dx, 0.0);
        let mut dw = vec![0.0f32; k * d];
        gemm(Mat::new(g, n, k).t(), Mat::new(input.data(), n, d), &mut dw, 0.0);
        let db = (0..k)
            .map(|j| (0..n).map(|i| g[i * k + j] as f64).sum::<f64>() as f32)
            .collect();
        Ok(LayerGrad {
            input: Tensor::from_parts(vec![n, d], dx),
            params: vec![
                Tensor::from_parts(vec![k, d], dw),
                Tensor::from_parts(vec![k], db),
            ],
        })
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["weight", "bias"]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight() {
        let w = Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let lin = Linear::new(w, Tensor::zeros(&[3]).unwrap()).unwrap();
        let x = Tensor::new(&[2, 3], vec![1., -2., 3., 0.5, 0.25, -8.]).unwrap();
        assert_eq!(lin.forward(&x, Mode::Eval).unwrap(), x);
    }

    #[test]
    fn dot_product_plus_bias() {
        let lin = Linear::new(
            Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap(),
            Tensor::new(&[1], vec![1.0]).unwrap(),
        )
        .unwrap();
        let x = Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap();
        assert_eq!(lin.forward(&x, Mode::Eval).unwrap().data(), &[6.0]);
    }

    #[test]
    fn rejects_feature_mismatch() {
        let lin = Linear::he_init(4, 2, &mut crate::rng::seeded(0));
        let x = Tensor::zeros(&[1, 3]).unwrap();
        assert!(lin.forward(&x, Mode::Eval).is_err());
    }

    #[test]
    fn fan_in_init_bounds() {
        let lin = Linear::fan_in_init(16, 3, &mut crate::rng::seeded(1));
        assert_eq!(lin.weight.shape(), &[3, 16]);
        let all = lin.weight.data().iter().chain(lin.bias.data());
        assert!(all.clone().all(|v| v.abs() < 0.25));
        assert!(all.clone().any(|&v| v != 0.0));
    }
}
