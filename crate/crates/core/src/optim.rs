//! Momentum SGD with coupled L2 weight decay.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

pub const DEFAULT_LEARNING_RATE: f32 = 0.1;
pub const DEFAULT_MOMENTUM: f32 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f32 = 1e-4;

/// Hyperparameters plus one velocity buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    velocity: Vec<Tensor>,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl OptimState {
    pub fn new(learning_rate: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(OptimState {
            velocity: Vec::new(),
            learning_rate,
            momentum,
            weight_decay,
        })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

impl Default for OptimState {
    fn default() -> Self {
        OptimState::new(DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY)
            .expect("defaults are valid")
    }
}

/// One SGD update over aligned `params`, `grads` and `names`:
///
/// ```text
/// g' = g + weight_decay * w
/// v  = momentum * v + g'
/// w  = w - learning_rate * v
/// ```
///
/// Velocities are created as zeros on the first call. Nothing is modified if
/// any gradient is non-finite or misshapen.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    names: &[String],
    state: &mut OptimState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != names.len() {
        return Err(Error::InvalidArgument(format!(
            "sgd_step: {} params, {} grads, {} names",
            params.len(),
            grads.len(),
            names.len()
        )));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.shape() != g.shape() {
            return Err(Error::ParamMismatch {
                param: name.clone(),
                expected: p.shape().to_vec(),
                actual: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                param: name.clone(),
            });
        }
    }
    if state.velocity.is_empty() {
        state.velocity = params
            .iter()
            .map(|p| Tensor::from_parts(p.shape().to_vec(), alloc::vec![0.0; p.len()]))
            .collect();
    } else if state.velocity.len() != params.len()
        || state
            .velocity
            .iter()
            .zip(params.iter())
            .any(|(v, p)| v.shape() != p.shape())
    {
        return Err(Error::InvalidArgument(
            "sgd_step: parameter layout changed between steps".into(),
        ));
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((w, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g_total = gv + wd * *w;
            *vv = mu * *vv + g_total;
            *w -= lr * *vv;
        }
    }
    Ok(())
}
