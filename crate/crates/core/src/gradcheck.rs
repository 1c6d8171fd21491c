//! Central finite-difference oracle for layer gradients.
//!
//! The scalar probed is `L = sum(forward(x) * R)` for a fixed random
//! projection `R`, so `backward(x, R)` must return `dL/dx` and `dL/dθ`.
//! Numeric derivatives are `(L(x + h) - L(x - h)) / 2h` with `L` summed in
//! `f64`. A coordinate passes when `|analytic - numeric| <= max(abs_floor,
//! rel_tol * max(|analytic|, |numeric|))`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;

use crate::nn::{
    residual_add, residual_add_backward, softmax_xent, softmax_xent_backward, BatchNorm2d,
    Conv2d, GlobalAvgPool, Layer, Linear, MaxPool2d, Mode, Relu, RunningStats,
};
use crate::{rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub step: f32,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            step: 1e-3,
            rel_tol: 1e-2,
            abs_floor: 1e-4,
        }
    }
}

impl Tolerance {
    fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let scale = analytic.abs().max(numeric.abs());
        (analytic - numeric).abs() <= self.abs_floor.max(self.rel_tol * scale)
    }
}

/// Summary of a passing check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Report {
    pub coordinates: usize,
    /// Worst `|a - n| / max(|a|, |n|, abs_floor)` seen.
    pub worst_ratio: f64,
}

impl Report {
    fn merge(self, other: Report) -> Report {
        Report {
            coordinates: self.coordinates + other.coordinates,
            worst_ratio: self.worst_ratio.max(other.worst_ratio),
        }
    }
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor<R: Rng>(shape: &[usize], lo: f32, hi: f32, r: &mut R) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("finite by construction")
}

fn project(t: &Tensor, r: &Tensor) -> f64 {
    t.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Compares `analytic` against central differences of `loss` w.r.t. each
/// coordinate of `target`, skipping coordinates where `skip` holds.
fn compare<F, S>(
    what: &str,
    target: &mut Tensor,
    analytic: &Tensor,
    tol: Tolerance,
    skip: S,
    mut loss: F,
) -> Result<Report, String>
where
    F: FnMut(&Tensor) -> f64,
    S: Fn(usize, f32) -> bool,
{
    if analytic.shape() != target.shape() {
        return Err(format!(
            "{what}: gradient shape {:?} differs from {:?}",
            analytic.shape(),
            target.shape()
        ));
    }
    let h = tol.step;
    let mut report = Report {
        coordinates: 0,
        worst_ratio: 0.0,
    };
    for i in 0..target.len() {
        let orig = target.data()[i];
        if skip(i, orig) {
            continue;
        }
        target.data_mut()[i] = orig + h;
        let plus = loss(target);
        target.data_mut()[i] = orig - h;
        let minus = loss(target);
        target.data_mut()[i] = orig;
        // the actual step after f32 rounding
        let width = ((orig + h) as f64) - ((orig - h) as f64);
        let numeric = (plus - minus) / width;
        let a = analytic.data()[i] as f64;
        let ratio = (a - numeric).abs() / a.abs().max(numeric.abs()).max(tol.abs_floor);
        report.worst_ratio = report.worst_ratio.max(ratio);
        report.coordinates += 1;
        if !tol.accepts(a, numeric) {
            return Err(format!(
                "{what}[{i}]: analytic {a:.6e} vs numeric {numeric:.6e}"
            ));
        }
    }
    Ok(report)
}

/// Checks input and parameter gradients of `layer` at `input`.
/// `skip_input(i, x_i)` excludes input coordinates (e.g. ReLU kinks).
pub fn check_layer<S>(
    layer: &mut dyn Layer,
    input: &Tensor,
    mode: Mode,
    seed: u64,
    tol: Tolerance,
    skip_input: S,
) -> Result<Report, String>
where
    S: Fn(usize, f32) -> bool,
{
    let out = layer.forward(input, mode).map_err(|e| format!("forward: {e}"))?;
    let proj = random_tensor(out.shape(), -1.0, 1.0, &mut rng::seeded(seed));
    let grad = layer
        .backward(input, &proj, mode)
        .map_err(|e| format!("backward: {e}"))?;

    let mut x = input.clone();
    let mut report = {
        let layer_ref: &dyn Layer = layer;
        compare("input", &mut x, &grad.input, tol, skip_input, |x| {
            project(&layer_ref.forward(x, mode).expect("shape unchanged"), &proj)
        })?
    };

    let names: Vec<&str> = layer.param_names().to_vec();
    for (p, analytic) in grad.params.iter().enumerate() {
        let original = layer.params()[p].clone();
        let mut probe = original.clone();
        let r = compare(names[p], &mut probe, analytic, tol, |_, _| false, |candidate| {
            *layer.params_mut()[p] = candidate.clone();
            project(&layer.forward(input, mode).expect("shape unchanged"), &proj)
        });
        *layer.params_mut()[p] = original;
        report = report.merge(r?);
    }
    Ok(report)
}

/// Checks `softmax_xent_backward` against differences of the mean loss.
pub fn check_softmax_xent(logits: &Tensor, labels: &[usize], tol: Tolerance) -> Result<Report, String> {
    let (_, probs) = softmax_xent(logits, labels).map_err(|e| format!("{e}"))?;
    let grad = softmax_xent_backward(&probs, labels).map_err(|e| format!("{e}"))?;
    let mut x = logits.clone();
    compare("logits", &mut x, &grad, tol, |_, _| false, |z| {
        softmax_xent(z, labels).expect("valid labels").0
    })
}

/// Checks both branches of `residual_add`.
pub fn check_residual_add(a: &Tensor, b: &Tensor, seed: u64, tol: Tolerance) -> Result<Report, String> {
    let proj = random_tensor(a.shape(), -1.0, 1.0, &mut rng::seeded(seed));
    let (ga, gb) = residual_add_backward(&proj);
    let mut xa = a.clone();
    let ra = compare("block_out", &mut xa, &ga, tol, |_, _| false, |x| {
        project(&residual_add(x, b).expect("same shape"), &proj)
    })?;
    let mut xb = b.clone();
    let rb = compare("skip", &mut xb, &gb, tol, |_, _| false, |x| {
        project(&residual_add(a, x).expect("same shape"), &proj)
    })?;
    Ok(ra.merge(rb))
}

/// The layer types covered by [`check_random`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    BatchNorm2d,
    Relu,
    MaxPool2d,
    GlobalAvgPool,
    Linear,
    SoftmaxXent,
    ResidualAdd,
}

impl LayerKind {
    pub const ALL: [LayerKind; 8] = [
        LayerKind::Conv2d,
        LayerKind::BatchNorm2d,
        LayerKind::Relu,
        LayerKind::MaxPool2d,
        LayerKind::GlobalAvgPool,
        LayerKind::Linear,
        LayerKind::SoftmaxXent,
        LayerKind::ResidualAdd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::BatchNorm2d => "batchnorm2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d => "maxpool2d",
            LayerKind::GlobalAvgPool => "global_avgpool",
            LayerKind::Linear => "linear",
            LayerKind::SoftmaxXent => "softmax_xent",
            LayerKind::ResidualAdd => "residual_add",
        }
    }
}

/// Builds a random small instance of `kind` from `seed` and checks it.
pub fn check_random(kind: LayerKind, seed: u64, tol: Tolerance) -> Result<Report, String> {
    let mut r = rng::derive(seed, kind as u64);
    let no_skip = |_: usize, _: f32| false;
    match kind {
        LayerKind::Conv2d => {
            let k = [1, 3, 5][r.random_range(0..3)];
            let stride = r.random_range(1..=2);
            let padding = r.random_range(0..=k / 2);
            let (n, cin, cout) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
            let (h, w) = (r.random_range(k..=k + 3), r.random_range(k..=k + 3));
            let weight = random_tensor(&[cout, cin, k, k], -0.3, 0.3, &mut r);
            let bias = random_tensor(&[cout], -0.1, 0.1, &mut r);
            let mut conv = Conv2d::new(weight, Some(bias), stride, padding).map_err(|e| format!("{e}"))?;
            let x = random_tensor(&[n, cin, h, w], -0.5, 0.5, &mut r);
            check_layer(&mut conv, &x, Mode::Train, r.random(), tol, no_skip)
        }
        LayerKind::BatchNorm2d => {
            let c = r.random_range(1..=3);
            let shape = [r.random_range(2..=3), c, r.random_range(1..=3), r.random_range(2..=3)];
            let mut bn = BatchNorm2d::new(c);
            bn.gamma = random_tensor(&[c], 0.5, 1.5, &mut r);
            bn.beta = random_tensor(&[c], -0.1, 0.1, &mut r);
            let mode = if r.random_bool(0.5) { Mode::Train } else { Mode::Eval };
            bn.running = Some(RunningStats {
                mean: random_tensor(&[c], -0.5, 0.5, &mut r),
                var: random_tensor(&[c], 0.5, 2.0, &mut r),
            });
            let x = random_tensor(&shape, -0.25, 0.25, &mut r);
            check_layer(&mut bn, &x, mode, r.random(), tol, no_skip)
        }
        LayerKind::Relu => {
            let shape = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4)];
            let x = random_tensor(&shape, -1.0, 1.0, &mut r);
            check_layer(&mut Relu, &x, Mode::Train, r.random(), tol, |_, v| v.abs() <= 1e-2)
        }
        LayerKind::MaxPool2d => {
            let k = r.random_range(2..=3);
            let stride = r.random_range(1..=2);
            let padding = r.random_range(0..=k / 2);
            let mut pool = MaxPool2d::new(k, stride, padding).map_err(|e| format!("{e}"))?;
            let shape = [r.random_range(1..=2), r.random_range(1..=2), r.random_range(k..=k + 3), r.random_range(k..=k + 3)];
            // distinct values spaced well beyond 2h so no perturbation moves an argmax
            let len: usize = shape.iter().product();
            let mut levels: Vec<usize> = (0..len).collect();
            rand::seq::SliceRandom::shuffle(levels.as_mut_slice(), &mut r);
            let data = levels.iter().map(|&l| l as f32 * 0.02 - len as f32 * 0.01).collect();
            let x = Tensor::new(&shape, data).map_err(|e| format!("{e}"))?;
            check_layer(&mut pool, &x, Mode::Train, r.random(), tol, no_skip)
        }
        LayerKind::GlobalAvgPool => {
            let shape = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4)];
            let x = random_tensor(&shape, -1.0, 1.0, &mut r);
            check_layer(&mut GlobalAvgPool, &x, Mode::Train, r.random(), tol, no_skip)
        }
        LayerKind::Linear => {
            let (n, d, k) = (r.random_range(1..=3), r.random_range(1..=6), r.random_range(1..=5));
            let weight = random_tensor(&[k, d], -0.5, 0.5, &mut r);
            let bias = random_tensor(&[k], -0.5, 0.5, &mut r);
            let mut fc = Linear::new(weight, bias).map_err(|e| format!("{e}"))?;
            let x = random_tensor(&[n, d], -1.0, 1.0, &mut r);
            check_layer(&mut fc, &x, Mode::Train, r.random(), tol, no_skip)
        }
        LayerKind::SoftmaxXent => {
            let (n, k) = (r.random_range(1..=4), r.random_range(2..=5));
            let logits = random_tensor(&[n, k], -3.0, 3.0, &mut r);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            check_softmax_xent(&logits, &labels, tol)
        }
        LayerKind::ResidualAdd => {
            let shape = [r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4)];
            let a = random_tensor(&shape, -1.0, 1.0, &mut r);
            let b = random_tensor(&shape, -1.0, 1.0, &mut r);
            check_residual_add(&a, &b, r.random(), tol)
        }
    }
}
