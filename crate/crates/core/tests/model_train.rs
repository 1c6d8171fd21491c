use rsaforge_core::gradcheck::random_tensor;
use rsaforge_core::nn::{softmax_xent, softmax_xent_backward};
use rsaforge_core::synthetic::gen_synthetic;
use rsaforge_core::train::{train, TrainConfig};
use rsaforge_core::{rng, ArchConfig, Model, Tensor};

fn tiny() -> ArchConfig {
    ArchConfig::resnet20(3)
        .with_channels([2, 3, 3, 4])
        .with_input_size(16, 16)
}

fn loss(model: &mut Model, x: &Tensor, labels: &[usize]) -> f64 {
    let cache = model.forward_train(x).unwrap();
    softmax_xent(cache.logits(), labels).unwrap().0
}

fn shifted(base: &Tensor, dir: &Tensor, step: f32) -> Tensor {
    let data = base.data().iter().zip(dir.data()).map(|(w, d)| w + step * d).collect();
    Tensor::new(base.shape(), data).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Directional finite differences through the whole network. Single
/// coordinates are a poor probe here: any step crosses some ReLU or
/// max-pool kinks, and the deep f32 forward adds noise, so each tensor is
/// moved along a random direction with a small step and a loose band.
#[test]
fn network_backward_composes() {
    let mut model = Model::build(tiny(), 3).unwrap();
    // blocks start with a zero bn2 scale, which would zero most of the
    // gradients checked below
    let names = model.param_names();
    let mut r = rng::seeded(4);
    for (t, name) in model.params_mut().into_iter().zip(&names) {
        if name.ends_with(".gamma") {
            *t = random_tensor(t.shape(), 0.5, 1.5, &mut r);
        }
    }
    let x = random_tensor(&[4, 3, 16, 16], -1.0, 1.0, &mut rng::seeded(9));
    let labels = [0, 1, 2, 1];
    let cache = model.forward_train(&x).unwrap();
    let (_, probs) = softmax_xent(cache.logits(), &labels).unwrap();
    let grads = model
        .backward(&cache, &softmax_xent_backward(&probs, &labels).unwrap())
        .unwrap();
    drop(cache);
    assert_eq!(grads.len(), names.len());

    let h = 1e-4f32;
    let mut r = rng::seeded(1);
    for (p, name) in names.iter().enumerate() {
        if name.contains("conv") && name.ends_with(".bias") {
            // every conv feeds a training-mode batch norm, which removes
            // any per-channel shift
            let worst = grads[p].data().iter().fold(0.0f32, |m, g| m.max(g.abs()));
            assert!(worst <= 1e-5, "{name}: gradient {worst:e} should vanish");
            continue;
        }
        let dir = random_tensor(grads[p].shape(), -1.0, 1.0, &mut r);
        let analytic = dot(&grads[p], &dir);
        let base = model.params_mut()[p].clone();
        *model.params_mut()[p] = shifted(&base, &dir, h);
        let plus = loss(&mut model, &x, &labels);
        *model.params_mut()[p] = shifted(&base, &dir, -h);
        let minus = loss(&mut model, &x, &labels);
        *model.params_mut()[p] = base;
        let numeric = (plus - minus) / (2.0 * h as f64);
        let scale = numeric.abs().max(analytic.abs());
        assert!(
            (numeric - analytic).abs() <= 5e-3 + 0.1 * scale,
            "{name}: analytic {analytic:e} numeric {numeric:e}"
        );
    }

    // all parameters at once, along the gradient: the derivative is |g|^2
    let norm2: f64 = grads.iter().map(|g| dot(g, g)).sum();
    let step = 1e-4 / norm2.sqrt() as f32;
    let base: Vec<Tensor> = model.params_mut().iter().map(|t| (**t).clone()).collect();
    let along = |sign: f32, model: &mut Model| {
        for (slot, (b, g)) in model.params_mut().into_iter().zip(base.iter().zip(&grads)) {
            *slot = shifted(b, g, sign * step);
        }
        loss(model, &x, &labels)
    };
    let numeric = (along(1.0, &mut model) - along(-1.0, &mut model)) / (2.0 * step as f64);
    assert!(
        (numeric - norm2).abs() <= 2e-2 * norm2,
        "|g|^2 {norm2:e} vs directional {numeric:e}"
    );
}

#[test]
fn short_training_run_reduces_loss() {
    let data = gen_synthetic(3, 12, (20, 20), 5).unwrap();
    let mut model = Model::build(tiny(), 1).unwrap();
    let config = TrainConfig {
        epochs: 6,
        batch_size: 12,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    let log = train(&mut model, &data, &config, |epoch, _| {
        seen.push(epoch);
        Ok(Some(format!("ckpt-{epoch}")))
    })
    .unwrap();
    assert_eq!(seen, [1, 5]);
    assert_eq!(log.len(), 6);
    assert_eq!(log[4].checkpoint.as_deref(), Some("ckpt-5"));
    assert!(log[1].checkpoint.is_none());
    assert!(log.iter().all(|r| r.mean_loss.is_finite() && (0.0..=1.0).contains(&r.accuracy)));
    assert!(
        log[5].mean_loss < log[0].mean_loss,
        "loss went from {} to {}",
        log[0].mean_loss,
        log[5].mean_loss
    );
}

#[test]
fn training_is_bitwise_repeatable() {
    let data = gen_synthetic(3, 8, (16, 16), 2).unwrap();
    let run = || {
        let mut model = Model::build(tiny(), 4).unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let log = train(&mut model, &data, &config, |_, _| Ok(None)).unwrap();
        let params: Vec<Vec<u32>> = model
            .named_params()
            .iter()
            .chain(model.named_buffers().iter())
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        (log, params)
    };
    assert_eq!(run(), run());
}

#[test]
fn epochs_above_cap_are_rejected() {
    let data = gen_synthetic(3, 4, (16, 16), 0).unwrap();
    let mut model = Model::build(tiny(), 0).unwrap();
    let config = TrainConfig {
        epochs: 121,
        batch_size: 4,
        ..TrainConfig::default()
    };
    assert!(train(&mut model, &data, &config, |_, _| Ok(None)).is_err());
}
