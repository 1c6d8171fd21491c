//! Mini-batch training loop with a fixed checkpoint cadence.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use crate::image::{preprocess_batch, IMAGENET_MEAN, IMAGENET_STD};
use crate::nn::{softmax_xent, softmax_xent_backward};
use crate::optim::{sgd_step, OptimState};
use crate::{rng, Error, Model, Result, Tensor};

/// Which epochs produce a checkpoint: optionally epoch 1, plus every
/// multiple of `every` (0 disables the periodic part).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointRule {
    pub first: bool,
    pub every: usize,
}

impl Default for CheckpointRule {
    fn default() -> Self {
        CheckpointRule {
            first: true,
            every: 5,
        }
    }
}

impl CheckpointRule {
    pub fn includes(&self, epoch: usize) -> bool {
        (self.first && epoch == 1) || (self.every > 0 && epoch > 0 && epoch % self.every == 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub checkpoints: CheckpointRule,
    pub seed: u64,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    /// Images are resized to the model's input size before normalisation.
    pub resize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            max_epochs: 120,
            batch_size: 32,
            checkpoints: CheckpointRule::default(),
            seed: 0,
            learning_rate: crate::optim::DEFAULT_LEARNING_RATE,
            momentum: crate::optim::DEFAULT_MOMENTUM,
            weight_decay: crate::optim::DEFAULT_WEIGHT_DECAY,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            resize: true,
        }
    }
}

/// Images `[M, 3, H, W]` in `[0, 1]` with one class index per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let [m, c, _, _] = images.dims4()?;
        if c != 3 {
            return Err(Error::InvalidShape {
                shape: images.shape().to_vec(),
                reason: "dataset images must have 3 channels",
            });
        }
        if labels.len() != m {
            return Err(Error::ShapeMismatch {
                op: "dataset labels",
                expected: alloc::vec![m],
                actual: alloc::vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Example-weighted mean of the batch losses.
    pub mean_loss: f64,
    /// Top-1 accuracy of the training-mode predictions made during the epoch.
    pub accuracy: f64,
    /// Whatever the checkpoint sink returned, typically a file path.
    pub checkpoint: Option<String>,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` in place.
///
/// Each epoch shuffles the examples with a generator seeded by
/// `seed + epoch`, then runs every mini-batch (the last one may be short)
/// through softmax cross-entropy and one SGD step. After epochs selected by
/// the checkpoint rule, `on_checkpoint(epoch, model)` is called and its
/// return value recorded.
pub fn train<F>(
    model: &mut Model,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(usize, &Model) -> Result<Option<String>>,
{
    if config.epochs > config.max_epochs {
        return Err(Error::InvalidArgument(format!(
            "{} epochs exceeds the maximum of {}",
            config.epochs, config.max_epochs
        )));
    }
    if config.batch_size == 0 || dataset.len() < config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "batch size {} needs 1..={} examples",
            config.batch_size,
            dataset.len()
        )));
    }
    if dataset.class_count() > model.config().num_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes but the model predicts {}",
            dataset.class_count(),
            model.config().num_classes
        )));
    }
    let mut optim = OptimState::new(config.learning_rate, config.momentum, config.weight_decay)?;
    let mut log = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok(log);
    }

    let inputs = if config.resize {
        preprocess_batch(
            dataset.images(),
            model.config().input_size,
            config.mean,
            config.std,
        )?
    } else {
        let [m, ..] = dataset.images().dims4()?;
        let normalized: Vec<Tensor> = (0..m)
            .map(|i| {
                let img = dataset.images().slice_outer(i, 1)?;
                let shape = img.shape()[1..].to_vec();
                crate::image::normalize_image(&img.reshape(&shape)?, config.mean, config.std)
            })
            .collect::<Result<_>>()?;
        Tensor::stack(&normalized)?
    };
    let names = model.param_names();
    let total = dataset.len();
    let mut order: Vec<usize> = (0..total).collect();

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::seeded(config.seed.wrapping_add(epoch as u64)));
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (batch_idx, idx) in order.chunks(config.batch_size).enumerate() {
            let x = inputs.gather_outer(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels()[i]).collect();
            let cache = model.forward_train(&x)?;
            let (loss, probs) = softmax_xent(cache.logits(), &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let k = probs.shape()[1];
            correct += probs
                .data()
                .chunks_exact(k)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            loss_sum += loss * labels.len() as f64;
            let grad = softmax_xent_backward(&probs, &labels)?;
            let grads = model.backward(&cache, &grad)?;
            drop(cache);
            sgd_step(&mut model.params_mut(), &grads, &names, &mut optim)?;
        }
        let checkpoint = if config.checkpoints.includes(epoch) {
            on_checkpoint(epoch, model)?
        } else {
            None
        };
        log.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / total as f64,
            accuracy: correct as f64 / total as f64,
            checkpoint,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_checkpoint_rule() {
        let rule = CheckpointRule::default();
        let picked: Vec<usize> = (0..=20).filter(|&e| rule.includes(e)).collect();
        assert_eq!(picked, [1, 5, 10, 15, 20]);
        for e in 0..=120 {
            assert_eq!(rule.includes(e), e == 1 || (e > 0 && e % 5 == 0));
        }
    }

    #[test]
    fn dataset_validation() {
        let imgs = Tensor::zeros(&[2, 3, 4, 4]).unwrap();
        assert!(LabeledDataset::new(imgs.clone(), alloc::vec![0, 1], 2).is_ok());
        assert!(LabeledDataset::new(imgs.clone(), alloc::vec![0, 2], 2).is_err());
        assert!(LabeledDataset::new(imgs, alloc::vec![0], 2).is_err());
    }
}
