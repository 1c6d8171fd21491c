//! Model checkpoints as RDMA archives.
//!
//! Every parameter and batch-norm running statistic is stored under its
//! model name (`stage2.block1.conv1.weight`, `stem.bn.running_var`, ...),
//! followed by a `meta` tensor `[epoch, version]`.

use std::collections::BTreeMap;

use rsaforge_core::{ArchConfig, Model, Tensor};

use crate::format::{decode_archive, encode_archive};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const META: &str = "meta";

pub fn save_checkpoint(model: &Model, epoch: usize) -> Result<Vec<u8>> {
    let meta = Tensor::new(&[2], vec![epoch as f32, CHECKPOINT_VERSION as f32])?;
    let params = model.named_params();
    let buffers = model.named_buffers();
    let entries = params
        .iter()
        .chain(&buffers)
        .map(|(n, t)| (n.as_str(), *t))
        .chain([(META, &meta)]);
    encode_archive(entries).map_err(|source| Error::Invalid(format!("checkpoint: {source}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub epoch: usize,
}

fn read_meta(tensors: &BTreeMap<String, Tensor>) -> Result<usize> {
    let meta = tensors
        .get(META)
        .ok_or_else(|| Error::Invalid("checkpoint has no meta tensor".into()))?;
    match meta.data() {
        &[epoch, version] if version == CHECKPOINT_VERSION as f32 => {
            if epoch < 0.0 || epoch.fract() != 0.0 {
                return Err(Error::Invalid(format!("checkpoint epoch {epoch} is not a count")));
            }
            Ok(epoch as usize)
        }
        &[_, version] => Err(Error::Invalid(format!(
            "checkpoint version {version} is not supported"
        ))),
        _ => Err(Error::Invalid(format!(
            "checkpoint meta has shape {:?}, expected [2]",
            meta.shape()
        ))),
    }
}

/// Loads a checkpoint into a model built from `config`. Shape mismatches
/// name the offending parameter; unexpected tensors are rejected.
pub fn load_checkpoint(bytes: &[u8], config: &ArchConfig) -> Result<Checkpoint> {
    let tensors: BTreeMap<String, Tensor> = decode_archive(bytes)
        .map_err(|source| Error::Invalid(format!("checkpoint: {source}")))?
        .into_iter()
        .collect();
    let epoch = read_meta(&tensors)?;
    let mut model = Model::build(config.clone(), 0)?;
    let known = model.param_names().len() + model.named_buffers().len() + 1;
    if tensors.len() != known {
        let expected: Vec<String> = model
            .param_names()
            .into_iter()
            .chain(model.named_buffers().into_iter().map(|(n, _)| n))
            .collect();
        if let Some(extra) = tensors.keys().find(|k| *k != META && !expected.contains(k)) {
            return Err(Error::Invalid(format!(
                "checkpoint tensor {extra} does not belong to this architecture"
            )));
        }
    }
    model.load_state(&tensors)?;
    Ok(Checkpoint { model, epoch })
}

/// Recovers the architecture from parameter names and shapes. The input
/// size is not stored, so it is supplied by the caller.
pub fn infer_config(bytes: &[u8], input_size: (usize, usize)) -> Result<ArchConfig> {
    let tensors = decode_archive(bytes)
        .map_err(|source| Error::Invalid(format!("checkpoint: {source}")))?;
    let shape_of = |name: &str| -> Result<&[usize]> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape())
            .ok_or_else(|| Error::Invalid(format!("checkpoint lacks {name}")))
    };
    let mut blocks = [0usize; 4];
    let mut channels = [0usize; 4];
    for s in 0..4 {
        while tensors
            .iter()
            .any(|(n, _)| *n == format!("stage{}.block{}.conv1.weight", s + 1, blocks[s] + 1))
        {
            blocks[s] += 1;
        }
        channels[s] = shape_of(&format!("stage{}.block1.conv1.weight", s + 1))?[0];
    }
    let classes = shape_of("fc.weight")?[0];
    let mut config = ArchConfig::resnet20(classes)
        .with_channels(channels)
        .with_input_size(input_size.0, input_size.1);
    config.stage_blocks = blocks;
    config.validate()?;
    Ok(config)
}

/// [`infer_config`] followed by [`load_checkpoint`].
pub fn load_checkpoint_inferred(bytes: &[u8], input_size: (usize, usize)) -> Result<Checkpoint> {
    load_checkpoint(bytes, &infer_config(bytes, input_size)?)
}
