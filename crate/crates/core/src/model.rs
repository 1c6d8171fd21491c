//! ResNet-20 / ResNet-18 assembly with named activation taps.
//!
//! Layout: a 7×7 stride-2 stem convolution, batch norm, ReLU and 3×3 stride-2
//! max pool; four stages of basic blocks (two 3×3 convolutions with an
//! additive skip); global average pooling; a fully connected classifier and
//! softmax. ResNet-20 differs from ResNet-18 only in running three blocks in
//! the first stage instead of two.
//!
//! The first block of stages 2–4 downsamples with a stride-2 first
//! convolution and a 1×1 stride-2 projection on the skip branch; every other
//! block keeps its input's shape.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{
    residual_add, softmax, BatchNorm2d, Conv2d, GlobalAvgPool, Layer, Linear, MaxPool2d, Mode,
    Relu,
};
use crate::{rng, Error, Result, Tensor};

/// Activation taps exposed for representational analysis, in network order.
pub const TAPS: [&str; 7] = [
    "stage1", "stage2", "stage3", "stage4", "avgpool", "fc", "softmax",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    /// Basic blocks per stage.
    pub stage_blocks: [usize; 4],
    /// Output channels per stage; the stem emits `stage_channels[0]`.
    pub stage_channels: [usize; 4],
    /// Expected input `(height, width)`.
    pub input_size: (usize, usize),
    pub num_classes: usize,
}

impl ArchConfig {
    pub const DEFAULT_INPUT: (usize, usize) = (64, 64);
    pub const STANDARD_CHANNELS: [usize; 4] = [64, 128, 256, 512];

    pub fn resnet20(num_classes: usize) -> Self {
        ArchConfig {
            stage_blocks: [3, 2, 2, 2],
            stage_channels: Self::STANDARD_CHANNELS,
            input_size: Self::DEFAULT_INPUT,
            num_classes,
        }
    }

    pub fn resnet18(num_classes: usize) -> Self {
        ArchConfig {
            stage_blocks: [2, 2, 2, 2],
            ..Self::resnet20(num_classes)
        }
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn with_channels(mut self, channels: [usize; 4]) -> Self {
        self.stage_channels = channels;
        self
    }

    /// Convolution and fully connected layers on the main path:
    /// `1 + 2 * sum(stage_blocks) + 1`. Projection shortcuts are not counted.
    pub fn weighted_layers(&self) -> usize {
        1 + 2 * self.stage_blocks.iter().sum::<usize>() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidArgument(msg));
        if self.stage_blocks.contains(&0) {
            return invalid(format!("every stage needs a block: {:?}", self.stage_blocks));
        }
        if self.stage_channels.contains(&0) {
            return invalid(format!("zero channels in {:?}", self.stage_channels));
        }
        if self.num_classes < 2 {
            return invalid(format!("need at least 2 classes, got {}", self.num_classes));
        }
        let (h, w) = self.input_size;
        if h < 8 || w < 8 {
            return invalid(format!("input {h}x{w} is smaller than 8x8"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Downsample {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Debug, Clone, PartialEq)]
struct BasicBlock {
    name: String,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<Downsample>,
}

/// Intermediate values of one block kept for the backward pass.
struct BlockCache {
    input: Tensor,
    c1: Tensor,
    b1: Tensor,
    r1: Tensor,
    c2: Tensor,
    skip_conv: Option<Tensor>,
    sum: Tensor,
    output: Tensor,
}

fn bn(name: &str, channels: usize) -> BatchNorm2d {
    let mut layer = BatchNorm2d::new(channels).with_label(name);
    layer.init_running_stats();
    layer
}

impl BasicBlock {
    fn new<R: rand::Rng>(name: String, cin: usize, cout: usize, stride: usize, r: &mut R) -> Self {
        let conv1 = Conv2d::he_init(cin, cout, 3, stride, 1, r);
        let conv2 = Conv2d::he_init(cout, cout, 3, 1, 1, r);
        let downsample = (stride != 1 || cin != cout).then(|| Downsample {
            conv: Conv2d::he_init(cin, cout, 1, stride, 0, r),
            bn: bn(&format!("{name}.downsample.bn"), cout),
        });
        // zero scale on the residual branch: a fresh block is an identity
        // (projection) map, which keeps early high-learning-rate steps stable
        let mut bn2 = bn(&format!("{name}.bn2"), cout);
        bn2.gamma = Tensor::from_parts(vec![cout], vec![0.0; cout]);
        BasicBlock {
            bn1: bn(&format!("{name}.bn1"), cout),
            bn2,
            name,
            conv1,
            conv2,
            downsample,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let m = Mode::Eval;
        let h = Relu.forward(&self.bn1.forward(&self.conv1.forward(x, m)?, m)?, m)?;
        let h = self.bn2.forward(&self.conv2.forward(&h, m)?, m)?;
        let sum = match &self.downsample {
            Some(ds) => residual_add(&h, &ds.bn.forward(&ds.conv.forward(x, m)?, m)?)?,
            None => residual_add(&h, x)?,
        };
        Relu.forward(&sum, m)
    }

    fn forward_train(&mut self, x: Tensor) -> Result<BlockCache> {
        let m = Mode::Train;
        let c1 = self.conv1.forward(&x, m)?;
        let b1 = self.bn1.forward_train(&c1)?;
        let r1 = Relu.forward(&b1, m)?;
        let c2 = self.conv2.forward(&r1, m)?;
        let b2 = self.bn2.forward_train(&c2)?;
        let (skip_conv, sum) = match &mut self.downsample {
            Some(ds) => {
                let sc = ds.conv.forward(&x, m)?;
                let sb = ds.bn.forward_train(&sc)?;
                (Some(sc), residual_add(&b2, &sb)?)
            }
            None => (None, residual_add(&b2, &x)?),
        };
        let output = Relu.forward(&sum, m)?;
        Ok(BlockCache {
            input: x,
            c1,
            b1,
            r1,
            c2,
            skip_conv,
            sum,
            output,
        })
    }

    /// Returns the input gradient and parameter gradients in [`Self::params`] order.
    fn backward(&self, cache: &BlockCache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let m = Mode::Train;
        let g_sum = Relu.backward(&cache.sum, grad_out, m)?.input;
        let bn2 = self.bn2.backward(&cache.c2, &g_sum, m)?;
        let conv2 = self.conv2.backward(&cache.r1, &bn2.input, m)?;
        let g_b1 = Relu.backward(&cache.b1, &conv2.input, m)?.input;
        let bn1 = self.bn1.backward(&cache.c1, &g_b1, m)?;
        let conv1 = self.conv1.backward(&cache.input, &bn1.input, m)?;

        let mut grads = Vec::with_capacity(12);
        grads.extend(conv1.params);
        grads.extend(bn1.params);
        grads.extend(conv2.params);
        grads.extend(bn2.params);

        let g_skip = match (&self.downsample, &cache.skip_conv) {
            (Some(ds), Some(sc)) => {
                let dbn = ds.bn.backward(sc, &g_sum, m)?;
                let dconv = ds.conv.backward(&cache.input, &dbn.input, m)?;
                grads.extend(dconv.params);
                grads.extend(dbn.params);
                dconv.input
            }
            _ => g_sum,
        };
        let g_in = residual_add(&conv1.input, &g_skip)?;
        Ok((g_in, grads))
    }

    fn components(&self) -> Vec<(String, &dyn Layer)> {
        let mut v: Vec<(String, &dyn Layer)> = vec![
            (format!("{}.conv1", self.name), &self.conv1),
            (format!("{}.bn1", self.name), &self.bn1),
            (format!("{}.conv2", self.name), &self.conv2),
            (format!("{}.bn2", self.name), &self.bn2),
        ];
        if let Some(ds) = &self.downsample {
            v.push((format!("{}.downsample.conv", self.name), &ds.conv));
            v.push((format!("{}.downsample.bn", self.name), &ds.bn));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        if let Some(ds) = &mut self.downsample {
            v.extend(ds.conv.params_mut());
            v.extend(ds.bn.params_mut());
        }
        v
    }

    fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut v = vec![&mut self.bn1, &mut self.bn2];
        if let Some(ds) = &mut self.downsample {
            v.push(&mut ds.bn);
        }
        v
    }
}

/// A ResNet built from an [`ArchConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ArchConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stem_pool: MaxPool2d,
    stages: Vec<Vec<BasicBlock>>,
    fc: Linear,
}

/// Everything the backward pass needs from one training forward pass.
pub struct TrainCache {
    input: Tensor,
    stem_conv: Tensor,
    stem_bn: Tensor,
    stem_relu: Tensor,
    blocks: Vec<Vec<BlockCache>>,
    pooled: Tensor,
    logits: Tensor,
}

impl TrainCache {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

/// Flattens `[N, ...]` to `[N, D]` (channel-major, row-major within a map).
fn flatten(t: &Tensor) -> Result<Tensor> {
    let n = t.shape()[0];
    let d = t.len() / n;
    t.clone().reshape(&[n, d])
}

fn check_taps(taps: &[&str]) -> Result<()> {
    for tap in taps {
        if !TAPS.contains(tap) {
            return Err(Error::UnknownTap {
                name: tap.to_string(),
                valid: TAPS.join(", "),
            });
        }
    }
    Ok(())
}

impl Model {
    /// Builds a model from a seeded stream: He-uniform convolutions and a
/// fan-in-scaled classifier.
    pub fn build(config: ArchConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let ch = config.stage_channels;
        let stem_conv = Conv2d::he_init(3, ch[0], 7, 2, 3, &mut r);
        let mut stages = Vec::with_capacity(4);
        let mut cin = ch[0];
        for (s, (&blocks, &cout)) in config.stage_blocks.iter().zip(&ch).enumerate() {
            let stage = (0..blocks)
                .map(|b| {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    let name = format!("stage{}.block{}", s + 1, b + 1);
                    let block_in = if b == 0 { cin } else { cout };
                    BasicBlock::new(name, block_in, cout, stride, &mut r)
                })
                .collect();
            stages.push(stage);
            cin = cout;
        }
        let fc = Linear::fan_in_init(ch[3], config.num_classes, &mut r);
        Ok(Model {
            stem_conv,
            stem_bn: bn("stem.bn", ch[0]),
            stem_pool: MaxPool2d::new(3, 2, 1)?,
            stages,
            fc,
            config,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    /// Ordered layer names, from the stem to the softmax.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["stem.conv", "stem.bn", "stem.relu", "stem.maxpool"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for stage in &self.stages {
            names.extend(stage.iter().map(|b| b.name.clone()));
        }
        names.extend(["avgpool", "fc", "softmax"].iter().map(|s| s.to_string()));
        names
    }

    fn components(&self) -> Vec<(String, &dyn Layer)> {
        let mut v: Vec<(String, &dyn Layer)> = vec![
            ("stem.conv".into(), &self.stem_conv),
            ("stem.bn".into(), &self.stem_bn),
        ];
        for block in self.stages.iter().flatten() {
            v.extend(block.components());
        }
        v.push(("fc".into(), &self.fc));
        v
    }

    /// Convolutions on the main path plus the classifier, counted from the
    /// built structure.
    pub fn weighted_layer_count(&self) -> usize {
        let block_convs: usize = self.stages.iter().map(|s| 2 * s.len()).sum();
        1 + block_convs + 1
    }

    /// Trainable parameters with fully qualified names, in optimiser order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (layer, component) in self.components() {
            for (pname, t) in component.param_names().iter().zip(component.params()) {
                out.push((format!("{layer}.{pname}"), t));
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    /// Mutable parameters in the same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.stem_conv.params_mut();
        v.extend(self.stem_bn.params_mut());
        for block in self.stages.iter_mut().flatten() {
            v.extend(block.params_mut());
        }
        v.extend(self.fc.params_mut());
        v
    }

    fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut v = vec![&mut self.stem_bn];
        for block in self.stages.iter_mut().flatten() {
            v.extend(block.batchnorms_mut());
        }
        v
    }

    pub fn batchnorm_count(&self) -> usize {
        1 + self
            .stages
            .iter()
            .flatten()
            .map(|b| 2 + usize::from(b.downsample.is_some()))
            .sum::<usize>()
    }

    /// Batch-norm running statistics as `<layer>.running_mean` /
    /// `<layer>.running_var`.
    pub fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        let mut bns = vec![&self.stem_bn];
        for block in self.stages.iter().flatten() {
            bns.push(&block.bn1);
            bns.push(&block.bn2);
            if let Some(ds) = &block.downsample {
                bns.push(&ds.bn);
            }
        }
        let mut out = Vec::with_capacity(2 * bns.len());
        for bn in bns {
            if let Some(r) = &bn.running {
                out.push((format!("{}.running_mean", bn.label), &r.mean));
                out.push((format!("{}.running_var", bn.label), &r.var));
            }
        }
        out
    }

    /// Total scalar parameters: weights, biases and batch-norm affine terms.
    pub fn count_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Replaces every parameter and running statistic from a name → tensor
    /// map. Shapes must match this model's architecture exactly.
    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let take = |name: &str, current: &Tensor| -> Result<Tensor> {
            let t = state
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.to_string()))?;
            if t.shape() != current.shape() {
                return Err(Error::ParamMismatch {
                    param: name.to_string(),
                    expected: current.shape().to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
            Ok(t.clone())
        };
        // validate everything before mutating
        let params: Vec<Tensor> = self
            .named_params()
            .into_iter()
            .map(|(name, cur)| take(&name, cur))
            .collect::<Result<_>>()?;
        let buffers: Vec<Tensor> = self
            .named_buffers()
            .into_iter()
            .map(|(name, cur)| take(&name, cur))
            .collect::<Result<_>>()?;
        if let Some(i) = buffers
            .iter()
            .skip(1)
            .step_by(2)
            .position(|v| v.data().iter().any(|&x| !(x > 0.0)))
        {
            let (name, _) = &self.named_buffers()[2 * i + 1];
            return Err(Error::InvalidArgument(format!(
                "{name} must be strictly positive"
            )));
        }
        for (dst, src) in self.params_mut().into_iter().zip(params) {
            *dst = src;
        }
        let mut buffers = buffers.into_iter();
        for bn in self.batchnorms_mut() {
            let running = bn.running.as_mut().expect("built models carry running stats");
            running.mean = buffers.next().expect("one mean per batch norm");
            running.var = buffers.next().expect("one variance per batch norm");
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let [_, c, h, w] = batch.dims4()?;
        let (eh, ew) = self.config.input_size;
        if c != 3 || h != eh || w != ew {
            return Err(Error::ShapeMismatch {
                op: "model input",
                expected: vec![batch.shape()[0], 3, eh, ew],
                actual: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Eval-mode forward returning flattened `[N, D]` activations for each
    /// requested tap. Does not modify the model.
    pub fn forward_with_taps(
        &self,
        batch: &Tensor,
        taps: &[&str],
    ) -> Result<BTreeMap<String, Tensor>> {
        check_taps(taps)?;
        self.check_batch(batch)?;
        let m = Mode::Eval;
        let mut out = BTreeMap::new();
        let mut h = self.stem_conv.forward(batch, m)?;
        h = self.stem_bn.forward(&h, m)?;
        h = Relu.forward(&h, m)?;
        h = self.stem_pool.forward(&h, m)?;
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                h = block.forward(&h)?;
            }
            let tap = TAPS[s];
            if taps.contains(&tap) {
                out.insert(tap.to_string(), flatten(&h)?);
            }
        }
        let pooled = GlobalAvgPool.forward(&h, m)?;
        let logits = self.fc.forward(&pooled, m)?;
        for (tap, t) in [("avgpool", &pooled), ("fc", &logits)] {
            if taps.contains(&tap) {
                out.insert(tap.to_string(), t.clone());
            }
        }
        if taps.contains(&"softmax") {
            out.insert("softmax".to_string(), softmax(&logits)?);
        }
        Ok(out)
    }

    /// Training-mode forward: batch statistics normalise every batch-norm
    /// layer and running statistics are updated.
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<TrainCache> {
        self.check_batch(batch)?;
        let m = Mode::Train;
        let stem_conv = self.stem_conv.forward(batch, m)?;
        let stem_bn = self.stem_bn.forward_train(&stem_conv)?;
        let stem_relu = Relu.forward(&stem_bn, m)?;
        let mut h = self.stem_pool.forward(&stem_relu, m)?;
        let mut blocks = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            let mut caches = Vec::with_capacity(stage.len());
            for block in stage.iter_mut() {
                let cache = block.forward_train(h)?;
                h = cache.output.clone();
                caches.push(cache);
            }
            blocks.push(caches);
        }
        let pooled = GlobalAvgPool.forward(&h, m)?;
        let logits = self.fc.forward(&pooled, m)?;
        Ok(TrainCache {
            input: batch.clone(),
            stem_conv,
            stem_bn,
            stem_relu,
            blocks,
            pooled,
            logits,
        })
    }

    /// Training-mode counterpart of [`Model::forward_with_taps`].
    pub fn forward_with_taps_train(
        &mut self,
        batch: &Tensor,
        taps: &[&str],
    ) -> Result<BTreeMap<String, Tensor>> {
        check_taps(taps)?;
        let cache = self.forward_train(batch)?;
        let mut out = BTreeMap::new();
        for tap in taps {
            let t = match *tap {
                "avgpool" => cache.pooled.clone(),
                "fc" => cache.logits.clone(),
                "softmax" => softmax(&cache.logits)?,
                stage => {
                    let s = TAPS.iter().position(|t| *t == stage).expect("checked");
                    let last = cache.blocks[s].last().expect("stages are non-empty");
                    flatten(&last.output)?
                }
            };
            out.insert(tap.to_string(), t);
        }
        Ok(out)
    }

    /// Gradients of the loss for every parameter, in [`Model::named_params`]
    /// order, given the loss gradient with respect to the logits.
    pub fn backward(&self, cache: &TrainCache, grad_logits: &Tensor) -> Result<Vec<Tensor>> {
        cache.logits.same_shape(grad_logits, "model backward")?;
        let m = Mode::Train;
        let fc = self.fc.backward(&cache.pooled, grad_logits, m)?;
        let last = cache
            .blocks
            .last()
            .and_then(|s| s.last())
            .expect("stages are non-empty");
        let mut g = GlobalAvgPool.backward(&last.output, &fc.input, m)?.input;

        let mut block_grads: Vec<Vec<Tensor>> = Vec::new();
        for (stage, caches) in self.stages.iter().zip(&cache.blocks).rev() {
            for (block, bc) in stage.iter().zip(caches).rev() {
                let (g_in, grads) = block.backward(bc, &g)?;
                g = g_in;
                block_grads.push(grads);
            }
        }
        g = self.stem_pool.backward(&cache.stem_relu, &g, m)?.input;
        g = Relu.backward(&cache.stem_bn, &g, m)?.input;
        let bn = self.stem_bn.backward(&cache.stem_conv, &g, m)?;
        let conv = self.stem_conv.backward(&cache.input, &bn.input, m)?;

        let mut grads = conv.params;
        grads.extend(bn.params);
        for bg in block_grads.into_iter().rev() {
            grads.extend(bg);
        }
        grads.extend(fc.params);
        Ok(grads)
    }
}
