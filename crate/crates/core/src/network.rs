//! Trainable networks assembled from a [`LayerPlan`], the SGD training loop,
//! crop augmentation and the checkpoint container.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archdsl::{self, ArchSpec, ExpandError, Geometry, LayerKind, LayerPlan, Padding};
use crate::eval::{self, EvalError};
use crate::multilabel::{sample_target, LabelError, LabelSet};
use crate::tensor::{BatchNormConfig, Mode, ParamId, Parameter, RunningStats, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Expand(#[from] ExpandError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite value in epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

/// Classifier head on top of the convolutional stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub spp_levels: Vec<usize>,
    pub hidden_fc_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub num_classes: usize,
}

impl HeadConfig {
    /// SPP {6,3,2,1}, two 4096-wide hidden layers, dropout 0.2.
    pub fn imagenet(num_classes: usize) -> Self {
        HeadConfig { spp_levels: vec![6, 3, 2, 1], hidden_fc_widths: vec![4096, 4096], dropout_rate: 0.2, num_classes }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.num_classes < 2 {
            return Err(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.spp_levels.is_empty() || self.spp_levels.contains(&0) {
            return Err(format!("bad SPP levels {:?}", self.spp_levels));
        }
        if self.hidden_fc_widths.contains(&0) {
            return Err("hidden fc width 0".into());
        }
        Ok(())
    }

    pub fn spp_bins(&self) -> usize {
        self.spp_levels.iter().map(|l| l * l).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    /// The learning rate is divided by this factor at each decay step.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            base_lr: 0.01,
            lr_decay_factor: 10.0,
            lr_decay_every: 20,
            total_epochs: 90,
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetworkError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.lr_decay_factor >= 1.0 && self.lr_decay_factor.is_finite()) {
            return bad("lr_decay_factor must be at least 1");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// `base_lr / factor^floor(epoch / every)`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let steps = (epoch / config.lr_decay_every.max(1)) as i32;
    config.base_lr / config.lr_decay_factor.powi(steps)
}

#[derive(Debug, Clone, PartialEq)]
enum NetLayer {
    Conv { kernel: ParamId, stride: usize, padding: Padding },
    Pool { window: usize, stride: usize },
    Spp { levels: Vec<usize> },
    Fc { weight: ParamId },
    BatchNorm { gamma: ParamId, beta: ParamId, stats: usize },
    Relu,
    Dropout { rate: f64 },
}

/// A network in single precision together with its optimizer state.
#[derive(Debug, Clone)]
pub struct Network {
    pub arch: ArchSpec,
    pub input: Geometry,
    pub head: HeadConfig,
    pub bn_config: BatchNormConfig,
    /// Completed training epochs.
    pub epoch: usize,
    layers: Vec<NetLayer>,
    params: Vec<Parameter<f32>>,
    names: Vec<String>,
    stats: Vec<RunningStats<f32>>,
}

/// Distribution of the initial conv and fc weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// Zero-mean Gaussian with variance 2/fan_in.
    #[default]
    He,
    /// Uniform on ±1/sqrt(fan_in).
    Uniform,
}

impl WeightInit {
    fn draw<R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f32> {
        match self {
            WeightInit::He => Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng),
            WeightInit::Uniform => Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng),
        }
    }
}

/// Expands `arch` at `input` and builds the network with He initialization.
pub fn build_from_arch(arch: &ArchSpec, input: Geometry, head: &HeadConfig, init_seed: u64) -> Result<Network> {
    build_from_arch_with(arch, input, head, init_seed, WeightInit::He)
}

pub fn build_from_arch_with(arch: &ArchSpec, input: Geometry, head: &HeadConfig, init_seed: u64, init: WeightInit) -> Result<Network> {
    let plan = archdsl::expand_layers(arch, input, head)?;
    build_network(arch, &plan, head, init_seed, init)
}

/// Builds a network for `plan`; batchnorm starts at gamma 1, beta 0.
pub fn build_network(arch: &ArchSpec, plan: &LayerPlan, head: &HeadConfig, init_seed: u64, init: WeightInit) -> Result<Network> {
    head.validate().map_err(NetworkError::Config)?;
    let last = plan.layers.last().ok_or_else(|| NetworkError::Config("empty plan".into()))?;
    if last.kind != LayerKind::Fc || last.out_channels != head.num_classes {
        return Err(NetworkError::Config(format!(
            "plan ends in {} with {} outputs, head wants {} classes",
            last.kind.name(),
            last.out_channels,
            head.num_classes
        )));
    }
    if !archdsl::channels_chain(plan) {
        return Err(NetworkError::Config("plan layers do not chain".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut net = Network {
        arch: arch.clone(),
        input: plan.input,
        head: head.clone(),
        bn_config: BatchNormConfig::default(),
        epoch: 0,
        layers: Vec::with_capacity(plan.layers.len()),
        params: Vec::new(),
        names: Vec::new(),
        stats: Vec::new(),
    };
    for (i, layer) in plan.layers.iter().enumerate() {
        let net_layer = match &layer.kind {
            LayerKind::Conv => {
                let fan_in = layer.in_channels * layer.filter_h * layer.filter_w;
                let shape = [layer.out_channels, layer.in_channels, layer.filter_h, layer.filter_w];
                let w = init.draw(&shape, fan_in, &mut rng);
                let kernel = net.add_param(format!("conv{i}.kernel"), w, true);
                NetLayer::Conv { kernel, stride: layer.stride, padding: layer.padding }
            }
            LayerKind::Pool => NetLayer::Pool { window: layer.filter_h, stride: layer.stride },
            LayerKind::Spp { levels } => NetLayer::Spp { levels: levels.clone() },
            LayerKind::Fc => {
                let shape = [layer.out_channels, layer.in_channels];
                let w = init.draw(&shape, layer.in_channels, &mut rng);
                NetLayer::Fc { weight: net.add_param(format!("fc{i}.weight"), w, true) }
            }
            LayerKind::BatchNorm => {
                let c = layer.out_channels;
                let gamma = net.add_param(format!("bn{i}.gamma"), Tensor::full(&[c], 1.0), false);
                let beta = net.add_param(format!("bn{i}.beta"), Tensor::zeros(&[c]), false);
                net.stats.push(RunningStats::new(c));
                NetLayer::BatchNorm { gamma, beta, stats: net.stats.len() - 1 }
            }
            LayerKind::Relu => NetLayer::Relu,
            LayerKind::Dropout { rate } => NetLayer::Dropout { rate: *rate },
        };
        net.layers.push(net_layer);
    }
    Ok(net)
}

#[allow(clippy::too_many_arguments)]
fn run_layers<'a, R: Rng + ?Sized>(
    layers: &[NetLayer],
    params: &'a [Parameter<f32>],
    stats: &mut [RunningStats<f32>],
    bn: BatchNormConfig,
    tape: &mut Tape<'a, f32>,
    mut x: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, TensorError> {
    for layer in layers {
        x = match layer {
            NetLayer::Conv { kernel, stride, padding } => {
                let k = tape.param(*kernel, &params[kernel.0].value);
                tape.conv2d(x, k, *stride, *padding)?
            }
            NetLayer::Pool { window, stride } => tape.max_pool(x, *window, *stride)?,
            NetLayer::Spp { levels } => tape.spp(x, levels)?,
            NetLayer::Fc { weight } => {
                let w = tape.param(*weight, &params[weight.0].value);
                tape.linear(x, w)?
            }
            NetLayer::BatchNorm { gamma, beta, stats: s } => {
                let g = tape.param(*gamma, &params[gamma.0].value);
                let b = tape.param(*beta, &params[beta.0].value);
                tape.batch_norm(x, g, b, mode, &mut stats[*s], bn)?
            }
            NetLayer::Relu => tape.relu(x)?,
            NetLayer::Dropout { rate } => tape.dropout(x, *rate, mode, rng)?,
        };
    }
    Ok(x)
}

impl Network {
    fn add_param(&mut self, name: String, value: Tensor<f32>, decay: bool) -> ParamId {
        self.params.push(Parameter::new(value, decay));
        self.names.push(name);
        ParamId(self.params.len() - 1)
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.len() as u64).sum()
    }

    pub fn params(&self) -> &[Parameter<f32>] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn running_stats(&self) -> &[RunningStats<f32>] {
        &self.stats
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes
    }

    /// Records the forward pass of `x: [N,C,H,W]` on `tape` and returns
    /// the logits. Train mode updates batchnorm running statistics.
    pub fn forward<'a, R: Rng + ?Sized>(
        &'a mut self,
        tape: &mut Tape<'a, f32>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let Network { layers, params, stats, bn_config, .. } = self;
        run_layers(layers, params, stats, *bn_config, tape, x, mode, rng)
    }

    /// Inference logits `[N, classes]` for a batch.
    pub fn predict(&self, batch: Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        let mut stats = self.stats.clone();
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_layers(&self.layers, &self.params, &mut stats, self.bn_config, &mut tape, x, Mode::Infer, &mut rng)?;
        Ok(tape.value(out).clone())
    }

    /// Mean cross-entropy of one training batch and its parameter gradients.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &mut self,
        batch: Tensor<f32>,
        targets: &[usize],
        rng: &mut R,
    ) -> Result<(f32, Vec<Option<Tensor<f32>>>), TensorError> {
        let count = self.params.len();
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let logits = self.forward(&mut tape, x, Mode::Train, rng)?;
        let loss = tape.softmax_cross_entropy(logits, targets)?;
        let grads = tape.backward(loss)?;
        let value = tape.value(loss).item();
        Ok((value, (0..count).map(|i| grads.param(ParamId(i))).collect()))
    }
}

/// One momentum SGD update of a single parameter:
/// `v ← m·v + g + wd·w`, `w ← w − lr·v` (decay only where enabled).
pub fn sgd_update(param: &mut Parameter<f32>, grad: Option<&Tensor<f32>>, lr: f64, momentum: f64, weight_decay: f64) {
    let wd = if param.decay { weight_decay as f32 } else { 0.0 };
    let (lr, m) = (lr as f32, momentum as f32);
    let values = param.value.data_mut();
    let vel = param.momentum.data_mut();
    let g = grad.map(Tensor::data);
    for i in 0..values.len() {
        let gi = g.map_or(0.0, |g| g[i]);
        vel[i] = m * vel[i] + gi + wd * values[i];
        values[i] -= lr * vel[i];
    }
}

/// Applies [`sgd_update`] to every parameter with the rate of `epoch`.
pub fn sgd_step(net: &mut Network, grads: &[Option<Tensor<f32>>], config: &TrainConfig, epoch: usize) -> Result<()> {
    if grads.len() != net.params.len() {
        return Err(NetworkError::Config(format!("{} gradients for {} parameters", grads.len(), net.params.len())));
    }
    let lr = lr_at(config, epoch);
    for (i, (p, g)) in net.params.iter_mut().zip(grads).enumerate() {
        sgd_update(p, g.as_ref(), lr, config.momentum, config.weight_decay);
        if !p.value.is_finite() {
            return Err(NetworkError::NonFinite { epoch, batch: 0, detail: format!("update of {}", net.names[i]) });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentMode {
    Train,
    Test,
}

/// The ten crop views: center, top-left, top-right, bottom-left,
/// bottom-right, then the same five mirrored horizontally.
pub const VIEW_COUNT: usize = 10;

/// Top-left corner of view `view % 5` for a `crop` window on `h×w`.
pub fn view_offset(h: usize, w: usize, crop: usize, view: usize) -> (usize, usize) {
    match view % 5 {
        0 => ((h - crop) / 2, (w - crop) / 2),
        1 => (0, 0),
        2 => (0, w - crop),
        3 => (h - crop, 0),
        _ => (h - crop, w - crop),
    }
}

/// Cuts view `view` (see [`VIEW_COUNT`]) of size `crop` from `[C,H,W]`.
pub fn crop_view(image: &Tensor<f32>, crop: usize, view: usize) -> Result<Tensor<f32>, TensorError> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(TensorError::Shape { op: "augment", detail: format!("expected CHW, got {s:?}") }),
    };
    if crop == 0 || crop > h || crop > w || view >= VIEW_COUNT {
        return Err(TensorError::Invalid { op: "augment", detail: format!("crop {crop} / view {view} on {h}x{w}") });
    }
    let (top, left) = view_offset(h, w, crop, view);
    let flip = view >= 5;
    let src = image.data();
    let mut out = Vec::with_capacity(c * crop * crop);
    for ch in 0..c {
        for y in 0..crop {
            let row = &src[(ch * h + top + y) * w + left..][..crop];
            if flip {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::new(vec![c, crop, crop], out)
}

/// Train mode draws one of the ten views uniformly; test mode takes the
/// center crop.
pub fn augment<R: Rng + ?Sized>(image: &Tensor<f32>, mode: AugmentMode, crop: usize, rng: &mut R) -> Result<Tensor<f32>, TensorError> {
    let view = match mode {
        AugmentMode::Train => rng.gen_range(0..VIEW_COUNT),
        AugmentMode::Test => 0,
    };
    crop_view(image, crop, view)
}

/// 8-bit interleaved RGB to a `[3,H,W]` tensor scaled to [-1, 1].
pub fn rgb_to_tensor(rgb: &[u8], height: usize, width: usize) -> Result<Tensor<f32>, TensorError> {
    if rgb.len() != height * width * 3 {
        return Err(TensorError::Shape { op: "rgb_to_tensor", detail: format!("{} bytes for {height}x{width}", rgb.len()) });
    }
    let plane = height * width;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px[ch] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

/// Training or evaluation images at the base size, with their tags.
pub trait Dataset: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Image `i` as `[C,H,W]`.
    fn image(&self, i: usize) -> Result<Tensor<f32>>;
    fn labels(&self, i: usize) -> &LabelSet;
}

/// Options for [`train`] that are not part of the recorded configuration.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Side of the square crop fed to the network.
    pub crop: usize,
    /// Directory receiving `epoch-NNNN.ckpt` after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    pub validation: Option<&'a dyn Dataset>,
    /// Stop after this many epochs in this call.
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub batches: usize,
    pub samples: usize,
    pub skipped_unlabeled: usize,
    pub validation_map: Option<f64>,
    pub seconds: f64,
}

/// Generator for everything random in `epoch` (shuffle, views, targets,
/// dropout); keyed on `(seed, epoch)` so a resumed run replays exactly.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains from `net.epoch` up to `config.total_epochs` epochs.
///
/// Each visit of an image draws one positive tag as its target; images
/// without positives are skipped. A trailing batch of one image is dropped
/// since batchnorm needs two values per channel.
pub fn train(net: &mut Network, data: &dyn Dataset, config: &TrainConfig, opts: &TrainOptions<'_>) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    let crop = if opts.crop == 0 { net.input.height.min(net.input.width) } else { opts.crop };
    for i in 0..data.len() {
        data.labels(i).check(net.num_classes())?;
    }
    let labelled: Vec<usize> = (0..data.len()).filter(|&i| !data.labels(i).is_empty()).collect();
    let skipped = data.len() - labelled.len();
    let end = match opts.max_epochs {
        Some(n) => config.total_epochs.min(net.epoch + n),
        None => config.total_epochs,
    };
    let mut metrics = Vec::new();
    while net.epoch < end {
        let epoch = net.epoch;
        let started = Instant::now();
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order = labelled.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0;
        let mut samples = 0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let draws: Vec<(usize, usize, usize)> = chunk
                .iter()
                .map(|&i| {
                    let view = rng.gen_range(0..VIEW_COUNT);
                    sample_target(data.labels(i), &mut rng).map(|t| (i, view, t))
                })
                .collect::<Result<_, _>>()?;
            let views: Vec<Tensor<f32>> = draws
                .par_iter()
                .map(|&(i, view, _)| Ok(crop_view(&data.image(i)?, crop, view)?))
                .collect::<Result<_>>()?;
            let targets: Vec<usize> = draws.iter().map(|d| d.2).collect();
            let batch = Tensor::stack(&views)?;
            let (loss, grads) = net.loss_and_grads(batch, &targets, &mut rng).map_err(|e| match e {
                TensorError::NonFinite { op } => {
                    NetworkError::NonFinite { epoch, batch: bi, detail: format!("{op} produced a non-finite value") }
                }
                other => other.into(),
            })?;
            sgd_step(net, &grads, config, epoch).map_err(|e| match e {
                NetworkError::NonFinite { detail, .. } => NetworkError::NonFinite { epoch, batch: bi, detail },
                other => other,
            })?;
            loss_sum += loss as f64;
            batches += 1;
            samples += chunk.len();
        }
        net.epoch += 1;
        let validation_map = match opts.validation {
            Some(v) => Some(evaluate(net, v, crop, config.batch_size.max(2))?),
            None => None,
        };
        let m = EpochMetrics {
            epoch,
            lr: lr_at(config, epoch),
            mean_loss: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            batches,
            samples,
            skipped_unlabeled: skipped,
            validation_map,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} lr {:.2e} loss {:.4}{} ({:.1}s)",
            m.epoch,
            m.lr,
            m.mean_loss,
            m.validation_map.map(|v| format!(" val mAP {v:.4}")).unwrap_or_default(),
            m.seconds
        );
        if let Some(dir) = &opts.checkpoint_dir {
            fs::create_dir_all(dir)?;
            save_checkpoint(net, config, &dir.join(format!("epoch-{:04}.ckpt", net.epoch)))?;
        }
        metrics.push(m);
    }
    Ok(metrics)
}

/// Center-crop logits for every image of `data`, `scores[item][class]`.
pub fn score_dataset(net: &Network, data: &dyn Dataset, crop: usize, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let views: Vec<Tensor<f32>> =
            chunk.par_iter().map(|&i| Ok(crop_view(&data.image(i)?, crop, 0)?)).collect::<Result<_>>()?;
        let logits = net.predict(Tensor::stack(&views)?)?;
        for r in 0..chunk.len() {
            out.push(logits.row(r).iter().map(|&v| v as f64).collect());
        }
    }
    Ok(out)
}

/// Test mAP of `net` on `data` (center crops).
pub fn evaluate(net: &Network, data: &dyn Dataset, crop: usize, batch_size: usize) -> Result<f64> {
    let scores = score_dataset(net, data, crop, batch_size)?;
    let classes = net.num_classes();
    let truth: Vec<Vec<bool>> =
        (0..data.len()).map(|i| (0..classes).map(|c| data.labels(i).contains(c)).collect()).collect();
    Ok(eval::dense_mean_ap(&scores, &truth)?)
}

const MAGIC: &[u8; 8] = b"TAGKITCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    arch: String,
    input: Geometry,
    head: HeadConfig,
    train: TrainConfig,
    epoch: usize,
    /// The per-epoch generator is derived from `(train.seed, epoch)`, so
    /// these two values are the full random state.
    rng: (u64, usize),
    tensors: Vec<TensorEntry>,
}

fn state_tensors(net: &Network) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out = Vec::new();
    for (p, name) in net.params.iter().zip(&net.names) {
        out.push((name.clone(), p.value.shape().to_vec(), p.value.data()));
    }
    for (p, name) in net.params.iter().zip(&net.names) {
        out.push((format!("{name}.momentum"), p.momentum.shape().to_vec(), p.momentum.data()));
    }
    for (i, s) in net.stats.iter().enumerate() {
        out.push((format!("running{i}.mean"), vec![s.mean.len()], &s.mean[..]));
        out.push((format!("running{i}.var"), vec![s.var.len()], &s.var[..]));
    }
    out
}

/// Writes the checkpoint container: magic, header length (u64 LE), JSON
/// header, then little-endian f32 payloads in directory order.
pub fn save_checkpoint(net: &Network, config: &TrainConfig, path: &Path) -> Result<()> {
    let tensors = state_tensors(net);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset });
        offset += 4 * data.len() as u64;
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        arch: archdsl::render_arch_file(&net.arch),
        input: net.input,
        head: net.head.clone(),
        train: config.clone(),
        epoch: net.epoch,
        rng: (config.seed, net.epoch),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("ckpt.tmp");
    let mut w = std::io::BufWriter::new(fs::File::create(&tmp)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, _, data) in &tensors {
        for v in *data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Restores a network and the training configuration it was saved with.
pub fn load_checkpoint(path: &Path) -> Result<(Network, TrainConfig)> {
    let bad = |m: String| NetworkError::Checkpoint(format!("{}: {m}", path.display()));
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| bad(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let arch = archdsl::parse_arch_file(&header.arch).map_err(|e| bad(e.to_string()))?;
    let mut net = build_from_arch(&arch, header.input, &header.head, 0)?;
    net.epoch = header.epoch;
    let payload = &bytes[payload_start..];
    let expected = state_tensors(&net).into_iter().map(|(n, s, _)| (n, s)).collect::<Vec<_>>();
    if expected.len() != header.tensors.len() {
        return Err(bad(format!("{} tensors, expected {}", header.tensors.len(), expected.len())));
    }
    let mut values: Vec<Vec<f32>> = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(bad(format!("tensor {} {:?} does not match {} {:?}", entry.name, entry.shape, name, shape)));
        }
        let len: usize = shape.iter().product();
        let start = entry.offset as usize;
        let chunk = payload.get(start..start + 4 * len).ok_or_else(|| bad(format!("payload of {name} truncated")))?;
        values.push(chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect());
    }
    let mut values = values.into_iter();
    let n = net.params.len();
    for p in net.params.iter_mut() {
        p.value.data_mut().copy_from_slice(&values.next().unwrap());
    }
    for p in net.params.iter_mut().take(n) {
        p.momentum.data_mut().copy_from_slice(&values.next().unwrap());
    }
    for s in net.stats.iter_mut() {
        s.mean = values.next().unwrap();
        s.var = values.next().unwrap();
    }
    Ok((net, header.train))
}
