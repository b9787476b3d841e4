//! Deterministic mini-batch SGD over a [`RecurrentHead`].
//!
//! Each iteration runs one forward pass per sample and takes an optimiser
//! step. Then it folds the same pass's last-step foreground probabilities
//! into the EMA confusion matrix, so a batch never sees its own statistics.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::confmat::{fg_renormalize, ConfusionMatrix};
use crate::datagen::{LongTailDataset, Partition};
use crate::error::{invalid, Error, Result};
use crate::head::{HeadParams, ParamGroup, RecurrentHead};
use crate::loss::{Loss, LossConfig, LossVariant};
use crate::report::{evaluate, MetricsReport, RunMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Random,
    RepeatFactor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "64")]
    F64,
    /// Parameters and features are rounded to `f32` after every update.
    #[serde(rename = "32")]
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub per_iteration_warmup: bool,
    #[serde(default = "d_decay_epochs")]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "d_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "d_sampler")]
    pub sampler: Sampler,
    #[serde(default = "d_rf")]
    pub rf_threshold: f64,
    #[serde(default = "d_pcb_start")]
    pub pcb_start_epoch: usize,
    /// Two phases split at `pcb_start_epoch`: everything trains with the
    /// trade-off held at zero, then only the classifier and projection train.
    #[serde(default)]
    pub decoupled: bool,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_precision")]
    pub precision: Precision,
}

fn d_epochs() -> usize {
    60
}
fn d_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    0.1
}
fn d_momentum() -> f64 {
    0.9
}
fn d_wd() -> f64 {
    1e-4
}
fn d_decay_epochs() -> Vec<usize> {
    vec![40, 50]
}
fn d_decay_factor() -> f64 {
    0.1
}
fn d_sampler() -> Sampler {
    Sampler::Random
}
fn d_rf() -> f64 {
    1e-3
}
fn d_pcb_start() -> usize {
    40
}
fn d_gamma() -> f64 {
    0.99
}
fn d_precision() -> Precision {
    Precision::F64
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr: d_lr(),
            momentum: d_momentum(),
            weight_decay: d_wd(),
            warmup_epochs: 0,
            per_iteration_warmup: false,
            decay_epochs: d_decay_epochs(),
            decay_factor: d_decay_factor(),
            sampler: d_sampler(),
            rf_threshold: d_rf(),
            pcb_start_epoch: d_pcb_start(),
            decoupled: false,
            gamma: d_gamma(),
            seed: 0,
            precision: d_precision(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid("gamma", "must lie in (0, 1)"));
        }
        if !(self.decay_factor > 0.0) {
            return Err(invalid("decay_factor", "must be positive"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("decay_epochs", "must be strictly increasing"));
        }
        if self.decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(invalid("decay_epochs", "must be below epochs"));
        }
        if self.sampler == Sampler::RepeatFactor && !(self.rf_threshold > 0.0 && self.rf_threshold <= 1.0) {
            return Err(invalid("rf_threshold", "must lie in (0, 1]"));
        }
        if self.decoupled && (self.pcb_start_epoch == 0 || self.pcb_start_epoch >= self.epochs) {
            return Err(invalid(
                "pcb_start_epoch",
                "decoupled training needs a non-empty first and second phase",
            ));
        }
        Ok(())
    }
}

fn decayed(lr: f64, epoch: usize, config: &TrainConfig) -> f64 {
    let n = config.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    lr * config.decay_factor.powi(n as i32)
}

/// Learning rate of a whole epoch with per-epoch warmup.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let base = if epoch < config.warmup_epochs {
        config.lr * (epoch + 1) as f64 / config.warmup_epochs as f64
    } else {
        config.lr
    };
    decayed(base, epoch, config)
}

/// Learning rate of one iteration; differs from [`lr_at`] only under
/// per-iteration warmup.
pub fn lr_at_iteration(epoch: usize, iteration: usize, iters_per_epoch: usize, config: &TrainConfig) -> f64 {
    if !config.per_iteration_warmup || epoch >= config.warmup_epochs {
        return lr_at(epoch, config);
    }
    let done = (epoch * iters_per_epoch + iteration + 1) as f64;
    let total = (config.warmup_epochs * iters_per_epoch) as f64;
    decayed(config.lr * done / total, epoch, config)
}

/// Per-class repeat factor `max(1, √(t / f_c))`, `f_c` the class's share of
/// the training samples.
pub fn repeat_factors(class_counts: &[usize], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(invalid("rf_threshold", "must lie in (0, 1]"));
    }
    if let Some(c) = class_counts.iter().position(|&n| n == 0) {
        return Err(invalid("class_counts", format!("class {c} has no training samples")));
    }
    let total: usize = class_counts.iter().sum();
    Ok(class_counts
        .iter()
        .map(|&n| (t / (n as f64 / total as f64)).sqrt().max(1.0))
        .collect())
}

/// Sample order of one epoch. Repeat factors are rounded stochastically per
/// sample, then the whole list is shuffled.
pub fn epoch_order(
    indices: &[usize],
    labels: &[usize],
    factors: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut order = match factors {
        None => indices.to_vec(),
        Some(f) => {
            let mut out = Vec::with_capacity(indices.len());
            for &i in indices {
                let r = f[labels[i]];
                let whole = r.floor();
                let extra = usize::from(rng.random::<f64>() < r - whole);
                for _ in 0..whole as usize + extra {
                    out.push(i);
                }
            }
            out
        }
    };
    order.shuffle(rng);
    order
}

/// `v ← μv + g + λθ; θ ← θ − lr·v`
pub fn sgd_step(param: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Momentum SGD over [`HeadParams`] with optional frozen groups.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: HeadParams,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(shape: &HeadParams, momentum: f64, weight_decay: f64) -> Self {
        let mut velocity = shape.clone();
        for (_, t) in velocity.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        Self {
            velocity,
            momentum,
            weight_decay,
        }
    }

    pub fn reset(&mut self) {
        for (_, t) in self.velocity.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Frozen groups are left bit-unchanged, velocity included.
    pub fn step(&mut self, params: &mut HeadParams, grads: &HeadParams, lr: f64, frozen: &[ParamGroup]) -> Result<()> {
        if grads.tensors().iter().any(|(_, t)| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("gradient"));
        }
        let (m, wd) = (self.momentum, self.weight_decay);
        for (((group, p), (_, v)), (_, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.velocity.tensors_mut())
            .zip(grads.tensors())
        {
            if frozen.contains(&group) {
                continue;
            }
            sgd_step(p, v, g, lr, m, wd);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub loss: f64,
    pub val: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: RecurrentHead,
    pub cm: ConfusionMatrix,
    pub log: Vec<EpochLog>,
}

/// Fills in defaults that depend on the data: balanced-softmax priors come
/// from the training counts when not given.
pub fn resolve_loss_config(config: &LossConfig, dataset: &LongTailDataset) -> LossConfig {
    let mut c = config.clone();
    if c.variant == LossVariant::Bsce && c.class_priors.is_none() {
        c.class_priors = Some(dataset.class_counts().iter().map(|&n| n.max(1) as f64).collect());
    }
    c
}

const SAMPLER_STREAM: u64 = 0x5A3D_71C9_0B4E_2F86;

pub fn run_training(
    dataset: &LongTailDataset,
    mut head: RecurrentHead,
    loss_config: &LossConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let c = dataset.num_classes();
    if head.config().num_classes != c {
        return Err(Error::Shape {
            what: "number of classes",
            expected: c,
            got: head.config().num_classes,
        });
    }
    if head.config().input_dim != dataset.feature_dim() {
        return Err(Error::Shape {
            what: "input dimension",
            expected: dataset.feature_dim(),
            got: head.config().input_dim,
        });
    }
    let bg = head.config().has_background;
    let loss = Loss::new(resolve_loss_config(loss_config, dataset), c, bg)?;
    let train_idx = dataset.indices(Partition::Train);
    if train_idx.is_empty() {
        return Err(Error::Empty("training partition".into()));
    }
    let factors = match config.sampler {
        Sampler::Random => None,
        Sampler::RepeatFactor => Some(repeat_factors(dataset.class_counts(), config.rf_threshold)?),
    };
    let f32_mode = config.precision == Precision::F32;
    if f32_mode {
        head.params.round_to_f32();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SAMPLER_STREAM);
    let mut cm = ConfusionMatrix::ema(c, config.gamma)?;
    let mut sgd = Sgd::new(&head.params, config.momentum, config.weight_decay);
    let mut grads = HeadParams::zeros(head.config());
    let mut log = Vec::with_capacity(config.epochs);
    let target_mode = loss.target_mode();
    let meta = RunMeta {
        config_hash: String::new(),
        seed: config.seed,
    };

    for epoch in 0..config.epochs {
        let active = epoch >= config.pcb_start_epoch;
        let alpha = if active { loss_config.alpha } else { 0.0 };
        let frozen: &[ParamGroup] = if config.decoupled && active {
            &[ParamGroup::Backbone]
        } else {
            &[]
        };
        if config.decoupled && epoch == config.pcb_start_epoch {
            sgd.reset();
        }
        let order = epoch_order(&train_idx, dataset.labels(), factors.as_deref(), &mut rng);
        let iters = order.len().div_ceil(config.batch_size);
        let mut loss_sum = 0.0;
        for (it, batch) in order.chunks(config.batch_size).enumerate() {
            let lr = lr_at_iteration(epoch, it, iters, config);
            let targets = cm.targets(target_mode);
            for (_, t) in grads.tensors_mut() {
                t.iter_mut().for_each(|v| *v = 0.0);
            }
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            let mut probs = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let y = dataset.label(i);
                let trace = head.forward(dataset.features(i));
                let out = head.loss_and_grads(&trace, y, &targets, &loss, alpha, scale, &mut grads)?;
                if !out.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        iteration: it,
                        reason: format!("loss {} on sample {i}", out.total),
                    });
                }
                batch_loss += out.total;
                probs.push(fg_renormalize(trace.last_logits(), bg).map_err(|_| Error::Diverged {
                    epoch,
                    iteration: it,
                    reason: format!("non-finite logits on sample {i}"),
                })?);
                labels.push(y);
            }
            sgd.step(&mut head.params, &grads, lr, frozen).map_err(|e| Error::Diverged {
                epoch,
                iteration: it,
                reason: e.to_string(),
            })?;
            if f32_mode {
                head.params.round_to_f32();
            }
            cm.ema_update(&probs, &labels)?;
            loss_sum += batch_loss * scale;
        }
        let val = evaluate(&head, dataset, Partition::Val, meta.clone())?;
        log.push(EpochLog {
            epoch,
            lr: lr_at(epoch, config),
            alpha,
            loss: loss_sum / iters as f64,
            val,
        });
    }
    Ok(TrainOutcome { head, cm, log })
}
