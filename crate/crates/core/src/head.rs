//! Recurrent classifier head with hand-written backpropagation.
//!
//! ```text
//! X¹      = relu(W₂ relu(W₁ x + b₁) + b₂)
//! zʳ      = W_c Xʳ + b_c
//! Xʳ⁺¹    = Xʳ + P₂ relu(P₁ norm(zʳ) + p₁) + p₂        (r < R)
//! ```
//!
//! `norm` is an optional layer normalisation. The loss is the step-weighted
//! sum of per-step classification losses, with the trade-off ramped linearly
//! over the steps.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::confmat::TargetTable;
use crate::error::{invalid, Error, Result};
use crate::loss::Loss;
use crate::math::softmax;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub backbone_hidden: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub has_background: bool,
    #[serde(default = "default_proj_hidden")]
    pub proj_hidden: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub step_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub layer_norm: bool,
    /// Stop gradients from later steps flowing back into earlier logits.
    #[serde(default)]
    pub detach: bool,
    /// Start the projection output layer at zero.
    #[serde(default = "default_true")]
    pub zero_init_projection: bool,
}

fn default_hidden() -> usize {
    256
}

fn default_proj_hidden() -> usize {
    256
}

fn default_steps() -> usize {
    3
}

fn default_true() -> bool {
    true
}

impl HeadConfig {
    pub fn new(input_dim: usize, feature_dim: usize, num_classes: usize, steps: usize) -> Self {
        Self {
            input_dim,
            backbone_hidden: default_hidden(),
            feature_dim,
            num_classes,
            has_background: false,
            proj_hidden: default_proj_hidden(),
            steps,
            step_weights: None,
            layer_norm: false,
            detach: false,
            zero_init_projection: true,
        }
    }

    /// Width of the logit vector.
    pub fn logit_dim(&self) -> usize {
        self.num_classes + usize::from(self.has_background)
    }

    /// Explicit weights, or the defaults: `1`, `(0.4, 0.6)`, `(0.2, 0.2, 0.6)`;
    /// beyond three steps the last keeps 0.6 and the rest share 0.4.
    pub fn resolved_step_weights(&self) -> Vec<f64> {
        if let Some(w) = &self.step_weights {
            return w.clone();
        }
        default_step_weights(self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("backbone_hidden", self.backbone_hidden),
            ("feature_dim", self.feature_dim),
            ("proj_hidden", self.proj_hidden),
            ("steps", self.steps),
        ] {
            if v == 0 {
                return Err(invalid(name, "must be at least 1"));
            }
        }
        if self.num_classes < 2 {
            return Err(invalid("num_classes", "need at least 2 classes"));
        }
        let w = self.resolved_step_weights();
        if w.len() != self.steps {
            return Err(Error::Shape {
                what: "step_weights",
                expected: self.steps,
                got: w.len(),
            });
        }
        if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(invalid("step_weights", "weights must be positive"));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid("step_weights", format!("must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

pub fn default_step_weights(steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![1.0],
        2 => vec![0.4, 0.6],
        3 => vec![0.2, 0.2, 0.6],
        r => {
            let mut w = vec![0.4 / (r - 1) as f64; r - 1];
            w.push(0.6);
            w
        }
    }
}

/// Trade-off at step `r` (1-based) of `steps`: `(r−1)/(R−1)·α`, or `α` for a
/// single step.
pub fn alpha_schedule(r: usize, steps: usize, alpha: f64) -> f64 {
    assert!(r >= 1 && r <= steps, "step {r} outside 1..={steps}");
    if steps == 1 {
        alpha
    } else {
        (r - 1) as f64 / (steps - 1) as f64 * alpha
    }
}

/// Dense affine map, weights stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    fn random(in_dim: usize, out_dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut l = Self::zeros(in_dim, out_dim);
        for w in &mut l.w {
            *w = normal.sample(rng);
        }
        l
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| {
                let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                row.iter().zip(x).fold(self.b[o], |acc, (w, v)| acc + w * v)
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad.b[o] += d;
            let row = o * self.in_dim;
            for i in 0..self.in_dim {
                grad.w[row + i] += d * x[i];
                dx[i] += d * self.w[row + i];
            }
        }
        dx
    }

    fn backward_params_only(&self, x: &[f64], dy: &[f64], grad: &mut Linear) {
        for (o, &d) in dy.iter().enumerate() {
            grad.b[o] += d;
            let row = o * self.in_dim;
            for i in 0..self.in_dim {
                grad.w[row + i] += d * x[i];
            }
        }
    }
}

/// Which part of the network a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Classifier,
    Projection,
    Norm,
}

/// All trainable tensors. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub backbone1: Linear,
    pub backbone2: Linear,
    pub cls: Linear,
    pub proj1: Linear,
    pub proj2: Linear,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(config: &HeadConfig) -> Self {
        let k = config.logit_dim();
        Self {
            backbone1: Linear::zeros(config.input_dim, config.backbone_hidden),
            backbone2: Linear::zeros(config.backbone_hidden, config.feature_dim),
            cls: Linear::zeros(config.feature_dim, k),
            proj1: Linear::zeros(k, config.proj_hidden),
            proj2: Linear::zeros(config.proj_hidden, config.feature_dim),
            ln_gain: vec![0.0; k],
            ln_bias: vec![0.0; k],
        }
    }

    /// He initialisation for rectified layers, Xavier for the classifier,
    /// zero biases.
    pub fn init(config: &HeadConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.logit_dim();
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let backbone1 = Linear::random(config.input_dim, config.backbone_hidden, he(config.input_dim), &mut rng);
        let backbone2 = Linear::random(
            config.backbone_hidden,
            config.feature_dim,
            he(config.backbone_hidden),
            &mut rng,
        );
        let cls = Linear::random(
            config.feature_dim,
            k,
            (2.0 / (config.feature_dim + k) as f64).sqrt(),
            &mut rng,
        );
        let proj1 = Linear::random(k, config.proj_hidden, he(k), &mut rng);
        let proj2 = if config.zero_init_projection {
            Linear::zeros(config.proj_hidden, config.feature_dim)
        } else {
            Linear::random(
                config.proj_hidden,
                config.feature_dim,
                (2.0 / (config.proj_hidden + config.feature_dim) as f64).sqrt(),
                &mut rng,
            )
        };
        Self {
            backbone1,
            backbone2,
            cls,
            proj1,
            proj2,
            ln_gain: vec![1.0; k],
            ln_bias: vec![0.0; k],
        }
    }

    pub fn tensors(&self) -> Vec<(ParamGroup, &[f64])> {
        vec![
            (ParamGroup::Backbone, &self.backbone1.w),
            (ParamGroup::Backbone, &self.backbone1.b),
            (ParamGroup::Backbone, &self.backbone2.w),
            (ParamGroup::Backbone, &self.backbone2.b),
            (ParamGroup::Classifier, &self.cls.w),
            (ParamGroup::Classifier, &self.cls.b),
            (ParamGroup::Projection, &self.proj1.w),
            (ParamGroup::Projection, &self.proj1.b),
            (ParamGroup::Projection, &self.proj2.w),
            (ParamGroup::Projection, &self.proj2.b),
            (ParamGroup::Norm, &self.ln_gain),
            (ParamGroup::Norm, &self.ln_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Vec<f64>)> {
        vec![
            (ParamGroup::Backbone, &mut self.backbone1.w),
            (ParamGroup::Backbone, &mut self.backbone1.b),
            (ParamGroup::Backbone, &mut self.backbone2.w),
            (ParamGroup::Backbone, &mut self.backbone2.b),
            (ParamGroup::Classifier, &mut self.cls.w),
            (ParamGroup::Classifier, &mut self.cls.b),
            (ParamGroup::Projection, &mut self.proj1.w),
            (ParamGroup::Projection, &mut self.proj1.b),
            (ParamGroup::Projection, &mut self.proj2.w),
            (ParamGroup::Projection, &mut self.proj2.b),
            (ParamGroup::Norm, &mut self.ln_gain),
            (ParamGroup::Norm, &mut self.ln_bias),
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct NormCache {
    xhat: Vec<f64>,
    inv_std: f64,
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    input: Vec<f64>,
    h1: Vec<f64>,
    a1: Vec<f64>,
    h2: Vec<f64>,
    /// `X¹ … Xᴿ`
    pub features: Vec<Vec<f64>>,
    /// `z¹ … zᴿ`
    pub logits: Vec<Vec<f64>>,
    proj_in: Vec<Vec<f64>>,
    norm: Vec<Option<NormCache>>,
    proj_pre: Vec<Vec<f64>>,
    proj_hidden: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn steps(&self) -> usize {
        self.logits.len()
    }

    pub fn last_logits(&self) -> &[f64] {
        self.logits.last().expect("at least one step")
    }
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

fn relu_backward(pre: &[f64], d: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(d)
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect()
}

fn layer_norm(z: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, NormCache) {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let xhat: Vec<f64> = z.iter().map(|v| (v - mean) * inv_std).collect();
    let out = xhat
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(x, (g, b))| g * x + b)
        .collect();
    (out, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    cache: &NormCache,
    gain: &[f64],
    dout: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = dout.len() as f64;
    let mut dxhat = Vec::with_capacity(dout.len());
    for i in 0..dout.len() {
        dgain[i] += dout[i] * cache.xhat[i];
        dbias[i] += dout[i];
        dxhat.push(dout[i] * gain[i]);
    }
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(&cache.xhat).map(|(d, x)| d * x).sum::<f64>() / n;
    dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(d, x)| cache.inv_std * (d - mean_d - x * mean_dx))
        .collect()
}

/// Per-step losses and the step-weighted total for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub per_step: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentHead {
    config: HeadConfig,
    step_weights: Vec<f64>,
    pub params: HeadParams,
}

impl RecurrentHead {
    pub fn new(config: HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = HeadParams::init(&config, seed);
        Self::with_params(config, params)
    }

    pub fn with_params(config: HeadConfig, params: HeadParams) -> Result<Self> {
        config.validate()?;
        let expected = HeadParams::zeros(&config);
        for ((_, a), (_, b)) in expected.tensors().iter().zip(params.tensors()) {
            if a.len() != b.len() {
                return Err(Error::Shape {
                    what: "head parameters",
                    expected: a.len(),
                    got: b.len(),
                });
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("head parameters"));
        }
        let step_weights = config.resolved_step_weights();
        Ok(Self {
            config,
            step_weights,
            params,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn step_weights(&self) -> &[f64] {
        &self.step_weights
    }

    pub fn forward(&self, x: &[f64]) -> ForwardTrace {
        assert_eq!(x.len(), self.config.input_dim, "input dimension");
        let p = &self.params;
        let h1 = p.backbone1.forward(x);
        let a1 = relu(&h1);
        let h2 = p.backbone2.forward(&a1);
        let mut feature = relu(&h2);
        let steps = self.config.steps;
        let mut trace = ForwardTrace {
            input: x.to_vec(),
            h1,
            a1,
            h2,
            features: Vec::with_capacity(steps),
            logits: Vec::with_capacity(steps),
            proj_in: Vec::with_capacity(steps - 1),
            norm: Vec::with_capacity(steps - 1),
            proj_pre: Vec::with_capacity(steps - 1),
            proj_hidden: Vec::with_capacity(steps - 1),
        };
        for r in 0..steps {
            let z = p.cls.forward(&feature);
            if r + 1 < steps {
                let (u, cache) = if self.config.layer_norm {
                    let (u, c) = layer_norm(&z, &p.ln_gain, &p.ln_bias);
                    (u, Some(c))
                } else {
                    (z.clone(), None)
                };
                let pre = p.proj1.forward(&u);
                let hidden = relu(&pre);
                let f = p.proj2.forward(&hidden);
                let next: Vec<f64> = feature.iter().zip(&f).map(|(a, b)| a + b).collect();
                trace.proj_in.push(u);
                trace.norm.push(cache);
                trace.proj_pre.push(pre);
                trace.proj_hidden.push(hidden);
                trace.features.push(std::mem::replace(&mut feature, next));
            } else {
                trace.features.push(std::mem::take(&mut feature));
            }
            trace.logits.push(z);
        }
        trace
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂zʳ` for every step.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[Vec<f64>], grads: &mut HeadParams) {
        let p = &self.params;
        let steps = trace.steps();
        assert_eq!(dlogits.len(), steps, "one logit gradient per step");
        let mut carry = vec![0.0; self.config.feature_dim];
        for r in (0..steps).rev() {
            let mut dz = dlogits[r].clone();
            if r + 1 < steps {
                let dhidden = p.proj2.backward(&trace.proj_hidden[r], &carry, &mut grads.proj2);
                let dpre = relu_backward(&trace.proj_pre[r], &dhidden);
                let du = p.proj1.backward(&trace.proj_in[r], &dpre, &mut grads.proj1);
                let dz_extra = match &trace.norm[r] {
                    Some(cache) => layer_norm_backward(cache, &p.ln_gain, &du, &mut grads.ln_gain, &mut grads.ln_bias),
                    None => du,
                };
                if !self.config.detach {
                    for (a, b) in dz.iter_mut().zip(&dz_extra) {
                        *a += b;
                    }
                }
            }
            let dx = p.cls.backward(&trace.features[r], &dz, &mut grads.cls);
            for (c, d) in carry.iter_mut().zip(&dx) {
                *c += d;
            }
        }
        let dh2 = relu_backward(&trace.h2, &carry);
        let da1 = p.backbone2.backward(&trace.a1, &dh2, &mut grads.backbone2);
        let dh1 = relu_backward(&trace.h1, &da1);
        p.backbone1.backward_params_only(&trace.input, &dh1, &mut grads.backbone1);
    }

    /// Step-weighted loss of one sample; gradients scaled by `scale` are
    /// accumulated into `grads`. `alpha` is the already-gated trade-off.
    pub fn loss_and_grads(
        &self,
        trace: &ForwardTrace,
        y: usize,
        targets: &TargetTable,
        loss: &Loss,
        alpha: f64,
        scale: f64,
        grads: &mut HeadParams,
    ) -> Result<StepLosses> {
        let steps = trace.steps();
        let mut per_step = Vec::with_capacity(steps);
        let mut dlogits = Vec::with_capacity(steps);
        let mut total = 0.0;
        for r in 0..steps {
            let alpha_r = alpha_schedule(r + 1, steps, alpha);
            let lv = loss.eval(&trace.logits[r], y, targets, alpha_r)?;
            let w = self.step_weights[r];
            total += w * lv.value;
            per_step.push(lv.value);
            let k = w * scale;
            dlogits.push(lv.dlogits.iter().map(|g| k * g).collect());
        }
        self.backward(trace, &dlogits, grads);
        Ok(StepLosses { total, per_step })
    }

    /// Softmax of the last step's logits.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        softmax(self.forward(x).last_logits())
    }

    /// Softmax of every step's logits.
    pub fn predict_steps(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.forward(x).logits.iter().map(|z| softmax(z)).collect()
    }
}

/// Serialised head with the hash and seed of the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    pub head: RecurrentHead,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(file)?;
        let head = RecurrentHead::with_params(ckpt.head.config.clone(), ckpt.head.params.clone())?;
        Ok(Checkpoint { head, ..ckpt })
    }
}
