//! Central finite differences against the analytic gradients.
//!
//! Errors are normwise, `‖a − b‖ / max(‖a‖, ‖b‖)`, so a case passes or fails as
//! a whole rather than on its worst coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::confmat::{CmMode, ConfusionMatrix, TargetMode, TargetTable};
use crate::head::{HeadConfig, HeadParams, RecurrentHead};
use crate::loss::{Loss, LossConfig, LossValue, LossVariant};
use crate::math::Matrix;
use crate::{Error, Result};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;

pub const LOSS_VARIANTS: [LossVariant; 6] = [
    LossVariant::Ce,
    LossVariant::PcbCe,
    LossVariant::BcePcb,
    LossVariant::SeesawPcb,
    LossVariant::Bsce,
    LossVariant::LabelSmooth,
];

/// Zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn central_difference(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + STEP;
            let up = f(&x);
            x[i] = orig - STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradReport {
    pub cases: usize,
    pub worst: f64,
}

impl GradReport {
    fn record(&mut self, err: f64) {
        self.cases += 1;
        if !(err <= self.worst) {
            self.worst = err;
        }
    }

    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

/// Row-stochastic with a dominant diagonal.
pub fn random_confusion(c: usize, rng: &mut ChaCha8Rng) -> ConfusionMatrix {
    let mut m = Matrix::zeros(c, c);
    for i in 0..c {
        let row: Vec<f64> = (0..c)
            .map(|j| rng.random::<f64>() + if i == j { 2.0 } else { 0.0 })
            .collect();
        let s: f64 = row.iter().sum();
        for j in 0..c {
            m[(i, j)] = row[j] / s;
        }
    }
    ConfusionMatrix::from_matrix(m, CmMode::Soft).expect("rows sum to one")
}

pub fn random_loss_config(variant: LossVariant, c: usize, rng: &mut ChaCha8Rng) -> LossConfig {
    let positive = |rng: &mut ChaCha8Rng| 0.2 + 3.0 * rng.random::<f64>();
    let mut config = LossConfig {
        variant,
        alpha: rng.random(),
        smoothing: 0.5 * rng.random::<f64>(),
        ..LossConfig::default()
    };
    match variant {
        LossVariant::BcePcb => {
            config.class_weights = Some((0..c).map(|_| positive(rng)).collect());
            config.bce_normalized_targets = rng.random();
        }
        LossVariant::SeesawPcb => {
            config.seesaw_s = Some(
                (0..c)
                    .map(|i| (0..c).map(|j| if i == j { 1.0 } else { positive(rng) }).collect())
                    .collect(),
            );
        }
        LossVariant::Bsce => {
            config.class_priors = Some((0..c).map(|_| 1.0 + 500.0 * rng.random::<f64>()).collect());
        }
        _ => {
            if rng.random::<bool>() {
                config.target_mode = TargetMode::RowOls;
            }
        }
    }
    config
}

/// Checks one loss variant on `cases` random logits, class counts 2..=6 with
/// and without a background column. Negative or non-finite outputs are errors.
pub fn check_loss(variant: LossVariant, cases: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for _ in 0..cases {
        let c = rng.random_range(2..7);
        let bg = rng.random::<bool>();
        let k = c + usize::from(bg);
        let config = random_loss_config(variant, c, &mut rng);
        let alpha = config.alpha;
        let loss = Loss::new(config, c, bg)?;
        let targets: TargetTable = random_confusion(c, &mut rng).targets(loss.target_mode());
        let logits: Vec<f64> = (0..k).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
        let y = rng.random_range(0..k);
        let LossValue { value, dlogits } = loss.eval(&logits, y, &targets, alpha)?;
        if !(value >= 0.0) || dlogits.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("loss"));
        }
        let numeric = central_difference(&logits, |z| {
            loss.eval(z, y, &targets, alpha).map(|l| l.value).unwrap_or(f64::NAN)
        });
        report.record(relative_error(&dlogits, &numeric));
    }
    Ok(report)
}

/// Uniform in [-0.5, 0.5), layer-norm gains shifted to around one.
pub fn random_params(config: &HeadConfig, rng: &mut ChaCha8Rng) -> HeadParams {
    let mut p = HeadParams::zeros(config);
    let flat: Vec<f64> = (0..p.len()).map(|_| rng.random::<f64>() - 0.5).collect();
    p.set_flat(&flat);
    for g in &mut p.ln_gain {
        *g += 1.0;
    }
    p
}

/// One sample through a head with a fixed loss and target table.
pub struct HeadCase {
    pub head: RecurrentHead,
    pub loss: Loss,
    pub targets: TargetTable,
    pub x: Vec<f64>,
    pub y: usize,
    pub alpha: f64,
}

impl HeadCase {
    pub fn grads(&self) -> Result<(f64, HeadParams)> {
        let trace = self.head.forward(&self.x);
        let mut grads = HeadParams::zeros(self.head.config());
        let total = self
            .head
            .loss_and_grads(&trace, self.y, &self.targets, &self.loss, self.alpha, 1.0, &mut grads)?
            .total;
        Ok((total, grads))
    }

    fn total_at(&self, params: &HeadParams) -> f64 {
        let Ok(head) = RecurrentHead::with_params(self.head.config().clone(), params.clone()) else {
            return f64::NAN;
        };
        let trace = head.forward(&self.x);
        let mut sink = HeadParams::zeros(head.config());
        head.loss_and_grads(&trace, self.y, &self.targets, &self.loss, self.alpha, 1.0, &mut sink)
            .map(|s| s.total)
            .unwrap_or(f64::NAN)
    }

    /// Relative error of the full parameter gradient.
    pub fn check(&self) -> Result<f64> {
        let (_, grads) = self.grads()?;
        let numeric = central_difference(&self.head.params.flatten(), |flat| {
            let mut probe = self.head.params.clone();
            probe.set_flat(flat);
            self.total_at(&probe)
        });
        Ok(relative_error(&grads.flatten(), &numeric))
    }
}

/// Random small head with non-zero projection weights. Detach is off since it
/// changes gradients without changing values.
pub fn random_head_case(rng: &mut ChaCha8Rng, steps: usize, variant: LossVariant) -> Result<HeadCase> {
    let c = rng.random_range(2..6);
    let bg = rng.random::<bool>();
    let config = HeadConfig {
        input_dim: rng.random_range(2..7),
        backbone_hidden: rng.random_range(3..9),
        feature_dim: rng.random_range(3..10),
        num_classes: c,
        has_background: bg,
        proj_hidden: rng.random_range(3..9),
        steps,
        step_weights: None,
        layer_norm: rng.random(),
        detach: false,
        zero_init_projection: false,
    };
    let params = random_params(&config, rng);
    let head = RecurrentHead::with_params(config.clone(), params)?;
    let loss_config = random_loss_config(variant, c, rng);
    let alpha = loss_config.alpha;
    let loss = Loss::new(loss_config, c, bg)?;
    let targets = random_confusion(c, rng).targets(loss.target_mode());
    let x = (0..config.input_dim).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
    let y = rng.random_range(0..config.logit_dim());
    Ok(HeadCase {
        head,
        loss,
        targets,
        x,
        y,
        alpha,
    })
}

/// `cases_each` random heads per (step count, loss variant) pair.
pub fn check_head(steps: &[usize], cases_each: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for &r in steps {
        for variant in LOSS_VARIANTS {
            for _ in 0..cases_each {
                let case = random_head_case(&mut rng, r, variant)?;
                report.record(case.check()?);
            }
        }
    }
    Ok(report)
}
