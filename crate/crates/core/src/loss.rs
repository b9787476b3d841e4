//! Classification losses with closed-form gradients w.r.t. the logits.
//!
//! Every regularised variant mixes a base term with a soft-target term as
//! `base + α·(pcb − base)`, which equals `α·pcb + (1−α)·base` but returns the
//! base term bit-for-bit whenever the two coincide or `α = 0`. Soft targets
//! are constants: no gradient flows into the confusion matrix.
//!
//! With a background class the logit vector has `C + 1` entries and the
//! background sits last. Soft-target terms only see the foreground logits.

use serde::{Deserialize, Serialize};

use crate::confmat::{TargetMode, TargetTable};
use crate::error::{invalid, Error, Result};
use crate::math::{log_softmax, log_sum_exp, sigmoid, softplus, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Ce,
    PcbCe,
    BcePcb,
    SeesawPcb,
    Bsce,
    LabelSmooth,
}

impl LossVariant {
    /// Whether the variant has a soft-target term controlled by `alpha`.
    pub fn uses_targets(self) -> bool {
        matches!(
            self,
            LossVariant::PcbCe | LossVariant::BcePcb | LossVariant::SeesawPcb | LossVariant::Bsce
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub smoothing: f64,
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub seesaw_s: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub class_priors: Option<Vec<f64>>,
    #[serde(default = "default_target_mode")]
    pub target_mode: TargetMode,
    /// Use the column-normalised matrix for the BCE-form targets instead of
    /// the raw columns.
    #[serde(default)]
    pub bce_normalized_targets: bool,
}

fn default_target_mode() -> TargetMode {
    TargetMode::PcbColumn
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::Ce,
            alpha: 0.0,
            smoothing: 0.0,
            class_weights: None,
            seesaw_s: None,
            class_priors: None,
            target_mode: TargetMode::PcbColumn,
            bce_normalized_targets: false,
        }
    }
}

impl LossConfig {
    pub fn ce() -> Self {
        Self::default()
    }

    pub fn pcb(alpha: f64) -> Self {
        Self {
            variant: LossVariant::PcbCe,
            alpha,
            ..Self::default()
        }
    }

    /// Target mode the soft-target term reads from the confusion matrix.
    pub fn effective_target_mode(&self) -> TargetMode {
        match self.variant {
            LossVariant::BcePcb if !self.bce_normalized_targets => TargetMode::RawColumn,
            LossVariant::BcePcb => TargetMode::PcbColumn,
            _ => self.target_mode,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(invalid("smoothing", "must lie in [0, 1)"));
        }
        if let Some(w) = &self.class_weights {
            check_len("class_weights", w.len(), num_classes)?;
            if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(invalid("class_weights", "weights must be positive"));
            }
        }
        if let Some(n) = &self.class_priors {
            check_len("class_priors", n.len(), num_classes)?;
            if n.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(invalid("class_priors", "priors must be positive"));
            }
        }
        if let Some(s) = &self.seesaw_s {
            check_len("seesaw_s", s.len(), num_classes)?;
            for (i, row) in s.iter().enumerate() {
                check_len("seesaw_s row", row.len(), num_classes)?;
                if row.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return Err(invalid("seesaw_s", "entries must be positive"));
                }
                if row[i] != 1.0 {
                    return Err(invalid("seesaw_s", "diagonal must be 1"));
                }
            }
        }
        if self.variant == LossVariant::Bsce && self.class_priors.is_none() {
            return Err(invalid("class_priors", "balanced softmax needs class priors"));
        }
        Ok(())
    }
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::Shape { what, expected, got })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub dlogits: Vec<f64>,
}

impl LossValue {
    /// `self + alpha·(other − self)`, applied to value and gradient.
    fn mix_towards(mut self, other: &LossValue, alpha: f64) -> LossValue {
        self.value += alpha * (other.value - self.value);
        for (g, &o) in self.dlogits.iter_mut().zip(&other.dlogits) {
            *g += alpha * (o - *g);
        }
        self
    }
}

fn check_label(y: usize, n: usize) -> Result<()> {
    if y < n {
        Ok(())
    } else {
        Err(Error::LabelOutOfRange {
            label: y,
            num_classes: n,
        })
    }
}

/// `−log softmax(z)_y` over the whole logit vector.
pub fn ce(logits: &[f64], y: usize) -> Result<LossValue> {
    check_label(y, logits.len())?;
    let lp = log_softmax(logits);
    let dlogits = lp
        .iter()
        .enumerate()
        .map(|(i, &l)| l.exp() - if i == y { 1.0 } else { 0.0 })
        .collect();
    Ok(LossValue {
        value: -lp[y],
        dlogits,
    })
}

/// Cross-entropy of `softmax(z)` against an arbitrary non-negative target.
fn soft_ce(logits: &[f64], target: &[f64]) -> LossValue {
    let lp = log_softmax(logits);
    let mass: f64 = target.iter().sum();
    let mut acc = 0.0;
    for (&t, &l) in target.iter().zip(&lp) {
        acc += t * l;
    }
    let dlogits = lp
        .iter()
        .zip(target)
        .map(|(&l, &t)| mass * l.exp() - t)
        .collect();
    LossValue {
        value: -acc,
        dlogits,
    }
}

fn foreground_len(logits: &[f64], has_background: bool) -> usize {
    logits.len() - usize::from(has_background)
}

/// Soft-target cross-entropy on foreground-renormalised probabilities.
pub fn pcb_ce(logits: &[f64], target: &[f64], has_background: bool) -> Result<LossValue> {
    let c = foreground_len(logits, has_background);
    check_len("soft target", target.len(), c)?;
    let fg = soft_ce(&logits[..c], target);
    let mut dlogits = fg.dlogits;
    if has_background {
        dlogits.push(0.0);
    }
    Ok(LossValue {
        value: fg.value,
        dlogits,
    })
}

fn is_background(y: usize, logits: &[f64], has_background: bool) -> bool {
    has_background && y == logits.len() - 1
}

/// `α·L_PCB + (1−α)·L_CE` for foreground samples, plain CE otherwise.
pub fn combined_cls(
    logits: &[f64],
    y: usize,
    targets: &TargetTable,
    alpha: f64,
    has_background: bool,
) -> Result<LossValue> {
    let base = ce(logits, y)?;
    if alpha == 0.0 || is_background(y, logits, has_background) {
        return Ok(base);
    }
    let pcb = pcb_ce(logits, targets.target(y), has_background)?;
    Ok(base.mix_towards(&pcb, alpha))
}

/// Weighted per-class binary cross-entropy on sigmoid activations.
fn weighted_bce(fg: &[f64], target: &[f64], weights: Option<&[f64]>) -> LossValue {
    let mut value = 0.0;
    let mut dlogits = Vec::with_capacity(fg.len());
    for (i, (&z, &t)) in fg.iter().zip(target).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        value += w * (t * softplus(-z) + (1.0 - t) * softplus(z));
        dlogits.push(w * (sigmoid(z) - t));
    }
    LossValue { value, dlogits }
}

/// Binary cross-entropy form: one-hot base term plus a soft-target term
/// whose targets are taken from `targets` (raw columns by default).
pub fn bce_pcb(
    logits: &[f64],
    y: usize,
    targets: &TargetTable,
    weights: Option<&[f64]>,
    alpha: f64,
    has_background: bool,
) -> Result<LossValue> {
    check_label(y, logits.len())?;
    let c = foreground_len(logits, has_background);
    if let Some(w) = weights {
        check_len("class_weights", w.len(), c)?;
    }
    let fg = &logits[..c];
    let mut one_hot = vec![0.0; c];
    let background = is_background(y, logits, has_background);
    if !background {
        one_hot[y] = 1.0;
    }
    let mut out = weighted_bce(fg, &one_hot, weights);
    if alpha != 0.0 && !background {
        let pcb = weighted_bce(fg, targets.target(y), weights);
        out = out.mix_towards(&pcb, alpha);
    }
    if has_background {
        out.dlogits.push(0.0);
    }
    Ok(out)
}

/// Seesaw-style activation: `p̂_i = e^{z_i} / (e^{z_i} + Σ_{j≠i} S_ij e^{z_j})`.
/// Returns `Σ_i t_i·(−log p̂_i)` and its gradient.
fn seesaw_term(fg: &[f64], log_s: &Matrix, target: &[f64]) -> LossValue {
    let c = fg.len();
    let mut value = 0.0;
    let mut dlogits = vec![0.0; c];
    let mut shifted = vec![0.0; c];
    for (i, &t) in target.iter().enumerate() {
        if t == 0.0 {
            continue;
        }
        for k in 0..c {
            shifted[k] = if k == i { fg[k] } else { fg[k] + log_s[(i, k)] };
        }
        let lse = log_sum_exp(&shifted);
        value += t * (lse - fg[i]);
        for k in 0..c {
            dlogits[k] += t * (shifted[k] - lse).exp();
        }
        dlogits[i] -= t;
    }
    LossValue { value, dlogits }
}

pub fn seesaw_pcb(
    logits: &[f64],
    y: usize,
    targets: &TargetTable,
    log_s: &Matrix,
    alpha: f64,
    has_background: bool,
) -> Result<LossValue> {
    check_label(y, logits.len())?;
    if is_background(y, logits, has_background) {
        return ce(logits, y);
    }
    let c = foreground_len(logits, has_background);
    check_len("seesaw_s", log_s.rows(), c)?;
    let fg = &logits[..c];
    if log_s.as_slice().iter().all(|&v| v == 0.0) {
        // Unit S is the softmax form; share its arithmetic so they agree bit for bit.
        let mut out = combined_cls(fg, y, targets, alpha, false)?;
        if has_background {
            out.dlogits.push(0.0);
        }
        return Ok(out);
    }
    let mut one_hot = vec![0.0; c];
    one_hot[y] = 1.0;
    let mut out = seesaw_term(fg, log_s, &one_hot);
    if alpha != 0.0 {
        let pcb = seesaw_term(fg, log_s, targets.target(y));
        out = out.mix_towards(&pcb, alpha);
    }
    if has_background {
        out.dlogits.push(0.0);
    }
    Ok(out)
}

/// Balanced softmax: CE on foreground logits shifted by `log n_i`.
pub fn bsce(logits: &[f64], y: usize, log_priors: &[f64], has_background: bool) -> Result<LossValue> {
    let c = foreground_len(logits, has_background);
    check_len("class_priors", log_priors.len(), c)?;
    let shifted: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| if i < c { z + log_priors[i] } else { z })
        .collect();
    ce(&shifted, y)
}

/// CE against `(1−ε)·onehot(y) + ε/K` over all `K` logits.
pub fn label_smooth(logits: &[f64], y: usize, smoothing: f64) -> Result<LossValue> {
    check_label(y, logits.len())?;
    let k = logits.len() as f64;
    let target: Vec<f64> = (0..logits.len())
        .map(|i| (1.0 - smoothing) * if i == y { 1.0 } else { 0.0 } + smoothing / k)
        .collect();
    Ok(soft_ce(logits, &target))
}

/// A validated loss configuration with its derived constants.
#[derive(Debug, Clone)]
pub struct Loss {
    config: LossConfig,
    num_classes: usize,
    has_background: bool,
    log_priors: Option<Vec<f64>>,
    log_s: Option<Matrix>,
}

impl Loss {
    pub fn new(config: LossConfig, num_classes: usize, has_background: bool) -> Result<Self> {
        config.validate(num_classes)?;
        let log_priors = config
            .class_priors
            .as_ref()
            .map(|n| n.iter().map(|v| v.ln()).collect());
        let log_s = match config.variant {
            LossVariant::SeesawPcb => {
                let c = num_classes;
                let mut m = Matrix::zeros(c, c);
                if let Some(s) = &config.seesaw_s {
                    for i in 0..c {
                        for j in 0..c {
                            m[(i, j)] = s[i][j].ln();
                        }
                    }
                }
                Some(m)
            }
            _ => None,
        };
        Ok(Self {
            config,
            num_classes,
            has_background,
            log_priors,
            log_s,
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn has_background(&self) -> bool {
        self.has_background
    }

    pub fn target_mode(&self) -> TargetMode {
        self.config.effective_target_mode()
    }

    /// Loss of one sample at trade-off `alpha` (already scheduled/gated).
    pub fn eval(&self, logits: &[f64], y: usize, targets: &TargetTable, alpha: f64) -> Result<LossValue> {
        let expected = self.num_classes + usize::from(self.has_background);
        check_len("logits", logits.len(), expected)?;
        let bg = self.has_background;
        match self.config.variant {
            LossVariant::Ce => ce(logits, y),
            LossVariant::PcbCe => combined_cls(logits, y, targets, alpha, bg),
            LossVariant::BcePcb => bce_pcb(
                logits,
                y,
                targets,
                self.config.class_weights.as_deref(),
                alpha,
                bg,
            ),
            LossVariant::SeesawPcb => {
                let log_s = self.log_s.as_ref().expect("seesaw matrix prepared in new");
                seesaw_pcb(logits, y, targets, log_s, alpha, bg)
            }
            LossVariant::Bsce => {
                let log_priors = self.log_priors.as_deref().expect("priors validated");
                let base = bsce(logits, y, log_priors, bg)?;
                if alpha == 0.0 || is_background(y, logits, bg) {
                    return Ok(base);
                }
                let pcb = pcb_ce(logits, targets.target(y), bg)?;
                Ok(base.mix_towards(&pcb, alpha))
            }
            LossVariant::LabelSmooth => label_smooth(logits, y, self.config.smoothing),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confmat::{CmMode, ConfusionMatrix};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn worked_cm() -> ConfusionMatrix {
        ConfusionMatrix::from_matrix(
            Matrix::from_rows(&[vec![0.8, 0.2], vec![0.4, 0.6]]),
            CmMode::Soft,
        )
        .unwrap()
    }

    #[test]
    fn ce_by_hand() {
        let l = ce(&[0.0, 0.0], 0).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-15);
        assert_eq!(l.dlogits, vec![-0.5, 0.5]);
        assert!(ce(&[50.0, 0.0], 0).unwrap().value < 1e-20);
        assert!(ce(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn pcb_by_hand() {
        let t = worked_cm().targets(TargetMode::PcbColumn);
        let l = pcb_ce(&[0.0, 0.0], t.target(0), false).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);
        assert!(pcb_ce(&[0.0, 0.0], &[1.0], false).is_err());
    }

    #[test]
    fn pcb_with_one_hot_target_is_foreground_ce() {
        let z = [0.3, -1.2, 0.8, 2.0];
        let pcb = pcb_ce(&z, &[0.0, 0.0, 1.0], true).unwrap();
        let fg = ce(&z[..3], 2).unwrap();
        assert_eq!(pcb.value, fg.value);
        assert_eq!(&pcb.dlogits[..3], fg.dlogits.as_slice());
        assert_eq!(pcb.dlogits[3], 0.0);
    }

    #[test]
    fn pcb_gradient_vanishes_at_its_own_prediction() {
        let z = [0.4, -0.7, 1.1];
        let p = crate::math::softmax(&z);
        let l = pcb_ce(&z, &p, false).unwrap();
        assert!(l.dlogits.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn combined_mixes_linearly() {
        let t = worked_cm().targets(TargetMode::PcbColumn);
        let z = [0.7, -0.4];
        let base = ce(&z, 1).unwrap();
        let pcb = pcb_ce(&z, t.target(1), false).unwrap();
        let mixed = combined_cls(&z, 1, &t, 0.4, false).unwrap();
        assert!((mixed.value - (0.4 * pcb.value + 0.6 * base.value)).abs() < 1e-14);

        let zero = combined_cls(&z, 1, &t, 0.0, false).unwrap();
        assert_eq!(zero, base);
    }

    #[test]
    fn background_samples_ignore_alpha() {
        let t = worked_cm().targets(TargetMode::PcbColumn);
        let z = [0.1, 0.2, -0.3];
        assert_eq!(combined_cls(&z, 2, &t, 0.9, true).unwrap(), ce(&z, 2).unwrap());
    }

    #[test]
    fn bce_pcb_by_hand() {
        let t = worked_cm().targets(TargetMode::RawColumn);
        let l = bce_pcb(&[0.0, 0.0], 0, &t, None, 1.0, false).unwrap();
        assert!((l.value - 2.0 * 2f64.ln()).abs() < 1e-12);
        // targets [0.8, 0.4] against sigmoid 0.5
        assert!(close(&l.dlogits, &[-0.3, 0.1], 1e-12));
    }

    #[test]
    fn bce_weights_scale_their_class() {
        let t = worked_cm().targets(TargetMode::RawColumn);
        let z = [0.3, -0.2];
        let plain = bce_pcb(&z, 0, &t, None, 0.5, false).unwrap();
        let weighted = bce_pcb(&z, 0, &t, Some(&[2.0, 1.0]), 0.5, false).unwrap();
        assert_eq!(weighted.dlogits[0], 2.0 * plain.dlogits[0]);
        assert_eq!(weighted.dlogits[1], plain.dlogits[1]);
        let one_class = |w: &[f64]| bce_pcb(&z, 0, &t, Some(w), 0.5, false).unwrap().value;
        let class0 = one_class(&[1.0, 1e-300]);
        assert!((weighted.value - (plain.value + class0)).abs() < 1e-14);
    }

    #[test]
    fn seesaw_by_hand() {
        let log_s = Matrix::from_rows(&[vec![0.0, 0.5f64.ln()], vec![0.0, 0.0]]);
        let t = ConfusionMatrix::identity(2).targets(TargetMode::PcbColumn);
        let l = seesaw_pcb(&[0.0, 0.0], 0, &t, &log_s, 0.0, false).unwrap();
        assert!((l.value - 1.5f64.ln()).abs() < 1e-12);
        assert!((l.value - 0.4055).abs() < 5e-5);
    }

    #[test]
    fn seesaw_with_unit_s_is_softmax() {
        let cm = worked_cm();
        let t = cm.targets(TargetMode::PcbColumn);
        let log_s = Matrix::zeros(2, 2);
        for z in [[0.3, -0.9], [2.0, 1.5], [-4.0, 3.0]] {
            for alpha in [0.0, 0.4, 1.0] {
                let a = seesaw_pcb(&z, 1, &t, &log_s, alpha, false).unwrap();
                assert_eq!(a, combined_cls(&z, 1, &t, alpha, false).unwrap());
            }
        }
    }

    #[test]
    fn bsce_by_hand() {
        let log_n = [9f64.ln(), 0.0];
        let l = bsce(&[0.0, 0.0], 1, &log_n, false).unwrap();
        assert!((l.value - (-(0.1f64).ln())).abs() < 1e-12);
        assert!((l.value - std::f64::consts::LN_10).abs() < 1e-12);

        let z = [0.2, -1.0, 0.5];
        assert_eq!(bsce(&z, 2, &[0.0; 3], false).unwrap(), ce(&z, 2).unwrap());
        let uniform = bsce(&z, 2, &[5f64.ln(); 3], false).unwrap();
        let plain = ce(&z, 2).unwrap();
        assert!((uniform.value - plain.value).abs() < 1e-12);
        assert!(close(&uniform.dlogits, &plain.dlogits, 1e-12));
    }

    #[test]
    fn label_smoothing_cases() {
        let z = [0.2, -1.0, 0.5];
        assert_eq!(label_smooth(&z, 1, 0.0).unwrap(), ce(&z, 1).unwrap());
        let l = label_smooth(&[0.0, 0.0], 0, 0.2).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::pcb(1.2).validate(3).is_err());
        let mut c = LossConfig::pcb(0.4);
        c.seesaw_s = Some(vec![vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(c.validate(2).is_err());
        c.seesaw_s = Some(vec![vec![2.0, 2.0], vec![1.0, 1.0]]);
        assert!(c.validate(2).is_err());
        c.seesaw_s = Some(vec![vec![1.0, 2.0], vec![0.5, 1.0]]);
        assert!(c.validate(2).is_ok());
        let bsce = LossConfig {
            variant: LossVariant::Bsce,
            ..LossConfig::default()
        };
        assert!(bsce.validate(2).is_err());
    }

    #[test]
    fn identity_targets_collapse_to_ce_bit_exactly() {
        let t = ConfusionMatrix::ema(4, 0.99).unwrap().targets(TargetMode::PcbColumn);
        let z = [0.3, -0.2, 1.7, -2.2];
        for alpha in [0.1, 0.4, 0.77, 1.0] {
            for y in 0..4 {
                assert_eq!(combined_cls(&z, y, &t, alpha, false).unwrap(), ce(&z, y).unwrap());
            }
        }
    }
}
