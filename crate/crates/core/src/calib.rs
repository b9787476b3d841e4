//! Post-hoc calibration of foreground probabilities.
//!
//! Two families: mixing predictions through the column-normalised confusion
//! matrix (`p̃ = M̂ p̂`), and dividing by per-class mean scores.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::confmat::{column_normalize, ConfusionMatrix};
use crate::error::{invalid, Error, Result};
use crate::math::Matrix;

pub const DEFAULT_SUPPRESS_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibKind {
    Cm,
    MsOriginal,
    MsModified,
}

impl std::fmt::Display for CalibKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CalibKind::Cm => "cm",
            CalibKind::MsOriginal => "ms_original",
            CalibKind::MsModified => "ms_modified",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsVariant {
    /// `s_i = M_ii`
    Original,
    /// `s_i = Σ_k M_ki`
    Modified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTransform {
    kind: CalibKind,
    m_hat: Option<Matrix>,
    s: Option<Vec<f64>>,
    suppress_threshold: f64,
    has_background: bool,
}

/// Per-class mean classification scores.
pub fn mean_scores(cm: &ConfusionMatrix, variant: MsVariant) -> Vec<f64> {
    let m = cm.matrix();
    let c = m.rows();
    match variant {
        MsVariant::Original => (0..c).map(|i| m[(i, i)]).collect(),
        MsVariant::Modified => (0..c).map(|j| (0..c).map(|k| m[(k, j)]).sum()).collect(),
    }
}

impl CalibrationTransform {
    pub fn identity(num_classes: usize) -> Self {
        Self::from_column_stochastic(Matrix::identity(num_classes))
    }

    /// Confusion-matrix calibration: column-normalises `cm`.
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        Self::from_column_stochastic(column_normalize(cm.matrix()))
    }

    pub fn from_column_stochastic(m_hat: Matrix) -> Self {
        Self {
            kind: CalibKind::Cm,
            m_hat: Some(m_hat),
            s: None,
            suppress_threshold: DEFAULT_SUPPRESS_THRESHOLD,
            has_background: false,
        }
    }

    pub fn mean_score(cm: &ConfusionMatrix, variant: MsVariant) -> Self {
        Self::from_scores(mean_scores(cm, variant), variant)
    }

    pub fn from_scores(s: Vec<f64>, variant: MsVariant) -> Self {
        Self {
            kind: match variant {
                MsVariant::Original => CalibKind::MsOriginal,
                MsVariant::Modified => CalibKind::MsModified,
            },
            m_hat: None,
            s: Some(s),
            suppress_threshold: DEFAULT_SUPPRESS_THRESHOLD,
            has_background: false,
        }
    }

    pub fn with_background(mut self, has_background: bool) -> Self {
        self.has_background = has_background;
        self
    }

    pub fn with_suppress_threshold(mut self, eps: f64) -> Self {
        self.suppress_threshold = eps;
        self
    }

    pub fn kind(&self) -> CalibKind {
        self.kind
    }

    pub fn m_hat(&self) -> Option<&Matrix> {
        self.m_hat.as_ref()
    }

    pub fn scores(&self) -> Option<&[f64]> {
        self.s.as_deref()
    }

    pub fn has_background(&self) -> bool {
        self.has_background
    }

    pub fn num_classes(&self) -> usize {
        match (&self.m_hat, &self.s) {
            (Some(m), _) => m.rows(),
            (None, Some(s)) => s.len(),
            (None, None) => 0,
        }
    }

    /// Dispatches on the transform kind.
    pub fn apply(&self, p: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            CalibKind::Cm => cm_calibrate(p, self),
            CalibKind::MsOriginal | CalibKind::MsModified => ms_calibrate(p, self),
        }
    }

    fn split<'a>(&self, p: &'a [f64]) -> Result<(&'a [f64], Option<f64>)> {
        let c = self.num_classes();
        let expected = c + usize::from(self.has_background);
        if p.len() != expected {
            return Err(Error::Shape {
                what: "probability vector",
                expected,
                got: p.len(),
            });
        }
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("p", "probabilities must be finite and non-negative"));
        }
        Ok(if self.has_background {
            (&p[..c], Some(p[c]))
        } else {
            (p, None)
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Keeps the background probability, renormalises the foreground to one and
/// rescales it by `1 − p_bg`.
fn attach_background(mut fg: Vec<f64>, background: Option<f64>) -> Vec<f64> {
    if let Some(bg) = background {
        let total: f64 = fg.iter().sum();
        let delta = 1.0 - bg;
        for v in &mut fg {
            *v = *v / total * delta;
        }
        fg.push(bg);
    }
    fg
}

/// `p̃_i = Σ_j M̂_ij p̂_j` over foreground classes.
pub fn cm_calibrate(p: &[f64], transform: &CalibrationTransform) -> Result<Vec<f64>> {
    let m_hat = match (&transform.kind, &transform.m_hat) {
        (CalibKind::Cm, Some(m)) => m,
        _ => {
            return Err(Error::KindMismatch {
                wanted: "cm_calibrate",
                found: transform.kind.to_string(),
            })
        }
    };
    let (fg, bg) = transform.split(p)?;
    Ok(attach_background(m_hat.mul_vec(fg), bg))
}

/// `p̃_i ∝ p̂_i / s_i` over foreground classes.
///
/// Classes whose score falls below the suppression threshold are never
/// predicted under the modified variant. A zero score is suppressed under
/// either variant since the ratio is undefined.
pub fn ms_calibrate(p: &[f64], transform: &CalibrationTransform) -> Result<Vec<f64>> {
    let s = match (&transform.kind, &transform.s) {
        (CalibKind::MsOriginal | CalibKind::MsModified, Some(s)) => s,
        _ => {
            return Err(Error::KindMismatch {
                wanted: "ms_calibrate",
                found: transform.kind.to_string(),
            })
        }
    };
    let (fg, bg) = transform.split(p)?;
    let threshold = match transform.kind {
        CalibKind::MsModified => transform.suppress_threshold,
        _ => 0.0,
    };
    let scaled: Vec<f64> = fg
        .iter()
        .zip(s)
        .map(|(&pi, &si)| {
            if si <= 0.0 || si < threshold {
                0.0
            } else {
                pi / si
            }
        })
        .collect();
    let total: f64 = scaled.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllSuppressed);
    }
    let fg: Vec<f64> = scaled.into_iter().map(|v| v / total).collect();
    Ok(attach_background(fg, bg))
}
