//! Confusion-matrix statistics over foreground classes.
//!
//! Row `i` holds what the model predicts for samples whose true class is `i`.
//! Three flavours exist: argmax votes (`Hard`), mean predicted probability
//! vectors (`Soft`) and an online exponential moving average of per-batch
//! soft rows (`Ema`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{argmax, softmax, Matrix};

/// Columns whose mass falls below this are treated as empty.
pub const DEGENERATE_COLUMN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmMode {
    Hard,
    Soft,
    Ema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    m: Matrix,
    mode: CmMode,
    momentum: f64,
    counts: Vec<usize>,
}

/// Softmax over the foreground logits only.
///
/// With `has_background` the last logit is the background class and is
/// dropped before normalising.
pub fn fg_renormalize(logits: &[f64], has_background: bool) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let fg = if has_background {
        &logits[..logits.len() - 1]
    } else {
        logits
    };
    if fg.is_empty() {
        return Err(invalid("logits", "no foreground logits"));
    }
    Ok(softmax(fg))
}

impl ConfusionMatrix {
    /// Fresh online matrix, initialised to the identity.
    pub fn ema(num_classes: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(invalid("momentum", format!("must lie in (0, 1), got {momentum}")));
        }
        Ok(Self {
            m: Matrix::identity(num_classes),
            mode: CmMode::Ema,
            momentum,
            counts: vec![0; num_classes],
        })
    }

    /// Wraps an arbitrary matrix, e.g. a hand-built fixture.
    pub fn from_matrix(m: Matrix, mode: CmMode) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::Shape {
                what: "confusion matrix columns",
                expected: m.rows(),
                got: m.cols(),
            });
        }
        let n = m.rows();
        Ok(Self {
            m,
            mode,
            momentum: 0.0,
            counts: vec![0; n],
        })
    }

    pub fn identity(num_classes: usize) -> Self {
        Self {
            m: Matrix::identity(num_classes),
            mode: CmMode::Soft,
            momentum: 0.0,
            counts: vec![0; num_classes],
        }
    }

    /// Batch statistics from per-sample foreground probabilities.
    ///
    /// `Hard` votes with the argmax of each vector; `Soft` averages the
    /// vectors themselves. Rows without observations stay zero.
    pub fn accumulate(probs: &[Vec<f64>], labels: &[usize], mode: CmMode) -> Result<Self> {
        let c = probs.first().map(Vec::len).ok_or_else(|| Error::Empty("no samples".into()))?;
        match mode {
            CmMode::Hard => {
                let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
                Self::accumulate_argmax(&preds, labels, c)
            }
            CmMode::Soft => {
                if probs.len() != labels.len() {
                    return Err(Error::Shape {
                        what: "labels",
                        expected: probs.len(),
                        got: labels.len(),
                    });
                }
                let mut m = Matrix::zeros(c, c);
                let mut counts = vec![0usize; c];
                for (p, &y) in probs.iter().zip(labels) {
                    if y >= c {
                        return Err(Error::LabelOutOfRange {
                            label: y,
                            num_classes: c,
                        });
                    }
                    if p.len() != c {
                        return Err(Error::Shape {
                            what: "probability vector",
                            expected: c,
                            got: p.len(),
                        });
                    }
                    counts[y] += 1;
                    for (acc, &v) in m.row_mut(y).iter_mut().zip(p) {
                        *acc += v;
                    }
                }
                Ok(Self::finish(m, counts, CmMode::Soft))
            }
            CmMode::Ema => Err(invalid("mode", "EMA matrices are built with ConfusionMatrix::ema")),
        }
    }

    /// Hard matrix from predicted class indices.
    pub fn accumulate_argmax(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::Shape {
                what: "labels",
                expected: preds.len(),
                got: labels.len(),
            });
        }
        let c = num_classes;
        let mut m = Matrix::zeros(c, c);
        let mut counts = vec![0usize; c];
        for (&p, &y) in preds.iter().zip(labels) {
            for v in [p, y] {
                if v >= c {
                    return Err(Error::LabelOutOfRange {
                        label: v,
                        num_classes: c,
                    });
                }
            }
            counts[y] += 1;
            m[(y, p)] += 1.0;
        }
        Ok(Self::finish(m, counts, CmMode::Hard))
    }

    fn finish(mut m: Matrix, counts: Vec<usize>, mode: CmMode) -> Self {
        for (i, &n) in counts.iter().enumerate() {
            if n > 0 {
                let n = n as f64;
                for v in m.row_mut(i) {
                    *v /= n;
                }
            }
        }
        Self {
            m,
            mode,
            momentum: 0.0,
            counts,
        }
    }

    /// One online step: `row_y ← γ·row_y + (1−γ)·mean_y` for every class `y`
    /// present in the batch. Absent classes are left untouched.
    pub fn ema_update(&mut self, batch_probs: &[Vec<f64>], batch_labels: &[usize]) -> Result<()> {
        if self.mode != CmMode::Ema {
            return Err(invalid("mode", "ema_update needs an EMA matrix"));
        }
        if batch_probs.len() != batch_labels.len() {
            return Err(Error::Shape {
                what: "labels",
                expected: batch_probs.len(),
                got: batch_labels.len(),
            });
        }
        let c = self.num_classes();
        let mut sums = Matrix::zeros(c, c);
        let mut seen = vec![0usize; c];
        for (p, &y) in batch_probs.iter().zip(batch_labels) {
            if y >= c {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    num_classes: c,
                });
            }
            if p.len() != c {
                return Err(Error::Shape {
                    what: "probability vector",
                    expected: c,
                    got: p.len(),
                });
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::NotNormalized { class: y, sum: total });
            }
            seen[y] += 1;
            for (acc, &v) in sums.row_mut(y).iter_mut().zip(p) {
                *acc += v;
            }
        }
        let gamma = self.momentum;
        for y in 0..c {
            if seen[y] == 0 {
                continue;
            }
            let n = seen[y] as f64;
            let mean = sums.row(y);
            for (cur, &s) in self.m.row_mut(y).iter_mut().zip(mean) {
                *cur = gamma * *cur + (1.0 - gamma) * (s / n);
            }
            self.counts[y] += seen[y];
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.m.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    pub fn mode(&self) -> CmMode {
        self.mode
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Observations per row (samples folded in so far for EMA matrices).
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn column_normalized(&self) -> Matrix {
        column_normalize(&self.m)
    }

    pub fn pairwise_bias(&self) -> f64 {
        pairwise_bias_norm(&self.m)
    }

    pub fn soft_target(&self, y: usize, mode: TargetMode) -> Result<SoftTarget> {
        self.targets(mode).soft_target(y)
    }

    /// Precomputes the soft target of every class under `mode`.
    pub fn targets(&self, mode: TargetMode) -> TargetTable {
        let c = self.num_classes();
        let rows = match mode {
            TargetMode::PcbColumn => column_normalize(&self.m).transpose(),
            TargetMode::RawColumn => self.m.transpose(),
            TargetMode::RowOls => self.m.clone(),
            TargetMode::OneHot => Matrix::identity(c),
        };
        TargetTable { rows, mode }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.snapshot())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let snap: CmSnapshot = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_snapshot(snap)
    }

    pub fn snapshot(&self) -> CmSnapshot {
        CmSnapshot {
            num_classes: self.num_classes(),
            mode: self.mode,
            momentum: self.momentum,
            counts: self.counts.clone(),
            entries: self.m.as_slice().to_vec(),
        }
    }

    pub fn from_snapshot(snap: CmSnapshot) -> Result<Self> {
        let c = snap.num_classes;
        if snap.entries.len() != c * c {
            return Err(Error::Shape {
                what: "confusion matrix entries",
                expected: c * c,
                got: snap.entries.len(),
            });
        }
        if snap.counts.len() != c {
            return Err(Error::Shape {
                what: "confusion matrix counts",
                expected: c,
                got: snap.counts.len(),
            });
        }
        Ok(Self {
            m: Matrix::from_vec(c, c, snap.entries),
            mode: snap.mode,
            momentum: snap.momentum,
            counts: snap.counts,
        })
    }
}

/// Flat, serialisable view of a [`ConfusionMatrix`] (row-major entries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmSnapshot {
    pub num_classes: usize,
    pub mode: CmMode,
    pub momentum: f64,
    pub counts: Vec<usize>,
    pub entries: Vec<f64>,
}

/// Divides every column by its sum so columns become distributions over the
/// true class. A column with (near) zero mass becomes one-hot on the diagonal.
pub fn column_normalize(m: &Matrix) -> Matrix {
    let n = m.rows();
    let mut out = m.clone();
    for j in 0..m.cols() {
        let sum: f64 = (0..n).map(|i| m[(i, j)]).sum();
        if sum < DEGENERATE_COLUMN_EPS {
            for i in 0..n {
                out[(i, j)] = if i == j { 1.0 } else { 0.0 };
            }
        } else {
            for i in 0..n {
                out[(i, j)] = m[(i, j)] / sum;
            }
        }
    }
    out
}

/// Frobenius norm of `M − Mᵀ`.
pub fn pairwise_bias_norm(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = m[(i, j)] - m[(j, i)];
            acc += d * d;
        }
    }
    acc.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Column `y` of the column-normalised matrix.
    PcbColumn,
    /// Column `y` of the raw matrix (binary cross-entropy form).
    RawColumn,
    /// Row `y` of the raw matrix, as in online label smoothing.
    RowOls,
    OneHot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftTarget {
    pub t: Vec<f64>,
    pub source_class: usize,
    pub mode: TargetMode,
}

/// Soft targets for every class, row `y` being the target of class `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTable {
    rows: Matrix,
    mode: TargetMode,
}

impl TargetTable {
    pub fn target(&self, y: usize) -> &[f64] {
        self.rows.row(y)
    }

    pub fn mode(&self) -> TargetMode {
        self.mode
    }

    pub fn num_classes(&self) -> usize {
        self.rows.rows()
    }

    pub fn soft_target(&self, y: usize) -> Result<SoftTarget> {
        if y >= self.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: self.num_classes(),
            });
        }
        Ok(SoftTarget {
            t: self.target(y).to_vec(),
            source_class: y,
            mode: self.mode,
        })
    }
}
