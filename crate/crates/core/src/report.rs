//! Evaluation, post-hoc calibration studies and export.
//!
//! Accuracy is taken from the argmax of the foreground probabilities. Split
//! accuracies average the per-class accuracies of their member classes and
//! are `None` for an empty split.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::{CalibrationTransform, MsVariant};
use crate::confmat::{fg_renormalize, CmMode, ConfusionMatrix};
use crate::datagen::{LongTailDataset, Partition, Split};
use crate::error::{invalid, Error, Result};
use crate::head::RecurrentHead;
use crate::math::{argmax, Matrix};

/// Provenance stamped on every report.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_overall: f64,
    pub acc_frequent: Option<f64>,
    pub acc_common: Option<f64>,
    pub acc_rare: Option<f64>,
    pub pwb: f64,
    pub per_class_acc: Vec<f64>,
    pub cm_snapshot: ConfusionMatrix,
    pub meta: RunMeta,
}

impl MetricsReport {
    /// Builds a report from foreground probability vectors.
    pub fn from_probs(probs: &[Vec<f64>], labels: &[usize], splits: &[Split], meta: RunMeta) -> Result<Self> {
        let c = splits.len();
        let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        Self::from_predictions(&preds, labels, splits, meta, c)
    }

    pub fn from_predictions(
        preds: &[usize],
        labels: &[usize],
        splits: &[Split],
        meta: RunMeta,
        num_classes: usize,
    ) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::Empty("no samples to evaluate".into()));
        }
        let cm = ConfusionMatrix::accumulate_argmax(preds, labels, num_classes)?;
        let per_class_acc: Vec<f64> = (0..num_classes).map(|i| cm.matrix()[(i, i)]).collect();
        let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
        let split_acc = |split: Split| {
            let members: Vec<f64> = (0..num_classes)
                .filter(|&i| splits[i] == split && cm.counts()[i] > 0)
                .map(|i| per_class_acc[i])
                .collect();
            if members.is_empty() {
                None
            } else {
                Some(members.iter().sum::<f64>() / members.len() as f64)
            }
        };
        Ok(Self {
            acc_overall: correct as f64 / preds.len() as f64,
            acc_frequent: split_acc(Split::Frequent),
            acc_common: split_acc(Split::Common),
            acc_rare: split_acc(Split::Rare),
            pwb: cm.pairwise_bias(),
            per_class_acc,
            cm_snapshot: cm,
            meta,
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Foreground probabilities of every step for the samples of a partition.
fn step_probs(head: &RecurrentHead, dataset: &LongTailDataset, idx: &[usize]) -> Result<Vec<Vec<Vec<f64>>>> {
    let bg = head.config().has_background;
    idx.iter()
        .map(|&i| {
            head.forward(dataset.features(i))
                .logits
                .iter()
                .map(|z| fg_renormalize(z, bg))
                .collect()
        })
        .collect()
}

/// Foreground probabilities of the last step.
pub fn last_step_probs(head: &RecurrentHead, dataset: &LongTailDataset, part: Partition) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let idx = dataset.indices(part);
    if idx.is_empty() {
        return Err(Error::Empty(format!("{part:?} partition")));
    }
    let bg = head.config().has_background;
    let probs = idx
        .iter()
        .map(|&i| fg_renormalize(head.forward(dataset.features(i)).last_logits(), bg))
        .collect::<Result<Vec<_>>>()?;
    let labels = idx.iter().map(|&i| dataset.label(i)).collect();
    Ok((probs, labels))
}

fn check_classes(head: &RecurrentHead, dataset: &LongTailDataset) -> Result<()> {
    if head.config().num_classes != dataset.num_classes() {
        return Err(Error::Shape {
            what: "number of classes",
            expected: dataset.num_classes(),
            got: head.config().num_classes,
        });
    }
    Ok(())
}

pub fn evaluate(head: &RecurrentHead, dataset: &LongTailDataset, part: Partition, meta: RunMeta) -> Result<MetricsReport> {
    check_classes(head, dataset)?;
    let (probs, labels) = last_step_probs(head, dataset, part)?;
    MetricsReport::from_probs(&probs, &labels, dataset.splits(), meta)
}

/// One report per recurrent step, evaluated on the validation partition.
pub fn per_step_eval(head: &RecurrentHead, dataset: &LongTailDataset, meta: RunMeta) -> Result<Vec<MetricsReport>> {
    check_classes(head, dataset)?;
    let idx = dataset.indices(Partition::Val);
    if idx.is_empty() {
        return Err(Error::Empty("validation partition".into()));
    }
    let labels: Vec<usize> = idx.iter().map(|&i| dataset.label(i)).collect();
    let all = step_probs(head, dataset, &idx)?;
    (0..head.steps())
        .map(|r| {
            let probs: Vec<Vec<f64>> = all.iter().map(|s| s[r].clone()).collect();
            MetricsReport::from_probs(&probs, &labels, dataset.splits(), meta.clone())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosthocSource {
    /// No calibration.
    None,
    TrainCm,
    ValOracleCm,
    TrainMs,
    ValOracleMs,
}

impl PosthocSource {
    pub const ALL: [PosthocSource; 5] = [
        PosthocSource::None,
        PosthocSource::TrainCm,
        PosthocSource::ValOracleCm,
        PosthocSource::TrainMs,
        PosthocSource::ValOracleMs,
    ];

    fn partition(self) -> Option<Partition> {
        match self {
            PosthocSource::None => None,
            PosthocSource::TrainCm | PosthocSource::TrainMs => Some(Partition::Train),
            PosthocSource::ValOracleCm | PosthocSource::ValOracleMs => Some(Partition::Val),
        }
    }
}

impl std::str::FromStr for PosthocSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => PosthocSource::None,
            "train_cm" => PosthocSource::TrainCm,
            "val_oracle_cm" => PosthocSource::ValOracleCm,
            "train_ms" => PosthocSource::TrainMs,
            "val_oracle_ms" => PosthocSource::ValOracleMs,
            other => return Err(invalid("source", format!("unknown calibration source `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosthocOptions {
    pub cm_mode: CmMode,
    pub ms_variant: MsVariant,
}

impl Default for PosthocOptions {
    fn default() -> Self {
        Self {
            cm_mode: CmMode::Soft,
            ms_variant: MsVariant::Original,
        }
    }
}

/// Builds the transform a source describes from the given head's predictions.
pub fn build_transform(
    head: &RecurrentHead,
    dataset: &LongTailDataset,
    source: PosthocSource,
    options: PosthocOptions,
) -> Result<CalibrationTransform> {
    let Some(part) = source.partition() else {
        return Ok(CalibrationTransform::identity(dataset.num_classes()));
    };
    let (probs, labels) = last_step_probs(head, dataset, part)?;
    let cm = ConfusionMatrix::accumulate(&probs, &labels, options.cm_mode)?;
    Ok(match source {
        PosthocSource::TrainCm | PosthocSource::ValOracleCm => CalibrationTransform::from_confusion(&cm),
        _ => CalibrationTransform::mean_score(&cm, options.ms_variant),
    })
}

/// Calibrates every validation prediction with `transform` and reports.
pub fn evaluate_calibrated(
    head: &RecurrentHead,
    dataset: &LongTailDataset,
    transform: &CalibrationTransform,
    meta: RunMeta,
) -> Result<MetricsReport> {
    check_classes(head, dataset)?;
    let (probs, labels) = last_step_probs(head, dataset, Partition::Val)?;
    let calibrated = probs
        .iter()
        .map(|p| transform.apply(p))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_probs(&calibrated, &labels, dataset.splits(), meta)
}

pub fn posthoc_eval(
    head: &RecurrentHead,
    dataset: &LongTailDataset,
    source: PosthocSource,
    options: PosthocOptions,
    meta: RunMeta,
) -> Result<MetricsReport> {
    let transform = build_transform(head, dataset, source, options)?;
    evaluate_calibrated(head, dataset, &transform, meta)
}

pub const HEATMAP_FLOOR: f64 = 1e-6;
const CELL: usize = 16;

/// Gray level in `[0, 255]` for a matrix entry on a log2 scale.
pub fn heatmap_level(v: f64) -> u8 {
    let lo = HEATMAP_FLOOR.log2();
    let t = (v.max(HEATMAP_FLOOR).log2() - lo) / -lo;
    (t.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// SVG grid of a matrix; lighter cells hold larger entries.
pub fn render_heatmap_svg(m: &Matrix) -> Result<String> {
    if m.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("matrix", "heatmap entries must lie in [0, 1]"));
    }
    let (w, h) = (m.cols() * CELL, m.rows() * CELL);
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .expect("write to string");
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let g = heatmap_level(m[(i, j)]);
            writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="rgb({g},{g},{g})"/>"#,
                j * CELL,
                i * CELL
            )
            .expect("write to string");
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn heatmap_svg(m: &Matrix, path: &Path) -> Result<()> {
    std::fs::write(path, render_heatmap_svg(m)?)?;
    Ok(())
}

/// One line of the per-run summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run: String,
    pub config_hash: String,
    pub seed: u64,
    pub acc: f64,
    pub acc_frequent: Option<f64>,
    pub acc_common: Option<f64>,
    pub acc_rare: Option<f64>,
    pub pwb: f64,
}

impl RunRow {
    pub fn new(run: impl Into<String>, report: &MetricsReport) -> Self {
        Self {
            run: run.into(),
            config_hash: report.meta.config_hash.clone(),
            seed: report.meta.seed,
            acc: report.acc_overall,
            acc_frequent: report.acc_frequent,
            acc_common: report.acc_common,
            acc_rare: report.acc_rare,
            pwb: report.pwb,
        }
    }
}

pub fn write_runs_csv(path: &Path, rows: &[RunRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
