//! Synthetic long-tailed datasets and delimited-text ingestion.
//!
//! Synthetic class means sit on the unit circle spanned by the first two
//! feature axes, in class-index order, so neighbouring classes overlap more
//! than distant ones. All other axes carry isotropic noise only.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::splitmix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Frequent,
    Common,
    Rare,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Frequent, Split::Common, Split::Rare];
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Frequent => "frequent",
            Split::Common => "common",
            Split::Rare => "rare",
        })
    }
}

/// Train-count boundaries between the frequency splits.
///
/// A class is rare when its train count is at most `rare_max`, common up to
/// `common_max`, frequent above that.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitThresholds {
    pub rare_max: usize,
    pub common_max: usize,
}

impl Default for SplitThresholds {
    fn default() -> Self {
        Self {
            rare_max: 10,
            common_max: 100,
        }
    }
}

impl SplitThresholds {
    pub fn classify(&self, train_count: usize) -> Split {
        if train_count <= self.rare_max {
            Split::Rare
        } else if train_count <= self.common_max {
            Split::Common
        } else {
            Split::Frequent
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongTailDataset {
    num_classes: usize,
    feature_dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    partition: Vec<Partition>,
    class_counts: Vec<usize>,
    split_of: Vec<Split>,
    thresholds: SplitThresholds,
    seed: u64,
}

/// Parameters of [`synth`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub max_count: usize,
    pub imbalance_ratio: f64,
    pub feature_dim: usize,
    pub sigma: f64,
    #[serde(default = "default_val_per_class")]
    pub val_per_class: usize,
    #[serde(default)]
    pub thresholds: SplitThresholds,
}

fn default_val_per_class() -> usize {
    50
}

/// Train count of class `class` (0-based) under the exponential profile.
pub fn long_tail_count(class: usize, num_classes: usize, max_count: usize, ratio: f64) -> usize {
    let exponent = -(class as f64) / (num_classes - 1) as f64;
    let n = (max_count as f64 * ratio.powf(exponent)).round() as usize;
    n.max(1)
}

pub fn long_tail_counts(num_classes: usize, max_count: usize, ratio: f64) -> Vec<usize> {
    (0..num_classes)
        .map(|c| long_tail_count(c, num_classes, max_count, ratio))
        .collect()
}

/// Generates a deterministic long-tailed Gaussian-cloud dataset.
pub fn synth(config: &SynthConfig, seed: u64) -> Result<LongTailDataset> {
    let c = config.num_classes;
    if c < 2 {
        return Err(invalid("num_classes", format!("need at least 2, got {c}")));
    }
    if config.imbalance_ratio.is_nan() || config.imbalance_ratio < 1.0 {
        return Err(invalid(
            "imbalance_ratio",
            format!("must be >= 1, got {}", config.imbalance_ratio),
        ));
    }
    if config.max_count < 1 {
        return Err(invalid("max_count", "must be >= 1"));
    }
    if !(config.sigma > 0.0) || !config.sigma.is_finite() {
        return Err(invalid("sigma", format!("must be > 0, got {}", config.sigma)));
    }
    if config.feature_dim < 2 {
        return Err(invalid("feature_dim", "class means need at least 2 dimensions"));
    }
    if config.val_per_class < 1 {
        return Err(invalid("val_per_class", "every class needs a validation sample"));
    }

    let d = config.feature_dim;
    let counts = long_tail_counts(c, config.max_count, config.imbalance_ratio);
    let means: Vec<(f64, f64)> = (0..c)
        .map(|k| {
            let theta = 2.0 * PI * k as f64 / c as f64;
            (theta.cos(), theta.sin())
        })
        .collect();

    let total: usize = counts.iter().sum::<usize>() + c * config.val_per_class;
    let mut features = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    let mut partition = Vec::with_capacity(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let draw = |class: usize, features: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
        let (mx, my) = means[class];
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(rng);
            let mean = match j {
                0 => mx,
                1 => my,
                _ => 0.0,
            };
            features.push(mean + config.sigma * noise);
        }
    };

    for (class, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            draw(class, &mut features, &mut rng);
            labels.push(class);
            partition.push(Partition::Train);
        }
    }
    for class in 0..c {
        for _ in 0..config.val_per_class {
            draw(class, &mut features, &mut rng);
            labels.push(class);
            partition.push(Partition::Val);
        }
    }

    Ok(LongTailDataset::assemble(
        c,
        d,
        features,
        labels,
        partition,
        config.thresholds,
        seed,
    ))
}

/// How to read a delimited feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularSchema {
    /// Number of classes; inferred from the largest label when absent.
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// Probability that a row lands in the validation partition.
    #[serde(default)]
    pub val_fraction: f64,
    #[serde(default)]
    pub thresholds: SplitThresholds,
}

impl Default for TabularSchema {
    fn default() -> Self {
        Self {
            num_classes: None,
            val_fraction: 0.0,
            thresholds: SplitThresholds::default(),
        }
    }
}

/// Reads comma-delimited rows with a header and a 1-based `label` column last.
///
/// Rows are assigned to the validation partition by a seeded hash of their
/// position, so the same file and seed always give the same partition.
pub fn ingest_tabular(path: &Path, schema: &TabularSchema, seed: u64) -> Result<LongTailDataset> {
    if !(0.0..1.0).contains(&schema.val_fraction) {
        return Err(invalid("val_fraction", "must lie in [0, 1)"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Parse {
            row: 0,
            reason: "header needs at least one feature column and a label column".into(),
        });
    }
    if headers.get(headers.len() - 1) != Some("label") {
        return Err(Error::Parse {
            row: 0,
            reason: "last header column must be `label`".into(),
        });
    }
    let d = headers.len() - 1;

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            reason: e.to_string(),
        })?;
        if record.len() != d + 1 {
            return Err(Error::Parse {
                row,
                reason: format!("expected {} fields, found {}", d + 1, record.len()),
            });
        }
        for (j, cell) in record.iter().take(d).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                reason: format!("non-numeric value {cell:?} in column `{}`", &headers[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    reason: format!("non-finite value in column `{}`", &headers[j]),
                });
            }
            features.push(v);
        }
        let label: usize = record[d].parse().map_err(|_| Error::Parse {
            row,
            reason: format!("label {:?} is not a positive integer", &record[d]),
        })?;
        if label == 0 {
            return Err(Error::Parse {
                row,
                reason: "labels are 1-based".into(),
            });
        }
        raw_labels.push((row, label));
    }
    if raw_labels.is_empty() {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    }

    let max_label = raw_labels.iter().map(|&(_, l)| l).max().unwrap_or(0);
    let c = schema.num_classes.unwrap_or(max_label);
    if c < 2 {
        return Err(invalid("num_classes", format!("need at least 2, got {c}")));
    }
    let mut labels = Vec::with_capacity(raw_labels.len());
    for (row, label) in raw_labels {
        if label > c {
            return Err(Error::Parse {
                row,
                reason: format!("label {label} outside [1, {c}]"),
            });
        }
        labels.push(label - 1);
    }

    let partition = (0..labels.len())
        .map(|i| {
            let u = (splitmix64(seed ^ splitmix64(i as u64)) >> 11) as f64 / (1u64 << 53) as f64;
            if u < schema.val_fraction {
                Partition::Val
            } else {
                Partition::Train
            }
        })
        .collect();

    Ok(LongTailDataset::assemble(
        c,
        d,
        features,
        labels,
        partition,
        schema.thresholds,
        seed,
    ))
}

impl LongTailDataset {
    fn assemble(
        num_classes: usize,
        feature_dim: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        partition: Vec<Partition>,
        thresholds: SplitThresholds,
        seed: u64,
    ) -> Self {
        let mut class_counts = vec![0; num_classes];
        for (&y, &p) in labels.iter().zip(&partition) {
            if p == Partition::Train {
                class_counts[y] += 1;
            }
        }
        let split_of = class_counts.iter().map(|&n| thresholds.classify(n)).collect();
        Self {
            num_classes,
            feature_dim,
            features,
            labels,
            partition,
            class_counts,
            split_of,
            thresholds,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn partition_of(&self, i: usize) -> Partition {
        self.partition[i]
    }

    /// Train counts per class.
    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn split_of(&self, class: usize) -> Split {
        self.split_of[class]
    }

    pub fn splits(&self) -> &[Split] {
        &self.split_of
    }

    pub fn thresholds(&self) -> SplitThresholds {
        self.thresholds
    }

    pub fn indices(&self, part: Partition) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.partition[i] == part).collect()
    }

    pub fn counts_in(&self, part: Partition) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for i in self.indices(part) {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    pub fn split_members(&self, split: Split) -> Vec<usize> {
        (0..self.num_classes)
            .filter(|&c| self.split_of[c] == split)
            .collect()
    }

    /// Rounds every feature to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.features {
            *v = *v as f32 as f64;
        }
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            seed: self.seed,
            num_train: self.indices(Partition::Train).len(),
            num_val: self.indices(Partition::Val).len(),
            class_counts: self.class_counts.clone(),
            val_counts: self.counts_in(Partition::Val),
            splits: self.split_of.clone(),
            thresholds: self.thresholds,
        }
    }

    /// Writes one partition in the ingestible delimited format.
    pub fn write_tabular(&self, path: &Path, part: Partition) -> Result<()> {
        self.write_tabular_with_comment(path, part, None)
    }

    /// Like [`write_tabular`](Self::write_tabular), with a leading `#` line.
    pub fn write_tabular_with_comment(&self, path: &Path, part: Partition, comment: Option<&str>) -> Result<()> {
        use std::io::Write;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        if let Some(text) = comment {
            writeln!(file, "# {text}")?;
        }
        let mut w = csv::Writer::from_writer(file);
        let mut header: Vec<String> = (1..=self.feature_dim).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in self.indices(part) {
            let mut rec: Vec<String> = self.features(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push((self.labels[i] + 1).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Dataset snapshot: everything except the raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub num_train: usize,
    pub num_val: usize,
    pub class_counts: Vec<usize>,
    pub val_counts: Vec<usize>,
    pub splits: Vec<Split>,
    pub thresholds: SplitThresholds,
}
