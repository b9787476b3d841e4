//! Experiment runner: one TOML spec per experiment, flat command verbs.
//!
//! Every file written under the output directory carries the config hash and
//! seed. Outputs contain no timestamps, so equal specs give equal bytes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pcb_core::calib::{CalibrationTransform, MsVariant};
use pcb_core::confmat::CmMode;
use pcb_core::datagen::{ingest_tabular, synth, LongTailDataset, Partition, SplitThresholds, SynthConfig, TabularSchema};
use pcb_core::head::{Checkpoint, HeadConfig, RecurrentHead};
use pcb_core::loss::LossConfig;
use pcb_core::report::{
    build_transform, evaluate, evaluate_calibrated, heatmap_svg, per_step_eval, MetricsReport, PosthocOptions,
    PosthocSource, RunMeta,
};
use pcb_core::trainer::{run_training, EpochLog, Precision, TrainConfig, TrainOutcome};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub val_fraction: f64,
    #[serde(default)]
    pub thresholds: SplitThresholds,
}

/// Exactly one of `synth` and `tabular` must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Data seed; the training seed is used when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub tabular: Option<TabularSpec>,
}

/// Head settings; input width and class count come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    #[serde(default = "d_width")]
    pub feature_dim: usize,
    #[serde(default = "d_width")]
    pub backbone_hidden: usize,
    #[serde(default = "d_width")]
    pub proj_hidden: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default)]
    pub step_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub has_background: bool,
    #[serde(default)]
    pub layer_norm: bool,
    #[serde(default)]
    pub detach: bool,
    #[serde(default = "d_true")]
    pub zero_init_projection: bool,
}

fn d_width() -> usize {
    256
}
fn d_steps() -> usize {
    3
}
fn d_true() -> bool {
    true
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            feature_dim: d_width(),
            backbone_hidden: d_width(),
            proj_hidden: d_width(),
            steps: d_steps(),
            step_weights: None,
            has_background: false,
            layer_norm: false,
            detach: false,
            zero_init_projection: true,
        }
    }
}

impl HeadSpec {
    pub fn to_config(&self, input_dim: usize, num_classes: usize) -> HeadConfig {
        HeadConfig {
            input_dim,
            backbone_hidden: self.backbone_hidden,
            feature_dim: self.feature_dim,
            num_classes,
            has_background: self.has_background,
            proj_hidden: self.proj_hidden,
            steps: self.steps,
            step_weights: self.step_weights.clone(),
            layer_norm: self.layer_norm,
            detach: self.detach,
            zero_init_projection: self.zero_init_projection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "d_out")]
    pub dir: PathBuf,
    #[serde(default = "d_true")]
    pub heatmap: bool,
}

fn d_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: d_out(),
            heatmap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub head: HeadSpec,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputSpec,
}

/// Command-line overrides applied on top of the spec file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub precision: Option<Precision>,
}

/// A parsed spec together with where it came from.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub spec: ExperimentSpec,
    /// The spec as a TOML table after overrides, used by sweeps.
    pub table: toml::Table,
    /// Directory relative paths in the spec resolve against.
    pub base_dir: PathBuf,
}

fn parse_table(table: &toml::Table) -> Result<ExperimentSpec> {
    let text = toml::to_string(table).context("re-serialising spec")?;
    let de = toml::Deserializer::parse(&text).context("parsing spec")?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("invalid spec at `{path}`: {}", e.into_inner().message())
    })
}

fn apply_overrides(table: &mut toml::Table, overrides: &Overrides) -> Result<()> {
    if let Some(seed) = overrides.seed {
        let seed = i64::try_from(seed).context("--seed must fit in a signed 64-bit integer")?;
        set_dotted(table, "train.seed", toml::Value::Integer(seed))?;
    }
    if let Some(p) = overrides.precision {
        let v = match p {
            Precision::F64 => "64",
            Precision::F32 => "32",
        };
        set_dotted(table, "train.precision", toml::Value::String(v.into()))?;
    }
    if let Some(out) = &overrides.out {
        set_dotted(table, "output.dir", toml::Value::String(out.display().to_string()))?;
    }
    Ok(())
}

impl Experiment {
    pub fn from_str(text: &str, base_dir: &Path, overrides: &Overrides) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| anyhow::anyhow!("invalid spec: {e}"))?;
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table, base_dir)
    }

    pub fn from_table(table: toml::Table, base_dir: &Path) -> Result<Self> {
        let spec = parse_table(&table)?;
        let exp = Self {
            spec,
            table,
            base_dir: base_dir.to_path_buf(),
        };
        exp.validate()?;
        Ok(exp)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str(&text, &base, overrides)
    }

    fn validate(&self) -> Result<()> {
        let d = &self.spec.dataset;
        match (&d.synth, &d.tabular) {
            (Some(_), Some(_)) => bail!("invalid spec at `dataset`: give either `synth` or `tabular`, not both"),
            (None, None) => bail!("invalid spec at `dataset`: missing `synth` or `tabular`"),
            (None, Some(t)) => {
                let p = self.resolve(&t.path);
                if !p.exists() {
                    bail!("invalid spec at `dataset.tabular.path`: {} does not exist", p.display());
                }
            }
            _ => {}
        }
        self.spec
            .train
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid spec at `train`: {e}"))?;
        let c = self.num_classes_hint();
        if let Some(c) = c {
            self.spec
                .loss
                .validate(c)
                .map_err(|e| anyhow::anyhow!("invalid spec at `loss`: {e}"))
                .or_else(|e| {
                    // Balanced softmax priors are filled from the data later.
                    if self.spec.loss.variant == pcb_core::loss::LossVariant::Bsce && self.spec.loss.class_priors.is_none() {
                        Ok(())
                    } else {
                        Err(e)
                    }
                })?;
            self.spec
                .head
                .to_config(1, c)
                .validate()
                .map_err(|e| anyhow::anyhow!("invalid spec at `head`: {e}"))?;
        }
        Ok(())
    }

    fn num_classes_hint(&self) -> Option<usize> {
        match (&self.spec.dataset.synth, &self.spec.dataset.tabular) {
            (Some(s), _) => Some(s.num_classes),
            (_, Some(t)) => t.num_classes,
            _ => None,
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.spec.output.dir)
    }

    pub fn seed(&self) -> u64 {
        self.spec.train.seed
    }

    pub fn data_seed(&self) -> u64 {
        self.spec.dataset.seed.unwrap_or(self.spec.train.seed)
    }

    /// First 16 hex digits of the SHA-256 of the spec's canonical JSON,
    /// output settings excluded.
    pub fn config_hash(&self) -> String {
        let s = &self.spec;
        let canonical = serde_json::json!({
            "dataset": s.dataset,
            "head": s.head,
            "loss": s.loss,
            "train": s.train,
        });
        let digest = Sha256::digest(canonical.to_string().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn meta(&self) -> RunMeta {
        RunMeta {
            config_hash: self.config_hash(),
            seed: self.seed(),
        }
    }

    pub fn dataset(&self) -> Result<LongTailDataset> {
        let d = &self.spec.dataset;
        let mut ds = if let Some(s) = &d.synth {
            synth(s, self.data_seed()).context("generating dataset")?
        } else {
            let t = d.tabular.as_ref().expect("validated");
            let schema = TabularSchema {
                num_classes: t.num_classes,
                val_fraction: t.val_fraction,
                thresholds: t.thresholds,
            };
            ingest_tabular(&self.resolve(&t.path), &schema, self.data_seed()).context("reading dataset")?
        };
        if self.spec.train.precision == Precision::F32 {
            ds.round_to_f32();
        }
        Ok(ds)
    }

    pub fn head_config(&self, ds: &LongTailDataset) -> HeadConfig {
        self.spec.head.to_config(ds.feature_dim(), ds.num_classes())
    }

    pub fn train(&self, ds: &LongTailDataset) -> Result<TrainOutcome> {
        let head = RecurrentHead::new(self.head_config(ds), self.seed()).context("building head")?;
        run_training(ds, head, &self.spec.loss, &self.spec.train).context("training")
    }

    fn stamp(&self) -> String {
        format!("config_hash={} seed={}", self.config_hash(), self.seed())
    }

    fn ensure_out(&self) -> Result<PathBuf> {
        let dir = self.out_dir();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_heatmap(exp: &Experiment, m: &pcb_core::math::Matrix, path: &Path) -> Result<()> {
    heatmap_svg(m, path)?;
    let body = fs::read_to_string(path)?;
    fs::write(path, format!("<!-- {} -->\n{body}", exp.stamp()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSnapshot {
    pub config_hash: String,
    pub seed: u64,
    pub data_seed: u64,
    pub summary: pcb_core::datagen::DatasetSummary,
}

/// Writes `dataset.json` plus `train.csv` and `val.csv`.
pub fn cmd_synth(exp: &Experiment) -> Result<PathBuf> {
    let ds = exp.dataset()?;
    let dir = exp.ensure_out()?;
    let snap = DatasetSnapshot {
        config_hash: exp.config_hash(),
        seed: exp.seed(),
        data_seed: exp.data_seed(),
        summary: ds.summary(),
    };
    let path = dir.join("dataset.json");
    write_json(&path, &snap)?;
    let stamp = exp.stamp();
    ds.write_tabular_with_comment(&dir.join("train.csv"), Partition::Train, Some(&stamp))?;
    ds.write_tabular_with_comment(&dir.join("val.csv"), Partition::Val, Some(&stamp))?;
    Ok(path)
}


fn report_cells(r: &MetricsReport) -> Vec<String> {
    vec![
        r.acc_overall.to_string(),
        opt(r.acc_frequent),
        opt(r.acc_common),
        opt(r.acc_rare),
        r.pwb.to_string(),
    ]
}

pub fn log_rows(exp: &Experiment, log: &[EpochLog]) -> Vec<Vec<String>> {
    log.iter()
        .map(|e| {
            let mut row = vec![e.epoch.to_string(), e.lr.to_string(), e.alpha.to_string(), e.loss.to_string()];
            row.extend(report_cells(&e.val));
            row.push(exp.config_hash());
            row.push(exp.seed().to_string());
            row
        })
        .collect()
}

pub const LOG_HEADER: [&str; 11] = [
    "epoch", "lr", "alpha", "loss", "acc", "acc_f", "acc_c", "acc_r", "pwb", "config_hash", "seed",
];

/// Trains and writes `checkpoint.json`, `train_log.csv`, `report.json` and
/// `ema_cm.json`.
pub fn cmd_train(exp: &Experiment) -> Result<MetricsReport> {
    let ds = exp.dataset()?;
    let outcome = exp.train(&ds)?;
    let dir = exp.ensure_out()?;
    let meta = exp.meta();
    let ckpt = Checkpoint {
        config_hash: meta.config_hash.clone(),
        seed: meta.seed,
        head: outcome.head.clone(),
    };
    ckpt.save(&dir.join("checkpoint.json"))?;
    write_csv(&dir.join("train_log.csv"), &LOG_HEADER, &log_rows(exp, &outcome.log))?;
    let report = evaluate(&outcome.head, &ds, Partition::Val, meta.clone())?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(
        &dir.join("ema_cm.json"),
        &serde_json::json!({ "config_hash": meta.config_hash, "seed": meta.seed, "cm": outcome.cm.snapshot() }),
    )?;
    Ok(report)
}

fn load_checkpoint(exp: &Experiment, checkpoint: &Path, ds: &LongTailDataset) -> Result<RecurrentHead> {
    if !checkpoint.exists() {
        bail!("checkpoint {} not found", checkpoint.display());
    }
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let want = exp.head_config(ds);
    if ckpt.head.config().num_classes != want.num_classes || ckpt.head.config().input_dim != want.input_dim {
        bail!("checkpoint {} does not match the spec's dataset", checkpoint.display());
    }
    Ok(ckpt.head)
}

/// Writes `eval_report.json`, `per_step.csv` and `val_cm.svg`.
pub fn cmd_eval(exp: &Experiment, checkpoint: &Path) -> Result<MetricsReport> {
    let ds = exp.dataset()?;
    let head = load_checkpoint(exp, checkpoint, &ds)?;
    let dir = exp.ensure_out()?;
    let meta = exp.meta();
    let report = evaluate(&head, &ds, Partition::Val, meta.clone())?;
    write_json(&dir.join("eval_report.json"), &report)?;
    let rows: Vec<Vec<String>> = per_step_eval(&head, &ds, meta.clone())?
        .iter()
        .enumerate()
        .map(|(r, rep)| {
            let mut row = vec![(r + 1).to_string()];
            row.extend(report_cells(rep));
            row.push(meta.config_hash.clone());
            row.push(meta.seed.to_string());
            row
        })
        .collect();
    write_csv(
        &dir.join("per_step.csv"),
        &["step", "acc", "acc_f", "acc_c", "acc_r", "pwb", "config_hash", "seed"],
        &rows,
    )?;
    if exp.spec.output.heatmap {
        write_heatmap(exp, report.cm_snapshot.matrix(), &dir.join("val_cm.svg"))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRow {
    pub method: &'static str,
    pub source: &'static str,
    pub report: MetricsReport,
}

/// Post-hoc comparison: (none, MS, CM) × (train, oracle).
pub fn calibration_table(
    exp: &Experiment,
    head: &RecurrentHead,
    ds: &LongTailDataset,
    options: PosthocOptions,
) -> Result<Vec<CalibrationRow>> {
    let meta = exp.meta();
    let mut rows = Vec::with_capacity(6);
    let identity = CalibrationTransform::identity(ds.num_classes());
    for (method, train_src, oracle_src) in [
        ("none", None, None),
        ("ms", Some(PosthocSource::TrainMs), Some(PosthocSource::ValOracleMs)),
        ("cm", Some(PosthocSource::TrainCm), Some(PosthocSource::ValOracleCm)),
    ] {
        for (source, src) in [("train", train_src), ("oracle", oracle_src)] {
            let transform = match src {
                Some(s) => build_transform(head, ds, s, options)?,
                None => identity.clone(),
            };
            let report = evaluate_calibrated(head, ds, &transform, meta.clone())?;
            rows.push(CalibrationRow { method, source, report });
        }
    }
    Ok(rows)
}

/// Writes `calibration.csv`.
pub fn cmd_calibrate(exp: &Experiment, checkpoint: &Path, options: PosthocOptions) -> Result<Vec<CalibrationRow>> {
    let ds = exp.dataset()?;
    let head = load_checkpoint(exp, checkpoint, &ds)?;
    let rows = calibration_table(exp, &head, &ds, options)?;
    let dir = exp.ensure_out()?;
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.method.to_string(), r.source.to_string()];
            row.extend(report_cells(&r.report));
            row.push(exp.config_hash());
            row.push(exp.seed().to_string());
            row
        })
        .collect();
    write_csv(
        &dir.join("calibration.csv"),
        &["method", "source", "acc", "acc_f", "acc_c", "acc_r", "pwb", "config_hash", "seed"],
        &cells,
    )?;
    Ok(rows)
}

/// Sets a dotted key such as `loss.alpha` in a TOML table.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().context("empty parameter name")?;
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(*p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{p}` in `{key}` is not a table"))?;
    }
    cur.insert((*last).to_string(), value);
    Ok(())
}

/// Parses a sweep value as a TOML literal, falling back to a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    doc.parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub config_hash: String,
    pub report: MetricsReport,
}

/// Trains one run per value and writes `sweep.csv` with columns value, acc,
/// acc_r, acc_c, acc_f, pwb.
pub fn cmd_sweep(exp: &Experiment, param: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let ds = exp.dataset()?;
    let mut rows = Vec::with_capacity(values.len());
    for raw in values {
        let mut table = exp.table.clone();
        set_dotted(&mut table, param, parse_value(raw))?;
        let run = Experiment::from_table(table, &exp.base_dir).with_context(|| format!("{param} = {raw}"))?;
        if run.spec.dataset != exp.spec.dataset {
            bail!("sweeping dataset parameters is not supported");
        }
        let outcome = run.train(&ds)?;
        let report = evaluate(&outcome.head, &ds, Partition::Val, run.meta())?;
        rows.push(SweepRow {
            value: raw.clone(),
            config_hash: run.config_hash(),
            report,
        });
    }
    let dir = exp.ensure_out()?;
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.value.clone(),
                r.report.acc_overall.to_string(),
                opt(r.report.acc_rare),
                opt(r.report.acc_common),
                opt(r.report.acc_frequent),
                r.report.pwb.to_string(),
                r.config_hash.clone(),
                exp.seed().to_string(),
            ]
        })
        .collect();
    let header = [param, "acc", "acc_r", "acc_c", "acc_f", "pwb", "config_hash", "seed"];
    write_csv(&dir.join("sweep.csv"), &header, &cells)?;
    Ok(rows)
}

/// Renders `summary.md` from `report.json` and any tables present, plus a
/// heatmap of the validation confusion matrix.
pub fn cmd_report(exp: &Experiment) -> Result<PathBuf> {
    let dir = exp.out_dir();
    let report_path = dir.join("report.json");
    if !report_path.exists() {
        bail!("{} not found; run `train` first", report_path.display());
    }
    let report = MetricsReport::load_json(&report_path)?;
    let mut md = String::new();
    md.push_str(&format!("# Run {}\n\n", exp.stamp()));
    md.push_str("| acc | acc_f | acc_c | acc_r | pwb |\n|---|---|---|---|---|\n");
    let cells = report_cells(&report);
    md.push_str(&format!("| {} |\n", cells.join(" | ")));
    for name in ["calibration.csv", "sweep.csv", "per_step.csv"] {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        let mut r = csv::Reader::from_path(&path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        md.push_str(&format!("\n## {name}\n\n| {} |\n", header.join(" | ")));
        md.push_str(&format!("|{}\n", "---|".repeat(header.len())));
        for rec in r.records() {
            let rec = rec?;
            md.push_str(&format!("| {} |\n", rec.iter().collect::<Vec<_>>().join(" | ")));
        }
    }
    let out = dir.join("summary.md");
    fs::write(&out, md)?;
    if exp.spec.output.heatmap {
        write_heatmap(exp, report.cm_snapshot.matrix(), &dir.join("report_cm.svg"))?;
    }
    Ok(out)
}

pub fn parse_ms_variant(s: &str) -> Result<MsVariant> {
    match s {
        "original" => Ok(MsVariant::Original),
        "modified" => Ok(MsVariant::Modified),
        other => bail!("unknown mean-score variant `{other}`"),
    }
}

pub fn posthoc_options(hard: bool, ms_variant: MsVariant) -> PosthocOptions {
    PosthocOptions {
        cm_mode: if hard { CmMode::Hard } else { CmMode::Soft },
        ms_variant,
    }
}
