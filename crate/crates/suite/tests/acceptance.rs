//! Acceptance suite on the desk fixture.
//!
//! Runs every criterion in order, prints one PASS/FAIL line each and fails at
//! the end if any criterion failed. Tolerances are the constants below; the
//! CE baseline numbers are pinned in `fixtures/desk_baseline.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use pcb_cli::{calibration_table, cmd_calibrate, cmd_eval, cmd_train, set_dotted, Experiment, Overrides};
use pcb_core::calib::{cm_calibrate, mean_scores, ms_calibrate, CalibrationTransform, MsVariant};
use pcb_core::confmat::{fg_renormalize, pairwise_bias_norm, CmMode, ConfusionMatrix, TargetMode};
use pcb_core::datagen::{synth, Partition, SynthConfig};
use pcb_core::gradcheck::{check_head, check_loss, LOSS_VARIANTS};
use pcb_core::head::{HeadConfig, HeadParams, RecurrentHead};
use pcb_core::loss::{bsce, ce, combined_cls, label_smooth, pcb_ce, seesaw_pcb, Loss, LossConfig, LossVariant};
use pcb_core::math::{Matrix, softmax};
use pcb_core::report::{evaluate, per_step_eval, PosthocOptions, RunMeta};
use pcb_core::trainer::{run_training, TrainConfig};
use serde::Deserialize;

const ORACLE_TOL: f64 = 1e-12;
const GRAD_CASES: usize = 100;
/// C4: overall accuracy may drop by at most this much under oracle CM.
const CM_ACC_DROP: f64 = 0.02;
/// C6: PCB must cut validation PwB by at least this fraction.
const PWB_REDUCTION: f64 = 0.20;
/// C6: frequent-split accuracy stays within this of the baseline.
const FREQUENT_BAND: f64 = 0.02;
/// C8: one rare validation sample out of 50.
const DECOUPLED_MARGIN: f64 = 0.02;
/// The CE baseline must reproduce its pinned numbers to this precision.
const BASELINE_TOL: f64 = 1e-9;
const RUN_BUDGET: Duration = Duration::from_secs(120);
const SUITE_BUDGET: Duration = Duration::from_secs(15 * 60);

#[derive(Debug, Deserialize)]
struct Baseline {
    acc: f64,
    acc_f: f64,
    acc_c: f64,
    acc_r: f64,
    pwb: f64,
}

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn desk(out: &Path, edits: &[(&str, &str)]) -> Experiment {
    let text = fs::read_to_string(fixture_dir().join("desk.toml")).unwrap();
    let overrides = Overrides {
        out: Some(out.to_path_buf()),
        ..Overrides::default()
    };
    let base = Experiment::from_str(&text, &fixture_dir(), &overrides).unwrap();
    let mut table = base.table.clone();
    for (key, value) in edits {
        set_dotted(&mut table, key, pcb_cli::parse_value(value)).unwrap();
    }
    Experiment::from_table(table, &fixture_dir()).unwrap()
}

const PCB: [(&str, &str); 2] = [("loss.variant", "\"pcb_ce\""), ("loss.alpha", "0.4")];

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= ORACLE_TOL)
}

fn scalar(a: f64, b: f64) -> bool {
    (a - b).abs() <= ORACLE_TOL
}

/// Hand-computed values for renormalisation, confusion statistics, targets,
/// calibration and the losses.
fn criterion_1() -> Result<String, String> {
    let worked = Matrix::from_rows(&[vec![0.8, 0.2], vec![0.4, 0.6]]);
    let cm = ConfusionMatrix::from_matrix(worked.clone(), CmMode::Soft).map_err(|e| e.to_string())?;
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let p = fg_renormalize(&[2f64.ln(), 1f64.ln(), 7.0], true).unwrap();
    checks.push(("renormalise", close(&p, &[2.0 / 3.0, 1.0 / 3.0])));

    let soft = ConfusionMatrix::accumulate(&[vec![0.2, 0.8], vec![0.4, 0.6]], &[1, 1], CmMode::Soft).unwrap();
    checks.push(("soft cm", close(soft.matrix().row(1), &[0.3, 0.7])));
    let mut ema = ConfusionMatrix::ema(3, 0.99).unwrap();
    ema.ema_update(&[vec![0.6, 0.3, 0.1]], &[0]).unwrap();
    checks.push(("ema", close(ema.matrix().row(0), &[0.996, 0.003, 0.001])));

    let m_hat = cm.column_normalized();
    checks.push(("column normalise", close(m_hat.as_slice(), &[0.8 / 1.2, 0.2 / 0.8, 0.4 / 1.2, 0.6 / 0.8])));
    let t = cm.targets(TargetMode::PcbColumn);
    checks.push(("soft target", close(t.target(0), &[2.0 / 3.0, 1.0 / 3.0])));

    let p = cm_calibrate(&[0.5, 0.5], &CalibrationTransform::from_confusion(&cm)).unwrap();
    checks.push(("cm calibration", close(&p, &[11.0 / 24.0, 13.0 / 24.0])));
    checks.push(("mean scores", mean_scores(&cm, MsVariant::Original) == vec![0.8, 0.6]));
    let p = ms_calibrate(&[0.5, 0.5], &CalibrationTransform::from_scores(vec![0.8, 0.6], MsVariant::Original)).unwrap();
    checks.push(("ms calibration", close(&p, &[3.0 / 7.0, 4.0 / 7.0])));

    let pwb = pairwise_bias_norm(&Matrix::from_rows(&[vec![0.9, 0.1], vec![0.3, 0.7]]));
    checks.push(("pwb", scalar(pwb, 0.08f64.sqrt())));

    let l = ce(&[0.0, 0.0], 0).unwrap();
    checks.push(("ce", scalar(l.value, 2f64.ln()) && close(&l.dlogits, &[-0.5, 0.5])));
    let l = pcb_ce(&[0.0, 0.0], t.target(0), false).unwrap();
    checks.push(("pcb", scalar(l.value, 2f64.ln())));
    let z = [0.7, -0.4];
    let mixed = combined_cls(&z, 1, &t, 0.4, false).unwrap();
    let want = 0.6 * ce(&z, 1).unwrap().value + 0.4 * pcb_ce(&z, t.target(1), false).unwrap().value;
    checks.push(("combined", scalar(mixed.value, want)));
    let log_s = Matrix::from_rows(&[vec![0.0, 0.5f64.ln()], vec![0.0, 0.0]]);
    let id = ConfusionMatrix::identity(2).targets(TargetMode::PcbColumn);
    let l = seesaw_pcb(&[0.0, 0.0], 0, &id, &log_s, 0.0, false).unwrap();
    checks.push(("seesaw", scalar(l.value, 1.5f64.ln())));
    let l = bsce(&[0.0, 0.0], 1, &[9f64.ln(), 0.0], false).unwrap();
    checks.push(("balanced softmax", scalar(l.value, -(0.1f64).ln())));
    let l = label_smooth(&[0.0, 0.0], 0, 0.2).unwrap();
    checks.push(("label smoothing", scalar(l.value, 2f64.ln())));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        Ok(format!("{} worked examples within {ORACLE_TOL:e}", checks.len()))
    } else {
        Err(format!("mismatch: {}", failed.join(", ")))
    }
}

fn criterion_2() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for (i, variant) in LOSS_VARIANTS.into_iter().enumerate() {
        let r = check_loss(variant, GRAD_CASES, 100 + i as u64).map_err(|e| e.to_string())?;
        if !r.passed() {
            return Err(format!("{variant:?}: rel err {:.2e}", r.worst));
        }
        worst = worst.max(r.worst);
    }
    let head = check_head(&[1, 2, 3], 6, 200).map_err(|e| e.to_string())?;
    if head.cases < GRAD_CASES || !head.passed() {
        return Err(format!("head: {} cases, rel err {:.2e}", head.cases, head.worst));
    }
    Ok(format!(
        "losses {}x{GRAD_CASES} worst {worst:.1e}; head {} cases worst {:.1e}",
        LOSS_VARIANTS.len(),
        head.cases,
        head.worst
    ))
}

fn small_synth() -> pcb_core::datagen::LongTailDataset {
    let config = SynthConfig {
        num_classes: 6,
        max_count: 60,
        imbalance_ratio: 10.0,
        feature_dim: 5,
        sigma: 0.1,
        val_per_class: 5,
        thresholds: Default::default(),
    };
    synth(&config, 4).unwrap()
}

fn criterion_3() -> Result<String, String> {
    let mut failed = Vec::new();

    // Training with alpha = 0 reproduces CE training bit for bit.
    let ds = small_synth();
    let head = RecurrentHead::new(HeadConfig { backbone_hidden: 8, proj_hidden: 8, ..HeadConfig::new(5, 8, 6, 3) }, 3).unwrap();
    let tc = TrainConfig { epochs: 4, decay_epochs: vec![3], pcb_start_epoch: 0, seed: 3, ..TrainConfig::default() };
    let a = run_training(&ds, head.clone(), &LossConfig::ce(), &tc).map_err(|e| e.to_string())?;
    let b = run_training(&ds, head, &LossConfig::pcb(0.0), &tc).map_err(|e| e.to_string())?;
    if a.head.params != b.head.params {
        failed.push("alpha=0 training");
    }

    let z = [0.3, -0.2, 1.7, -2.2];
    let id = ConfusionMatrix::identity(4).targets(TargetMode::PcbColumn);
    if (0..4).any(|y| combined_cls(&z, y, &id, 0.4, false).unwrap() != ce(&z, y).unwrap()) {
        failed.push("identity targets");
    }

    // One step equals the plain MLP; zeroed projections make every step equal.
    let config = HeadConfig { backbone_hidden: 7, proj_hidden: 5, ..HeadConfig::new(4, 6, 3, 1) };
    let one = RecurrentHead::new(config.clone(), 9).unwrap();
    let p: &HeadParams = &one.params;
    let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<f64>>();
    let x = [0.2, -0.5, 0.9, 0.1];
    let mlp = p.cls.forward(&relu(p.backbone2.forward(&relu(p.backbone1.forward(&x)))));
    if one.forward(&x).logits != vec![mlp.clone()] {
        failed.push("R=1");
    }
    let three = RecurrentHead::new(HeadConfig { steps: 3, ..config }, 9).unwrap();
    if three.forward(&x).logits.iter().any(|s| s != &mlp) {
        failed.push("zeroed projection");
    }

    let log_s = Matrix::zeros(4, 4);
    let t = ConfusionMatrix::from_matrix(
        Matrix::from_rows(&[
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.2, 0.6, 0.1, 0.1],
            vec![0.1, 0.1, 0.5, 0.3],
            vec![0.0, 0.2, 0.2, 0.6],
        ]),
        CmMode::Soft,
    )
    .unwrap()
    .targets(TargetMode::PcbColumn);
    if (0..4).any(|y| {
        let s = seesaw_pcb(&z, y, &t, &log_s, 0.4, false).unwrap();
        let c = combined_cls(&z, y, &t, 0.4, false).unwrap();
        s != c
    }) {
        failed.push("S=1 seesaw");
    }
    if (0..4).any(|y| label_smooth(&z, y, 0.0).unwrap() != ce(&z, y).unwrap()) {
        failed.push("smoothing=0");
    }
    let smooth = Loss::new(LossConfig { variant: LossVariant::LabelSmooth, ..LossConfig::ce() }, 4, false).unwrap();
    if smooth.eval(&z, 2, &id, 0.0).unwrap() != ce(&z, 2).unwrap() {
        failed.push("smoothing=0 via config");
    }

    if failed.is_empty() {
        Ok("alpha=0, identity targets, R=1, S=1, smoothing=0 all bit-exact".into())
    } else {
        Err(format!("differ: {}", failed.join(", ")))
    }
}

struct Run {
    exp: Experiment,
    report: pcb_core::report::MetricsReport,
    elapsed: Duration,
}

fn train(out: &Path, edits: &[(&str, &str)]) -> Run {
    let exp = desk(out, edits);
    let t = Instant::now();
    let report = cmd_train(&exp).unwrap();
    Run { exp, report, elapsed: t.elapsed() }
}

fn rare(r: &pcb_core::report::MetricsReport) -> f64 {
    r.acc_rare.expect("fixture has a rare class")
}

fn verdict(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn record(outcomes: &mut Vec<Outcome>, id: usize, name: &'static str, result: Result<String, String>) {
    let (pass, detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!("criterion {id:>2} {}: {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    outcomes.push(Outcome { id, name, pass, detail });
}

#[test]
fn acceptance_suite() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut outcomes = Vec::new();

    record(&mut outcomes, 1, "worked examples", criterion_1());
    record(&mut outcomes, 2, "gradients", criterion_2());
    record(&mut outcomes, 3, "degenerations", criterion_3());

    let ce_run = train(&tmp.path().join("ce"), &[]);
    let pcb_run = train(&tmp.path().join("pcb"), &PCB);
    let dec_ce = train(&tmp.path().join("dec_ce"), &[("train.decoupled", "true")]);
    let dec_pcb = train(&tmp.path().join("dec_pcb"), &[PCB[0], PCB[1], ("train.decoupled", "true")]);
    let slowest = [&ce_run, &pcb_run, &dec_ce, &dec_pcb].iter().map(|r| r.elapsed).max().unwrap();

    let base: Baseline =
        serde_json::from_str(&fs::read_to_string(fixture_dir().join("desk_baseline.json")).unwrap()).unwrap();
    let ce = &ce_run.report;
    let reproduced = [
        (ce.acc_overall, base.acc),
        (ce.acc_frequent.unwrap(), base.acc_f),
        (ce.acc_common.unwrap(), base.acc_c),
        (rare(ce), base.acc_r),
        (ce.pwb, base.pwb),
    ]
    .iter()
    .all(|(a, b)| (a - b).abs() <= BASELINE_TOL);
    assert!(
        reproduced,
        "CE baseline drifted from fixtures/desk_baseline.json: acc {} f {:?} c {:?} r {:?} pwb {}",
        ce.acc_overall, ce.acc_frequent, ce.acc_common, ce.acc_rare, ce.pwb
    );
    assert!((0.05..=0.4).contains(&rare(ce)), "fixture out of its calibration band");

    // Post-hoc studies on the CE checkpoint.
    let ds = ce_run.exp.dataset().unwrap();
    let ckpt = ce_run.exp.out_dir().join("checkpoint.json");
    let table = cmd_calibrate(&ce_run.exp, &ckpt, PosthocOptions::default()).unwrap();
    let pick = |method: &str, source: &str| {
        &table.iter().find(|r| r.method == method && r.source == source).unwrap().report
    };
    let none = pick("none", "train");
    let ocm = pick("cm", "oracle");
    let oms = pick("ms", "oracle");
    let tcm = pick("cm", "train");

    record(
        &mut outcomes,
        4,
        "oracle CM beats none and oracle MS on rare",
        verdict(
            rare(ocm) > rare(none) && rare(ocm) - rare(oms) > 0.0 && ocm.acc_overall >= none.acc_overall - CM_ACC_DROP,
            format!(
                "rare none {:.2} cm {:.2} ms {:.2} (gap {:+.2}); acc none {:.4} cm {:.4}",
                rare(none),
                rare(ocm),
                rare(oms),
                rare(ocm) - rare(oms),
                none.acc_overall,
                ocm.acc_overall
            ),
        ),
    );

    let pcb = &pcb_run.report;
    record(
        &mut outcomes,
        5,
        "train-CM post-hoc below online PCB on rare",
        verdict(rare(tcm) < rare(pcb), format!("rare train-CM {:.2} PCB {:.2}", rare(tcm), rare(pcb))),
    );

    let reduction = 1.0 - pcb.pwb / ce.pwb;
    let f_shift = pcb.acc_frequent.unwrap() - ce.acc_frequent.unwrap();
    record(
        &mut outcomes,
        6,
        "PCB lowers PwB and lifts rare",
        verdict(
            reduction >= PWB_REDUCTION && rare(pcb) > rare(ce) && f_shift.abs() <= FREQUENT_BAND,
            format!(
                "PwB {:.3} -> {:.3} ({:.1}% cut, need {:.0}%); rare {:.2} -> {:.2}; frequent shift {:+.4}",
                ce.pwb,
                pcb.pwb,
                100.0 * reduction,
                100.0 * PWB_REDUCTION,
                rare(ce),
                rare(pcb),
                f_shift
            ),
        ),
    );

    let pcb_head = pcb_core::head::Checkpoint::load(&pcb_run.exp.out_dir().join("checkpoint.json")).unwrap().head;
    let steps = per_step_eval(&pcb_head, &ds, RunMeta::default()).unwrap();
    let (first, last) = (rare(&steps[0]), rare(steps.last().unwrap()));
    record(
        &mut outcomes,
        7,
        "rare accuracy at the last step >= first step",
        verdict(last >= first, format!("step 1 {first:.2}, step {} {last:.2}", steps.len())),
    );

    let margin = rare(&dec_pcb.report) - rare(&dec_ce.report);
    record(
        &mut outcomes,
        8,
        "decoupled PCB beats decoupled CE on rare",
        verdict(
            margin >= DECOUPLED_MARGIN,
            format!(
                "rare {:.2} -> {:.2} (margin {margin:+.2}, need {DECOUPLED_MARGIN:+.2})",
                rare(&dec_ce.report),
                rare(&dec_pcb.report)
            ),
        ),
    );

    // Same spec, fresh directory: every artefact must match byte for byte.
    let again = train(&tmp.path().join("ce_again"), &[]);
    let mut differ = Vec::new();
    for run in [&ce_run, &again] {
        cmd_eval(&run.exp, &run.exp.out_dir().join("checkpoint.json")).unwrap();
        cmd_calibrate(&run.exp, &run.exp.out_dir().join("checkpoint.json"), PosthocOptions::default()).unwrap();
    }
    let files = [
        "train_log.csv",
        "report.json",
        "checkpoint.json",
        "ema_cm.json",
        "eval_report.json",
        "per_step.csv",
        "calibration.csv",
        "val_cm.svg",
    ];
    for name in files {
        let a = fs::read(ce_run.exp.out_dir().join(name)).unwrap();
        let b = fs::read(again.exp.out_dir().join(name)).unwrap();
        if a != b {
            differ.push(name);
        }
    }
    let in_memory = calibration_table(&again.exp, &pcb_head, &ds, PosthocOptions::default()).unwrap()
        == calibration_table(&again.exp, &pcb_head, &ds, PosthocOptions::default()).unwrap();
    let eval_twice = evaluate(&pcb_head, &ds, Partition::Val, RunMeta::default()).unwrap()
        == evaluate(&pcb_head, &ds, Partition::Val, RunMeta::default()).unwrap();
    record(
        &mut outcomes,
        9,
        "determinism",
        verdict(
            differ.is_empty() && in_memory && eval_twice,
            if differ.is_empty() {
                format!("{} artefacts byte-identical across two runs", files.len())
            } else {
                format!("differ: {}", differ.join(", "))
            },
        ),
    );

    let total = start.elapsed();
    record(
        &mut outcomes,
        10,
        "runtime budget",
        verdict(
            total < SUITE_BUDGET && slowest.max(again.elapsed) < RUN_BUDGET,
            format!(
                "suite {:.1}s (budget {}s), slowest run {:.1}s (budget {}s)",
                total.as_secs_f64(),
                SUITE_BUDGET.as_secs(),
                slowest.max(again.elapsed).as_secs_f64(),
                RUN_BUDGET.as_secs()
            ),
        ),
    );

    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{} ({}): {}", o.id, o.name, o.detail))
        .collect();
    println!("{}/{} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}

#[test]
fn softmax_helper_matches_renormalisation() {
    // Guards the oracle above: without a background column the two agree.
    let z = [0.4, -1.3, 2.2];
    assert_eq!(fg_renormalize(&z, false).unwrap(), softmax(&z));
}
