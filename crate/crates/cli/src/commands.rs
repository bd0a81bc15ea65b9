//! Subcommand implementations. Each returns its artifacts and a JSON summary;
//! [`run`] wraps them with the run manifest.

use crate::ablate::{mean_std, AblationRow, Toggles};
use crate::config::{ExperimentConfig, Variant};
use crate::report::{write_atomic, CliError, ErrorCode, RunManifest};
use advtt::checkpoint::{load_bundle, read_manifest, save_bundle, TrainingInfo};
use advtt::datagen::{
    generate_synthetic_dataset, partition_labelled, preprocess_volume, read_split, shift_volume, split_three, write_split, DataSplit, DatasetInfo,
    Mask, PatientVolume, SoftMask, DEFAULT_FRACTIONS, SYNTH_SPACING,
};
use advtt::diagnostics::classify_convergence;
use advtt::metrics::{aggregate, bootstrap_ttest, MetricRecord, Phase};
use advtt::nets::init_models;
use advtt::seed::derive_seed;
use advtt::train::{fit_with_snapshot, TrainHistory};
use advtt::ttt::{evaluate_inference, evaluate_ttt_experiment, TTTConfig, TttExperiment};
use advtt::{Bundle, Scalar};
use serde::Serialize;
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub type CmdResult<T> = Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Ttt,
    Continual,
    Eval,
    Ablate,
    Diagnose,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::Train => "train",
            Self::Ttt => "ttt",
            Self::Continual => "continual",
            Self::Eval => "eval",
            Self::Ablate => "ablate",
            Self::Diagnose => "diagnose",
        }
    }
}

impl FromStr for Command {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "synth" => Self::Synth,
            "train" => Self::Train,
            "ttt" => Self::Ttt,
            "continual" => Self::Continual,
            "eval" => Self::Eval,
            "ablate" => Self::Ablate,
            "diagnose" => Self::Diagnose,
            _ => return Err(format!("unknown command {s:?}")),
        })
    }
}

/// What a command produced.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub summary: Value,
}

/// Runs a command and records it in `<run_dir>/manifests/<command>.json`.
pub fn run(command: Command, cfg: &ExperimentConfig) -> CmdResult<Outcome> {
    fs::create_dir_all(&cfg.run_dir)?;
    let mut manifest = RunManifest::start(command.name(), cfg);
    manifest.write(&cfg.run_dir)?;
    let result = match command {
        Command::Synth => cmd_synth(cfg),
        Command::Train => cmd_train(cfg),
        Command::Ttt => cmd_ttt(cfg, false),
        Command::Continual => cmd_ttt(cfg, true),
        Command::Eval => cmd_eval(cfg),
        Command::Ablate => cmd_ablate(cfg),
        Command::Diagnose => cmd_diagnose(cfg),
    };
    manifest.finish(&cfg.run_dir, result.as_ref().map(|o| o.artifacts.clone()).map_err(Clone::clone));
    manifest.write(&cfg.run_dir)?;
    result
}

/// Clears `dir` when `force`, refuses when it already holds files.
fn prepare_output(dir: &Path, force: bool) -> CmdResult<()> {
    let occupied = dir.is_dir() && fs::read_dir(dir)?.next().is_some();
    if occupied {
        if !force {
            return Err(CliError::new(ErrorCode::TargetExists, format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

// ---------------------------------------------------------------- synth

pub fn cmd_synth(cfg: &ExperimentConfig) -> CmdResult<Outcome> {
    let root = cfg.dataset_dir();
    prepare_output(&root, cfg.force)?;
    let d = &cfg.data;
    let raw = generate_synthetic_dataset::<Scalar>(d.n_patients, d.slices_per_patient, d.image_size, d.n_classes, derive_seed(cfg.seed, "synth"))?;
    let volumes = raw.iter().map(|v| preprocess_volume(v, SYNTH_SPACING, d.image_size)).collect::<advtt::Result<Vec<_>>>()?;
    let mut split = split_three(volumes, DEFAULT_FRACTIONS, derive_seed(cfg.seed, "split"))?;
    let ids = |v: &[PatientVolume<Scalar>]| {
        let mut ids: Vec<String> = v.iter().map(|p| p.patient_id.clone()).collect();
        ids.sort();
        ids
    };
    if d.shift_test {
        let seed = derive_seed(cfg.seed, "shift");
        split.test = split.test.iter().map(|v| shift_volume(v, &d.shift, seed)).collect::<advtt::Result<_>>()?;
    }
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        write_split(&root, name, part)?;
    }
    let info = DatasetInfo {
        image_size: d.image_size,
        n_classes: d.n_classes,
        slices_per_patient: d.slices_per_patient,
        seed: cfg.seed,
        test_shift: d.shift_test.then_some(d.shift),
        train: ids(&split.train),
        val: ids(&split.val),
        test: ids(&split.test),
    };
    info.write(&root)?;
    let summary = json!({
        "dataset": root,
        "patients": { "train": info.train.len(), "val": info.val.len(), "test": info.test.len() },
        "slices_per_patient": d.slices_per_patient,
        "image_size": d.image_size,
        "n_classes": d.n_classes,
        "test_shift": info.test_shift,
    });
    Ok(Outcome { artifacts: vec![root], summary })
}

// ---------------------------------------------------------------- data and models

fn dataset_info(cfg: &ExperimentConfig) -> CmdResult<DatasetInfo> {
    let root = cfg.dataset_dir();
    if !root.join("dataset.json").is_file() {
        return Err(advtt::Error::Missing { what: "dataset".into(), path: root.display().to_string() }.into());
    }
    Ok(DatasetInfo::read(&root)?)
}

/// Reads the dataset and splits the training patients into paired and unpaired pools.
pub fn load_split(cfg: &ExperimentConfig) -> CmdResult<(DatasetInfo, DataSplit<Scalar>)> {
    let info = dataset_info(cfg)?;
    let root = cfg.dataset_dir();
    let train = read_split(&root, "train")?;
    let split = DataSplit {
        train: partition_labelled(train, cfg.data.labelled_frac, derive_seed(cfg.seed, "labelled"))?,
        val: read_split(&root, "val")?,
        test: read_split(&root, "test")?,
    };
    Ok((info, split))
}

pub fn load_test_set(cfg: &ExperimentConfig) -> CmdResult<(DatasetInfo, Vec<PatientVolume<Scalar>>)> {
    let info = dataset_info(cfg)?;
    let test = read_split(&cfg.dataset_dir(), "test")?;
    Ok((info, test))
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoint")
}

pub fn history_path(run_dir: &Path) -> PathBuf {
    run_dir.join("history.csv")
}

/// Loads the run's checkpoint and checks it fits the dataset.
pub fn load_checkpoint(cfg: &ExperimentConfig, info: &DatasetInfo) -> CmdResult<Bundle> {
    let dir = checkpoint_dir(&cfg.run_dir);
    let manifest = read_manifest(&dir)?;
    if (manifest.model.image_size, manifest.model.n_classes) != (info.image_size, info.n_classes) {
        return Err(CliError::new(
            ErrorCode::ConfigInvalid,
            format!(
                "checkpoint expects {}px images with {} classes, dataset has {}px and {}",
                manifest.model.image_size, manifest.model.n_classes, info.image_size, info.n_classes
            ),
        ));
    }
    Ok(load_bundle(&dir)?)
}

// ---------------------------------------------------------------- train

pub fn cmd_train(cfg: &ExperimentConfig) -> CmdResult<Outcome> {
    let (info, split) = load_split(cfg)?;
    train_into(cfg, &info, &split)
}

fn train_into(cfg: &ExperimentConfig, info: &DatasetInfo, split: &DataSplit<Scalar>) -> CmdResult<Outcome> {
    let ckpt = checkpoint_dir(&cfg.run_dir);
    prepare_output(&ckpt, cfg.force)?;
    let model = cfg.model_config(info.image_size, info.n_classes);
    let bundle = init_models::<Scalar>(&model, derive_seed(cfg.seed, "init"))?;
    let snapshot_dir = cfg.run_dir.join("divergence");
    let result = fit_with_snapshot(bundle, split, &cfg.train_config(), |best, history| {
        // best effort: the error itself is reported either way
        let _ = save_bundle(&snapshot_dir.join("checkpoint"), best, TrainingInfo::from_history(history));
        let _ = history.write_csv(&snapshot_dir.join("history.csv"));
    });
    let (bundle, history) = result?;
    let training = TrainingInfo::from_history(&history);
    save_bundle(&ckpt, &bundle, training)?;
    let hist = history_path(&cfg.run_dir);
    history.write_csv(&hist)?;
    let dice = best_epoch_value(&history, training.best_epoch, advtt::train::names::DICE);
    let summary = json!({
        "model": cfg.model,
        "epochs_run": training.epochs_run,
        "best_epoch": training.best_epoch,
        "val_supervised": training.val_loss,
        "val_dice": dice,
        "checkpoint": ckpt,
    });
    Ok(Outcome { artifacts: vec![ckpt, hist], summary })
}

fn best_epoch_value(history: &TrainHistory, epoch: Option<usize>, name: &str) -> Option<f64> {
    let epoch = epoch?;
    history
        .records
        .iter()
        .find(|r| r.epoch == epoch && r.split == advtt::train::HistorySplit::Val && r.loss_name == name)
        .map(|r| r.value)
}

// ---------------------------------------------------------------- ttt / continual

/// Output directory of an adaptation run, e.g. `ttt_adversarial`.
pub fn adaptation_dir(run_dir: &Path, continual: bool, cfg: &TTTConfig) -> PathBuf {
    run_dir.join(format!("{}_{}", if continual { "continual" } else { "ttt" }, cfg.mode))
}

#[derive(Serialize)]
struct PhaseMetrics<'a> {
    dice: &'a [f64],
    iou: &'a [f64],
    hausdorff: &'a [f64],
    mean_dice: f64,
    mean_iou: f64,
    mean_hausdorff: f64,
}

impl<'a> PhaseMetrics<'a> {
    fn of(r: &'a MetricRecord) -> Self {
        Self { dice: &r.dice, iou: &r.iou, hausdorff: &r.hausdorff, mean_dice: r.mean_dice(), mean_iou: r.mean_iou(), mean_hausdorff: r.mean_hausdorff() }
    }
}

pub const RESULTS_HEADER: &str =
    "order,patient_id,adapted,diverged,n_iter,best_step,best_loss,dice_before,dice_after,iou_before,iou_after,hausdorff_before,hausdorff_after";

fn cmd_ttt(cfg: &ExperimentConfig, continual: bool) -> CmdResult<Outcome> {
    let (info, test) = load_test_set(cfg)?;
    let bundle = load_checkpoint(cfg, &info)?;
    let tc = cfg.ttt_config(continual);
    let out = adaptation_dir(&cfg.run_dir, continual, &tc);
    prepare_output(&out, cfg.force)?;
    let jobs = if continual { 1 } else { cfg.jobs };
    let ex = evaluate_ttt_experiment(&bundle, &test, &tc, jobs)?;
    let summary = write_adaptation(&out, &ex, &tc)?;
    Ok(Outcome { artifacts: vec![out], summary })
}

fn labels_of(masks: &[SoftMask<Scalar>]) -> Vec<Vec<u8>> {
    masks.iter().map(|m| m.harden().labels()).collect()
}

/// Per-subject JSON, predicted label maps and the aggregate CSV.
fn write_adaptation(out: &Path, ex: &TttExperiment<Scalar>, tc: &TTTConfig) -> CmdResult<Value> {
    let by_id: BTreeMap<(&str, Phase), &MetricRecord> = ex.records.iter().map(|r| ((r.patient_id.as_str(), r.phase), r)).collect();
    let mut csv = String::from(RESULTS_HEADER);
    csv.push('\n');
    let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    for (order, r) in ex.results.iter().enumerate() {
        let before = by_id.get(&(r.patient_id.as_str(), Phase::Before)).copied();
        let after = by_id.get(&(r.patient_id.as_str(), Phase::After)).copied();
        let pred_dir = out.join("predictions").join(&r.patient_id);
        fs::create_dir_all(&pred_dir)?;
        for (phase, masks) in [("before", &r.initial_masks), ("after", &r.best_masks)] {
            for (k, labels) in labels_of(masks).into_iter().enumerate() {
                fs::write(pred_dir.join(format!("slice_{k:03}.{phase}.u8")), labels)?;
            }
        }
        let metrics = match (before, after) {
            (Some(b), Some(a)) => json!({
                "before": PhaseMetrics::of(b),
                "after": PhaseMetrics::of(a),
                "delta": {
                    "dice": a.mean_dice() - b.mean_dice(),
                    "iou": a.mean_iou() - b.mean_iou(),
                    "hausdorff": a.mean_hausdorff() - b.mean_hausdorff(),
                },
            }),
            _ => Value::Null,
        };
        let record = json!({
            "patient_id": r.patient_id,
            "order": order,
            "mode": tc.mode,
            "adapted": r.adapted,
            "diverged": r.diverged,
            "n_iter": r.n_iter,
            "best_step": r.best_step,
            "best_loss": r.best_loss,
            "trace": r.trace,
            "metrics": metrics,
        });
        write_atomic(&out.join("subjects").join(format!("{}.json", r.patient_id)), serde_json::to_string_pretty(&record)?.as_bytes())?;
        writeln!(
            csv,
            "{order},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.patient_id,
            r.adapted,
            r.diverged,
            r.n_iter,
            r.best_step,
            r.best_loss,
            f(before.map(MetricRecord::mean_dice)),
            f(after.map(MetricRecord::mean_dice)),
            f(before.map(MetricRecord::mean_iou)),
            f(after.map(MetricRecord::mean_iou)),
            f(before.map(MetricRecord::mean_hausdorff)),
            f(after.map(MetricRecord::mean_hausdorff)),
        )
        .expect("writing to a String");
    }
    write_atomic(&out.join("results.csv"), csv.as_bytes())?;
    let n = ex.results.len().max(1) as f64;
    let mean = |phase: Phase| {
        let v: Vec<f64> = ex.records.iter().filter(|r| r.phase == phase).map(MetricRecord::mean_dice).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(json!({
        "output": out,
        "mode": tc.mode,
        "continual": tc.continual,
        "subjects": ex.results.len(),
        "unscored": ex.unscored,
        "mean_n_iter": ex.results.iter().map(|r| r.n_iter as f64).sum::<f64>() / n,
        "mean_dice_before": mean(Phase::Before),
        "mean_dice_after": mean(Phase::After),
    }))
}

/// One row of an adaptation `results.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub order: usize,
    pub patient_id: String,
    pub adapted: bool,
    pub n_iter: usize,
    pub dice_before: Option<f64>,
    pub dice_after: Option<f64>,
}

pub fn read_results(path: &Path) -> CmdResult<Vec<ResultRow>> {
    let text = fs::read_to_string(path).map_err(|_| advtt::Error::Missing { what: "predictions".into(), path: path.display().to_string() })?;
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(CliError::new(ErrorCode::InvalidData, format!("{} has an unexpected header", path.display())));
    }
    let bad = |l: &str| CliError::new(ErrorCode::InvalidData, format!("bad results row {l:?}"));
    lines
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 13 {
                return Err(bad(l));
            }
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { s.parse().map(Some).map_err(|_| bad(l)) };
            Ok(ResultRow {
                order: c[0].parse().map_err(|_| bad(l))?,
                patient_id: c[1].to_owned(),
                adapted: c[2].parse().map_err(|_| bad(l))?,
                n_iter: c[4].parse().map_err(|_| bad(l))?,
                dice_before: opt(c[7])?,
                dice_after: opt(c[8])?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- eval

pub const METRICS_HEADER: &str = "patient_id,phase,class,dice,iou,hausdorff";

fn read_predictions(dir: &Path, phase: &str, n: usize, h: usize, w: usize, classes: usize) -> CmdResult<Vec<Mask<Scalar>>> {
    (0..n)
        .map(|k| {
            let path = dir.join(format!("slice_{k:03}.{phase}.u8"));
            let labels = fs::read(&path).map_err(|_| advtt::Error::Missing { what: "predictions".into(), path: path.display().to_string() })?;
            Ok(Mask::from_labels(h, w, classes, &labels)?)
        })
        .collect()
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> CmdResult<Outcome> {
    let (_, test) = load_test_set(cfg)?;
    let continual = cfg.eval.source == crate::config::EvalSource::Continual;
    let src = adaptation_dir(&cfg.run_dir, continual, &cfg.ttt_config(continual));
    let rows = read_results(&src.join("results.csv"))?;
    let by_id: BTreeMap<&str, &PatientVolume<Scalar>> = test.iter().map(|v| (v.patient_id.as_str(), v)).collect();
    let mut records = Vec::new();
    for row in &rows {
        let vol = by_id
            .get(row.patient_id.as_str())
            .ok_or_else(|| CliError::new(ErrorCode::InvalidData, format!("{} is not in the test split", row.patient_id)))?;
        let Some(truth) = vol.masks() else {
            log::warn!("subject {} has no ground truth; skipping", row.patient_id);
            continue;
        };
        let (h, w, c) = vol.geometry()?;
        let pred_dir = src.join("predictions").join(&row.patient_id);
        for (phase, name) in [(Phase::Before, "before"), (Phase::After, "after")] {
            let pred = read_predictions(&pred_dir, name, truth.len(), h, w, c)?;
            records.push(MetricRecord::from_slices(&row.patient_id, phase, &pred.iter().collect::<Vec<_>>(), &truth)?);
        }
    }
    let out = cfg.run_dir.join("eval");
    prepare_output(&out, true)?;
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for r in &records {
        for k in 0..r.dice.len() {
            writeln!(csv, "{},{},{k},{},{},{}", r.patient_id, r.phase.as_str(), r.dice[k], r.iou[k], r.hausdorff[k]).expect("writing to a String");
        }
    }
    let metrics_path = out.join("metrics.csv");
    write_atomic(&metrics_path, csv.as_bytes())?;
    let summary = aggregate(&records)?;
    let paired = |f: fn(&MetricRecord) -> f64| -> (Vec<f64>, Vec<f64>) {
        let pick = |p: Phase| records.iter().filter(|r| r.phase == p).map(f).collect::<Vec<_>>();
        (pick(Phase::Before), pick(Phase::After))
    };
    let seed = derive_seed(cfg.seed, "eval/bootstrap");
    let mut p_values = serde_json::Map::new();
    for (name, f) in [("dice", MetricRecord::mean_dice as fn(&MetricRecord) -> f64), ("iou", MetricRecord::mean_iou), ("hausdorff", MetricRecord::mean_hausdorff)] {
        let (b, a) = paired(f);
        let p = bootstrap_ttest(&b, &a, cfg.eval.n_boot, seed).ok();
        p_values.insert(name.to_owned(), json!(p));
    }
    let report = json!({
        "source": src,
        "n_boot": cfg.eval.n_boot,
        "summary": summary,
        "p_values": p_values,
    });
    let summary_path = out.join("summary.json");
    write_atomic(&summary_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(Outcome { artifacts: vec![metrics_path, summary_path], summary: report })
}

// ---------------------------------------------------------------- diagnose

pub fn cmd_diagnose(cfg: &ExperimentConfig) -> CmdResult<Outcome> {
    let path = if cfg.diagnose.history.is_empty() { history_path(&cfg.run_dir) } else { PathBuf::from(&cfg.diagnose.history) };
    if !path.is_file() {
        return Err(advtt::Error::Missing { what: "history".into(), path: path.display().to_string() }.into());
    }
    let history = TrainHistory::read_csv(&path)?;
    let report = classify_convergence(&history, cfg.diagnose.window, cfg.diagnose.tol)?;
    let out = cfg.run_dir.join("diagnosis.json");
    let value = serde_json::to_value(&report)?;
    write_atomic(&out, serde_json::to_string_pretty(&value)?.as_bytes())?;
    Ok(Outcome { artifacts: vec![out], summary: value })
}

// ---------------------------------------------------------------- ablate

pub const ABLATION_HEADER: &str = "row,reference,adaptor,smoothness,fake_anchors,ttt,n_seeds,n_patients,dice_mean,dice_std";
pub const ABLATION_SEEDS_HEADER: &str = "row,seed,n_patients,dice_mean,dice_std";

/// Directory name of one training configuration.
pub fn toggles_dir(t: &Toggles) -> String {
    let anchors = t.anchors.map_or("none".to_owned(), |k| advtt::train::AnchorKind::from(k).to_string());
    format!("adaptor-{}_smooth-{}_anchors-{anchors}", t.adaptor, t.smoothness)
}

/// Run directory of one (toggles, seed) training inside an ablation.
pub fn ablation_run_dir(run_dir: &Path, t: &Toggles, seed: u64) -> PathBuf {
    run_dir.join("ablate").join(toggles_dir(t)).join(format!("seed{seed}"))
}

/// Configuration of one ablation training run.
pub fn ablation_config(cfg: &ExperimentConfig, t: &Toggles, seed: u64) -> ExperimentConfig {
    let mut sub = cfg.clone();
    sub.run_dir = ablation_run_dir(&cfg.run_dir, t, seed);
    sub.data_dir = std::path::absolute(cfg.dataset_dir()).unwrap_or_else(|_| cfg.dataset_dir());
    sub.seed = seed;
    sub.model = Variant::Gan;
    sub.train.use_adaptor = t.adaptor;
    sub.train.use_smoothness = t.smoothness;
    sub.train.use_fake_anchors = t.anchors.is_some();
    if let Some(k) = t.anchors {
        sub.train.anchor_kind = k.into();
    }
    sub
}

/// True when `command` last completed in `cfg.run_dir` with the same
/// configuration (ignoring `force`), so its outputs can be reused.
pub fn completed_with(command: Command, cfg: &ExperimentConfig) -> bool {
    let Ok(m) = RunManifest::read(&RunManifest::path(&cfg.run_dir, command.name())) else {
        return false;
    };
    let normalized = ExperimentConfig { force: false, ..cfg.clone() };
    let mut recorded = ExperimentConfig::default();
    let same = crate::config::parse_text(&m.config, "manifest", None).is_ok_and(|a| recorded.apply(&a).is_ok())
        && ExperimentConfig { force: false, ..recorded } == normalized;
    m.status == crate::report::RunStatus::Completed && same
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> CmdResult<Outcome> {
    let info = dataset_info(cfg)?;
    let rows: Vec<AblationRow> = cfg.ablate.rows.iter().map(|r| AblationRow::parse(r).map_err(|m| CliError::new(ErrorCode::ConfigInvalid, m))).collect::<CmdResult<_>>()?;
    if rows.is_empty() || cfg.ablate.seeds.is_empty() {
        return Err(CliError::new(ErrorCode::ConfigInvalid, "ablation needs at least one row and one seed"));
    }
    let out = cfg.run_dir.join("ablate");
    if cfg.force && out.exists() {
        fs::remove_dir_all(&out)?;
    }
    // per-patient Dice of every (row, seed)
    let mut scores: BTreeMap<(usize, u64), Vec<f64>> = BTreeMap::new();
    let mut trained: BTreeMap<(Toggles, u64), ()> = BTreeMap::new();
    for &seed in &cfg.ablate.seeds {
        for (i, row) in rows.iter().enumerate() {
            let sub = ablation_config(cfg, &row.toggles, seed);
            if trained.insert((row.toggles, seed), ()).is_none() {
                if completed_with(Command::Train, &sub) {
                    log::info!("reusing {}", sub.run_dir.display());
                } else {
                    run(Command::Train, &ExperimentConfig { force: true, ..sub.clone() })?;
                }
            }
            let dice = if row.ttt {
                let tc = sub.ttt_config(false);
                let results = adaptation_dir(&sub.run_dir, false, &tc).join("results.csv");
                if !(results.is_file() && completed_with(Command::Ttt, &sub)) {
                    run(Command::Ttt, &ExperimentConfig { force: true, ..sub.clone() })?;
                }
                read_results(&results)?.iter().filter_map(|r| r.dice_after).collect()
            } else {
                let (_, test) = load_test_set(&sub)?;
                let bundle = load_checkpoint(&sub, &info)?;
                evaluate_inference(&bundle, &test, Phase::Before)?.iter().map(MetricRecord::mean_dice).collect()
            };
            scores.insert((i, seed), dice);
        }
    }
    fs::create_dir_all(&out)?;
    let mut table = String::from(ABLATION_HEADER);
    table.push('\n');
    let mut per_seed = String::from(ABLATION_SEEDS_HEADER);
    per_seed.push('\n');
    let mut rows_json = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let mut pooled = Vec::new();
        for &seed in &cfg.ablate.seeds {
            let v = &scores[&(i, seed)];
            let (m, s) = mean_std(v);
            writeln!(per_seed, "{},{seed},{},{m},{s}", row.name, v.len()).expect("writing to a String");
            pooled.extend_from_slice(v);
        }
        let (m, s) = mean_std(&pooled);
        let anchors = row.toggles.anchors.map_or("none".to_owned(), |k| advtt::train::AnchorKind::from(k).to_string());
        writeln!(
            table,
            "{},{},{},{},{anchors},{},{},{},{m},{s}",
            row.name,
            row.reference,
            row.toggles.adaptor,
            row.toggles.smoothness,
            row.ttt,
            cfg.ablate.seeds.len(),
            pooled.len(),
        )
        .expect("writing to a String");
        rows_json.push(json!({ "row": row.name, "reference": row.reference, "dice_mean": m, "dice_std": s }));
    }
    let table_path = out.join("ablation.csv");
    let seeds_path = out.join("ablation_seeds.csv");
    write_atomic(&table_path, table.as_bytes())?;
    write_atomic(&seeds_path, per_seed.as_bytes())?;
    Ok(Outcome { artifacts: vec![table_path, seeds_path], summary: json!({ "rows": rows_json }) })
}
