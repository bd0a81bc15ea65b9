//! Acceptance run: prints one `criterion N: PASS|FAIL` line per criterion.
//!
//! Criteria 1-5 and 11 are exact oracles and finish in seconds. Criterion 12
//! reruns every command on a tiny configuration. Criteria 6-10 train on the
//! desk benchmark (`configs/desk.conf`) and take roughly half an hour on one
//! core. The process exits non-zero only when the harness itself breaks, or
//! when `ADVTT_ACCEPTANCE_STRICT=1` and some criterion fails; the lines are
//! the verdict. `ADVTT_ACCEPTANCE_ONLY=1,3,12` restricts the run.

use advtt::checkpoint::load_bundle;
use advtt::datagen::{corrupt_mask, generate_synthetic_dataset, masks_to_tensor, Mask, PatientVolume};
use advtt::diagnostics::{classify_convergence, corrupted_detection_auc, ConvergenceMode, DEFAULT_TOL, DEFAULT_WINDOW};
use advtt::losses::{gradient_penalty, gradient_penalty_value, lsgan_discriminator_loss, lsgan_generator_loss, mae_reconstruction, weighted_cross_entropy};
use advtt::metrics::{dice, hausdorff, iou};
use advtt::nets::{init_models, Adaptor, Discriminator, ModelConfig, Segmentor};
use advtt::nn::Module;
use advtt::seed::rng_for;
use advtt::train::{names, HistorySplit, TrainHistory};
use advtt::ttt::{stopping_check, ttt_adapt, ttt_continual, TTTConfig, TttMode, TttUnit};
use advtt::Tensor;
use advtt_cli::ablate::AblationRow;
use advtt_cli::commands::{ablation_config, adaptation_dir, checkpoint_dir, load_test_set, read_results};
use advtt_cli::{run, Command, ExperimentConfig};
use rand::Rng;
use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn desk_conf() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf")
}

fn config(file: Option<&Path>, overrides: &[(&str, String)]) -> ExperimentConfig {
    let o: Vec<(String, String)> = overrides.iter().map(|(k, v)| ((*k).to_owned(), v.clone())).collect();
    ExperimentConfig::resolve(file, &o).expect("acceptance configuration")
}

fn exec(command: Command, cfg: &ExperimentConfig) -> Result<serde_json::Value, String> {
    run(command, cfg).map(|o| o.summary).map_err(|e| format!("{} failed: {}", command.name(), e.to_json()))
}

// ------------------------------------------------------------------ 1

fn loss_exactness() -> Check {
    let eq = lsgan_discriminator_loss(&[1.0f64], &[-1.0]).0.value;
    let zero = lsgan_discriminator_loss(&[0.0f64], &[0.0]).0.value;
    let real = lsgan_discriminator_loss(&[-1.0f64], &[-1.0]).0.component("real").ok_or("no real component")?;
    let ok = eq.abs() <= 1e-6 && (zero - 1.0).abs() <= 1e-6 && (real - 2.0).abs() <= 1e-6;
    ensure(ok, || format!("L(1,-1)={eq} L(0,0)={zero} real(-1)={real}"))?;
    Ok(format!("L(1,-1)={eq} L(0,0)={zero} real(-1)={real}"))
}

// ------------------------------------------------------------------ 2

const H: f64 = 1e-6;

/// Relative error, with an absolute floor for gradients that vanish.
fn agrees(analytic: f64, numeric: f64) -> bool {
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
    rel < 1e-3 || (analytic - numeric).abs() < 1e-8
}

struct Fd {
    checked: usize,
    worst: f64,
}

impl Fd {
    fn probe(&mut self, what: &str, analytic: f64, plus: f64, minus: f64) -> Result<(), String> {
        let numeric = (plus - minus) / (2.0 * H);
        self.checked += 1;
        if analytic.abs().max(numeric.abs()) > 1e-4 {
            self.worst = self.worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
        }
        ensure(agrees(analytic, numeric), || format!("{what}: analytic {analytic} vs numeric {numeric}"))
    }

    fn tensor(&mut self, what: &str, x: &Tensor<f64>, grad: &Tensor<f64>, stride: usize, f: impl Fn(&Tensor<f64>) -> f64) -> Result<(), String> {
        for i in (0..x.len()).step_by(stride) {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[i] += H;
            b.data_mut()[i] -= H;
            self.probe(&format!("{what}[{i}]"), grad.data()[i], f(&a), f(&b))?;
        }
        Ok(())
    }

    fn params<M: Module<f64> + Clone>(&mut self, what: &str, m: &M, grads: &[f64], stride: usize, f: impl Fn(&M) -> f64) -> Result<(), String> {
        let theta = m.flat_values();
        for i in (0..theta.len()).step_by(stride) {
            let mut probe = m.clone();
            let mut t = theta.clone();
            t[i] += H;
            probe.set_flat_values(&t);
            let plus = f(&probe);
            t[i] -= 2.0 * H;
            probe.set_flat_values(&t);
            self.probe(&format!("{what} param {i}"), grads[i], plus, f(&probe))?;
        }
        Ok(())
    }
}

fn uniform(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = rng_for(seed, "uniform");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    t
}

/// Random per-pixel distributions over the channel axis.
fn simplex(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = rng_for(seed, "simplex");
    let [n, c, h, w] = shape;
    let mut t = Tensor::zeros(shape);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                for (k, r) in raw.iter().enumerate() {
                    *t.at_mut(b, k, y, x) = r / s;
                }
            }
        }
    }
    t
}

fn one_hot(n: usize, classes: usize, side: usize, seed: u64) -> Tensor<f64> {
    let mut rng = rng_for(seed, "labels");
    let masks: Vec<Mask<f64>> = (0..n)
        .map(|_| {
            let labels: Vec<u8> = (0..side * side).map(|_| rng.random_range(0..classes as u8)).collect();
            Mask::from_labels(side, side, classes, &labels).expect("valid labels")
        })
        .collect();
    masks_to_tensor(&masks.iter().collect::<Vec<_>>()).expect("uniform masks")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn gradient_correctness() -> Check {
    let mut fd = Fd { checked: 0, worst: 0.0 };

    let target = one_hot(2, 3, 4, 1);
    let probs = simplex([2, 3, 4, 4], 2);
    let (_, g) = weighted_cross_entropy(&probs, &target).map_err(|e| e.to_string())?;
    fd.tensor("cross entropy", &probs, &g, 1, |p| weighted_cross_entropy(p, &target).expect("same shape").0.value)?;

    let (dr, df) = ([0.3, -0.7, 1.4], [-0.2, 0.9]);
    let (_, gr, gf) = lsgan_discriminator_loss(&dr, &df);
    let (_, gg) = lsgan_generator_loss(&df);
    for i in 0..dr.len() {
        let (mut a, mut b) = (dr, dr);
        a[i] += H;
        b[i] -= H;
        fd.probe("lsgan real", gr[i], lsgan_discriminator_loss(&a, &df).0.value, lsgan_discriminator_loss(&b, &df).0.value)?;
    }
    for i in 0..df.len() {
        let (mut a, mut b) = (df, df);
        a[i] += H;
        b[i] -= H;
        fd.probe("lsgan fake", gf[i], lsgan_discriminator_loss(&dr, &a).0.value, lsgan_discriminator_loss(&dr, &b).0.value)?;
        fd.probe("lsgan generator", gg[i], lsgan_generator_loss(&a).0.value, lsgan_generator_loss(&b).0.value)?;
    }

    let real = one_hot(2, 2, 16, 3);
    let fake = simplex([2, 2, 16, 16], 4);
    for smooth in [true, false] {
        let disc = Discriminator::<f64>::new(2, 16, 16, &[3, 3, 4, 4, 2], smooth, &mut rng_for(5, "gp"));
        let mut d = disc.clone();
        d.zero_grad();
        gradient_penalty(&mut d, &real, &fake, 10.0, 6, true).map_err(|e| e.to_string())?;
        let value = |m: &Discriminator<f64>| gradient_penalty_value(m, &real, &fake, 10.0, 6).expect("same shapes").value;
        fd.params("gradient penalty", &disc, &d.flat_grads(), 7, value)?;
    }

    let x = uniform([2, 1, 3, 4], 7);
    let y = uniform([2, 1, 3, 4], 8);
    let (_, gx, gy) = mae_reconstruction(&x, &y).map_err(|e| e.to_string())?;
    fd.tensor("mae x", &x, &gx, 1, |t| mae_reconstruction(t, &y).expect("same shape").0.value)?;
    fd.tensor("mae y", &y, &gy, 1, |t| mae_reconstruction(&x, t).expect("same shape").0.value)?;

    let mut adaptor = Adaptor::<f64>::new(4, &mut rng_for(9, "adaptor"));
    let x = uniform([2, 1, 8, 8], 10);
    let w = uniform([2, 1, 8, 8], 11);
    let (_, cache) = adaptor.forward(&x);
    adaptor.zero_grad();
    let dx = adaptor.backward(&cache, &w, true, true).ok_or("adaptor gave no input gradient")?;
    fd.params("adaptor", &adaptor, &adaptor.flat_grads(), 1, |a| dot(&a.forward(&x).0, &w))?;
    fd.tensor("adaptor input", &x, &dx, 3, |t| dot(&adaptor.forward(t).0, &w))?;

    let mut seg = Segmentor::<f64>::new(2, 3, 3, Some(2), &mut rng_for(12, "segmentor"));
    let wp = uniform([2, 3, 8, 8], 13);
    let wr = uniform([2, 2, 4, 4], 14);
    let seg_loss = |s: &Segmentor<f64>, t: &Tensor<f64>| {
        let out = s.forward(t, true).0;
        dot(&out.probs, &wp) + dot(out.residual.as_ref().expect("residual head"), &wr)
    };
    let (_, cache) = seg.forward(&x, true);
    seg.zero_grad();
    let dx = seg.backward(&cache, &wp, Some(&wr), true);
    fd.params("segmentor", &seg, &seg.flat_grads(), 7, |s| seg_loss(s, &x))?;
    fd.tensor("segmentor input", &x, &dx, 5, |t| seg_loss(&seg, t))?;

    for smooth in [true, false] {
        let mut disc = Discriminator::<f64>::new(3, 16, 16, &[2, 3, 3, 3, 2], smooth, &mut rng_for(15, "disc"));
        let m = uniform([3, 3, 16, 16], 16);
        let ws = [0.7, -1.3, 0.4];
        let score = |d: &Discriminator<f64>, t: &Tensor<f64>| d.score(t).iter().zip(&ws).map(|(s, w)| s * w).sum::<f64>();
        let (_, cache) = disc.forward(&m);
        disc.zero_grad();
        let dm = disc.backward(&cache, &ws, true);
        fd.params("discriminator", &disc, &disc.flat_grads(), 3, |d| score(d, &m))?;
        fd.tensor("discriminator input", &m, &dm, 11, |t| score(&disc, t))?;
    }
    Ok(format!("{} finite-difference probes, worst relative error {:.2e}", fd.checked, fd.worst))
}

// ------------------------------------------------------------------ 3

fn brute_hausdorff(a: &[bool], b: &[bool], side: usize) -> f64 {
    let pts = |s: &[bool]| -> Vec<(f64, f64)> { (0..s.len()).filter(|&i| s[i]).map(|i| ((i / side) as f64, (i % side) as f64)).collect() };
    let (pa, pb) = (pts(a), pts(b));
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => side as f64,
        _ => {
            let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
                from.iter()
                    .map(|p| to.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
                    .fold(0.0, f64::max)
            };
            directed(&pa, &pb).max(directed(&pb, &pa))
        }
    }
}

fn metric_oracles() -> Check {
    const SIDE: usize = 8;
    const CLASSES: usize = 4;
    let mut rng = rng_for(3, "metric pairs");
    let mut empties = 0;
    for pair in 0..200 {
        // each mask draws from a random subset of classes, so empty classes are common
        let draw = |rng: &mut advtt::seed::Rng| -> Vec<u8> {
            let allowed: Vec<u8> = (0..CLASSES as u8).filter(|&c| c == 0 || rng.random_bool(0.6)).collect();
            (0..SIDE * SIDE).map(|_| allowed[rng.random_range(0..allowed.len())]).collect()
        };
        let (la, lb) = (draw(&mut rng), draw(&mut rng));
        let a = Mask::<f64>::from_labels(SIDE, SIDE, CLASSES, &la).map_err(|e| e.to_string())?;
        let b = Mask::<f64>::from_labels(SIDE, SIDE, CLASSES, &lb).map_err(|e| e.to_string())?;
        let (d, j, hd) = (dice(&a, &b).map_err(|e| e.to_string())?, iou(&a, &b).map_err(|e| e.to_string())?, hausdorff(&a, &b).map_err(|e| e.to_string())?);
        for c in 0..CLASSES {
            let sa: Vec<bool> = la.iter().map(|&l| l as usize == c).collect();
            let sb: Vec<bool> = lb.iter().map(|&l| l as usize == c).collect();
            let inter = sa.iter().zip(&sb).filter(|(x, y)| **x && **y).count() as u64;
            let (na, nb) = (sa.iter().filter(|x| **x).count() as u64, sb.iter().filter(|x| **x).count() as u64);
            let od = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
            let oj = if na + nb - inter == 0 { 1.0 } else { inter as f64 / (na + nb - inter) as f64 };
            let oh = brute_hausdorff(&sa, &sb, SIDE);
            if (na == 0) != (nb == 0) {
                empties += 1;
                ensure(hd[c] == SIDE as f64, || format!("pair {pair} class {c}: one empty set gave {}", hd[c]))?;
            }
            ensure(d[c] == od && j[c] == oj && hd[c] == oh, || format!("pair {pair} class {c}: ({}, {}, {}) vs oracle ({od}, {oj}, {oh})", d[c], j[c], hd[c]))?;
            ensure((d[c] - 2.0 * j[c] / (1.0 + j[c])).abs() <= 1e-12, || format!("pair {pair} class {c}: dice-iou identity off"))?;
        }
    }
    Ok(format!("200 pairs x {CLASSES} classes exact, {empties} single-empty cases"))
}

// ------------------------------------------------------------------ 4

fn first_stop(trace: &[f64], patience: usize, max_iter: usize) -> Option<usize> {
    (1..=trace.len()).find(|&n| stopping_check(&trace[..n], patience, max_iter))
}

fn stopping_rule() -> Check {
    // minimum at step 10, flat afterwards
    let flat: Vec<f64> = (1..=1200).map(|s| if s <= 10 { 20.0 - s as f64 } else { 10.0 }).collect();
    let a = first_stop(&flat, 200, 1000);
    // new minimum at step 950
    let late: Vec<f64> = (1..=1200).map(|s| if s <= 950 { 2000.0 - s as f64 } else { 1050.0 }).collect();
    let b = first_stop(&late, 200, 1000);
    // patience equal to the cap: minimum at step 1, never improved
    let rising: Vec<f64> = (1..=500).map(|s| s as f64).collect();
    let c = first_stop(&rising, 300, 300);
    let decreasing: Vec<f64> = (0..50).map(|s| -(s as f64)).collect();
    let d = stopping_check(&decreasing, 200, 1000);
    ensure(a == Some(210) && b == Some(1000) && c == Some(300) && !d, || format!("stops at {a:?}, {b:?}, {c:?}; decreasing stops: {d}"))?;
    Ok("min-then-flat 210, late minimum 1000, patience=max 300, decreasing never".into())
}

// ------------------------------------------------------------------ 5

fn isolation() -> Check {
    let mc = ModelConfig {
        image_size: 32,
        adaptor_width: 4,
        unet_depth: 2,
        unet_width: 4,
        disc_widths: vec![4, 4, 4, 4, 4],
        causal: true,
        residual_channels: 2,
        decoder_width: 4,
        ..ModelConfig::default()
    };
    let bundle = init_models::<f64>(&mc, 5).map_err(|e| e.to_string())?;
    let subjects: Vec<PatientVolume<f64>> = generate_synthetic_dataset(3, 2, 32, 4, 6).map_err(|e| e.to_string())?;
    let before = bundle.digests();
    let mut runs = 0;
    let mut results = Vec::new();
    for mode in [TttMode::Adversarial, TttMode::Reconstruction, TttMode::Both] {
        for unit in [TttUnit::Patient, TttUnit::Slice] {
            let tc = TTTConfig { mode, unit, patience: 4, max_iter: 12, learning_rate: 1e-2, ..TTTConfig::default() };
            for s in &subjects {
                results.push(ttt_adapt(&bundle, s, &tc).map_err(|e| e.to_string())?);
            }
        }
        let tc = TTTConfig { mode, continual: true, patience: 4, max_iter: 12, learning_rate: 1e-2, ..TTTConfig::default() };
        results.extend(ttt_continual(&bundle, &subjects, &tc).map_err(|e| e.to_string())?);
    }
    for r in &results {
        runs += 1;
        let min = r.trace.iter().copied().fold(f64::INFINITY, f64::min);
        ensure(r.best_loss == min && r.trace[r.best_step - 1] == min, || format!("{}: best {} vs min {min}", r.patient_id, r.best_loss))?;
    }
    let after = bundle.digests();
    ensure(
        before.segmentor == after.segmentor && before.discriminator == after.discriminator && before.decoder == after.decoder,
        || "frozen network digests changed".into(),
    )?;
    ensure(results.iter().any(|r| r.adaptor_start != r.adaptor_end), || "no adaptor ever moved".into())?;
    Ok(format!("{runs} adaptation runs, frozen digests unchanged, best_loss = min(trace)"))
}

// ------------------------------------------------------------------ 11

/// Losses relaxing from a start value to their end value with a small
/// deterministic wobble.
fn shaped_history(train: (f64, f64), val: (f64, f64), gap: f64) -> TrainHistory {
    let mut h = TrainHistory::default();
    for e in 1..=60 {
        let t = (-(e as f64) / 8.0).exp();
        let wobble = 0.03 * (e as f64 * 1.7).sin();
        let relax = |end: f64| end + (1.0 - end) * t + wobble;
        h.push(e, HistorySplit::Train, names::DISC_REAL, relax(train.0)).expect("fresh record");
        h.push(e, HistorySplit::Train, names::DISC_FAKE, relax(train.1)).expect("fresh record");
        h.push(e, HistorySplit::Val, names::DISC_REAL, relax(val.0)).expect("fresh record");
        h.push(e, HistorySplit::Val, names::DISC_FAKE, relax(val.1)).expect("fresh record");
        h.push(e, HistorySplit::Val, names::ANCHOR_GAP, gap * (1.0 - t)).expect("fresh record");
    }
    h
}

fn diagnostics() -> Check {
    let classify = |h: &TrainHistory| classify_convergence(h, DEFAULT_WINDOW, DEFAULT_TOL).map(|r| r.mode).map_err(|e| e.to_string());
    let eq = classify(&shaped_history((1.0, 1.0), (1.0, 1.0), 1.2))?;
    let mem = classify(&shaped_history((0.05, 0.05), (2.0, 0.0), 1.2))?;
    ensure(eq == ConvergenceMode::Equilibrium && mem == ConvergenceMode::Memorization, || format!("got {eq} and {mem}"))?;
    Ok(format!("{eq}, {mem}"))
}

// ------------------------------------------------------------------ 12

fn csv_files(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            csv_files(root, &path, out)?;
        } else if path.extension().is_some_and(|e| e == "csv") {
            out.insert(path.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| path.clone()), fs::read(&path)?);
        }
    }
    Ok(())
}

fn all_csv(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    csv_files(root, root, &mut out).map_err(|e| e.to_string())?;
    Ok(out)
}

fn reproducibility(work: &Path) -> Check {
    let run_dir = work.join("repro");
    let cfg = config(
        Some(&desk_conf()),
        &[
            ("run_dir", run_dir.display().to_string()),
            ("data.n_patients", "10".into()),
            ("train.max_epochs", "2".into()),
            ("ttt.max_iter", "8".into()),
            ("ttt.patience", "4".into()),
            ("eval.n_boot", "200".into()),
            ("ablate.rows", "full,no_adaptor".into()),
            ("ablate.seeds", "0,1".into()),
            ("diagnose.window", "2".into()),
            ("jobs", "1".into()),
        ],
    );
    let commands = [Command::Synth, Command::Train, Command::Ttt, Command::Continual, Command::Eval, Command::Ablate, Command::Diagnose];
    let mut snapshots = Vec::new();
    for pass in 0..2 {
        let cfg = ExperimentConfig { force: pass > 0, ..cfg.clone() };
        for c in commands {
            exec(c, &cfg)?;
        }
        snapshots.push(all_csv(&run_dir)?);
    }
    let (a, b) = (&snapshots[0], &snapshots[1]);
    ensure(a.len() >= 6, || format!("only {} CSV files written", a.len()))?;
    ensure(a.keys().eq(b.keys()), || "the two passes wrote different CSV files".into())?;
    for (k, v) in a {
        ensure(&b[k] == v, || format!("{} differs between passes", k.display()))?;
    }
    Ok(format!("{} CSV files identical across reruns", a.len()))
}

// ------------------------------------------------------------------ 6-10

struct Bench {
    base: ExperimentConfig,
}

const SEEDS: [u64; 3] = [0, 1, 2];

impl Bench {
    fn setup(work: &Path) -> Result<Self, String> {
        let base = config(
            Some(&desk_conf()),
            &[
                ("run_dir", work.join("bench").display().to_string()),
                ("ablate.rows", "full,no_fake_anchors,no_adaptor".into()),
                ("ablate.seeds", "0,1,2".into()),
            ],
        );
        exec(Command::Synth, &base)?;
        let t = Instant::now();
        exec(Command::Ablate, &base)?;
        eprintln!("ablation finished in {:.0} s", t.elapsed().as_secs_f64());
        Ok(Self { base })
    }

    fn sub(&self, row: &str, seed: u64) -> ExperimentConfig {
        ablation_config(&self.base, &AblationRow::parse(row).expect("known row").toggles, seed)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablation_ordering(bench: &Bench) -> Check {
    let text = fs::read_to_string(bench.base.run_dir.join("ablate/ablation.csv")).map_err(|e| e.to_string())?;
    let mut dice = BTreeMap::new();
    for line in text.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        dice.insert(c[0].to_owned(), c[8].parse::<f64>().map_err(|e| e.to_string())?);
    }
    let (full, none) = (dice["full"], dice["no_adaptor"]);
    let detail = format!("full {:.2} vs no_adaptor {:.2} Dice points over 3 seeds", 100.0 * full, 100.0 * none);
    ensure(full - none >= 0.02, || detail.clone())?;
    Ok(detail)
}

fn anchor_auc(bench: &Bench) -> Check {
    let with = bench.sub("full", 0);
    let without = bench.sub("no_fake_anchors", 0);
    let (_, test) = load_test_set(&with).map_err(|e| e.to_json())?;
    let clean: Vec<&Mask<f32>> = test.iter().flat_map(|v| v.masks().expect("test split has masks")).collect();
    let cp = with.train.corruption_params();
    let corrupted: Vec<Mask<f32>> = clean
        .iter()
        .enumerate()
        .map(|(i, m)| corrupt_mask(m, cp.patch_frac, cp.flip_prob, cp.n_swaps, 1000 + i as u64))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let clean_t = masks_to_tensor(&clean).map_err(|e| e.to_string())?;
    let corrupted_t = masks_to_tensor(&corrupted.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let auc = |cfg: &ExperimentConfig| -> Result<f64, String> {
        let b = load_bundle::<f32>(&checkpoint_dir(&cfg.run_dir)).map_err(|e| e.to_string())?;
        corrupted_detection_auc(&b.discriminator, &clean_t, &corrupted_t).map_err(|e| e.to_string())
    };
    let (a, b) = (auc(&with)?, auc(&without)?);
    let detail = format!("AUC with anchors {a:.3}, without {b:.3} on {} held-out masks", clean.len());
    ensure(a >= 0.9 && b < a, || detail.clone())?;
    Ok(detail)
}

fn ttt_benefit(bench: &Bench) -> Check {
    let sub = bench.sub("full", 0);
    let report = exec(Command::Eval, &sub)?;
    let s = &report["summary"];
    let (before, after) = (s["before"]["dice"]["mean"].as_f64(), s["after"]["dice"]["mean"].as_f64());
    let n = s["before"]["n_patients"].as_u64().unwrap_or(0);
    let p = report["p_values"]["dice"].as_f64();
    let detail = format!("Dice {:.4} -> {:.4}, p = {}, {n} test patients", before.unwrap_or(f64::NAN), after.unwrap_or(f64::NAN), p.map_or("n/a".into(), |p| format!("{p:.4}")));
    let ok = matches!((before, after, p), (Some(b), Some(a), Some(p)) if a > b && p <= 0.05) && n >= 16;
    ensure(ok, || detail.clone())?;
    Ok(detail)
}

fn continual(bench: &Bench) -> Check {
    let (mut n_cont, mut n_ind, mut first, mut last) = (vec![], vec![], vec![], vec![]);
    for seed in SEEDS {
        let sub = bench.sub("full", seed);
        exec(Command::Continual, &sub)?;
        let rows = |c: bool| read_results(&adaptation_dir(&sub.run_dir, c, &sub.ttt_config(c)).join("results.csv")).map_err(|e| e.to_json());
        let (mut cont, ind) = (rows(true)?, rows(false)?);
        cont.sort_by_key(|r| r.order);
        n_cont.push(mean(&cont.iter().map(|r| r.n_iter as f64).collect::<Vec<_>>()));
        n_ind.push(mean(&ind.iter().map(|r| r.n_iter as f64).collect::<Vec<_>>()));
        let half = cont.len() / 2;
        let dice = |rs: &[advtt_cli::commands::ResultRow]| mean(&rs.iter().filter_map(|r| r.dice_after).collect::<Vec<_>>());
        first.push(dice(&cont[..half]));
        last.push(dice(&cont[cont.len() - half..]));
    }
    let (nc, ni, f, l) = (mean(&n_cont), mean(&n_ind), mean(&first), mean(&last));
    let detail = format!("mean n_iter continual {nc:.1} vs independent {ni:.1}; stream Dice first half {f:.4}, second half {l:.4}");
    ensure(nc <= ni && l >= f, || detail.clone())?;
    Ok(detail)
}

fn causal_speedup(bench: &Bench, work: &Path) -> Check {
    let (mut adv, mut both) = (vec![], vec![]);
    for seed in SEEDS {
        let mut cfg = bench.base.clone();
        cfg.run_dir = work.join("causal").join(format!("seed{seed}"));
        cfg.data_dir = std::path::absolute(bench.base.dataset_dir()).map_err(|e| e.to_string())?;
        cfg.seed = seed;
        cfg.set("model", "causal").map_err(|e| e.to_string())?;
        exec(Command::Train, &cfg)?;
        for (mode, into) in [("adversarial", &mut adv), ("both", &mut both)] {
            let mut c = cfg.clone();
            c.set("ttt.mode", mode).map_err(|e| e.to_string())?;
            exec(Command::Ttt, &c)?;
            let rows = read_results(&adaptation_dir(&c.run_dir, false, &c.ttt_config(false)).join("results.csv")).map_err(|e| e.to_json())?;
            into.push(mean(&rows.iter().map(|r| r.n_iter as f64).collect::<Vec<_>>()));
        }
    }
    let (a, b) = (mean(&adv), mean(&both));
    let detail = format!("mean n_iter adversarial {a:.1} vs adversarial+reconstruction {b:.1} over 3 seeds");
    ensure(b < a, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------------ driver

fn report(n: usize, selected: &dyn Fn(usize) -> bool, verdicts: &mut Vec<(usize, bool)>, f: impl FnOnce() -> Check) {
    if !selected(n) {
        return;
    }
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| (*s).to_owned()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = t.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("criterion {n}: PASS ({detail}; {secs:.1} s)"),
        Err(detail) => println!("criterion {n}: FAIL ({detail}; {secs:.1} s)"),
    }
    verdicts.push((n, outcome.is_ok()));
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ADVTT_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let selected = move |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let work = tempfile::tempdir().expect("scratch directory");
    let mut verdicts = Vec::new();

    report(1, &selected, &mut verdicts, loss_exactness);
    report(2, &selected, &mut verdicts, gradient_correctness);
    report(3, &selected, &mut verdicts, metric_oracles);
    report(4, &selected, &mut verdicts, stopping_rule);
    report(5, &selected, &mut verdicts, isolation);
    report(11, &selected, &mut verdicts, diagnostics);
    report(12, &selected, &mut verdicts, || reproducibility(work.path()));

    if [6, 7, 8, 9, 10].iter().any(|&n| selected(n)) {
        match Bench::setup(work.path()) {
            Ok(bench) => {
                report(8, &selected, &mut verdicts, || ablation_ordering(&bench));
                report(6, &selected, &mut verdicts, || anchor_auc(&bench));
                report(7, &selected, &mut verdicts, || ttt_benefit(&bench));
                report(10, &selected, &mut verdicts, || continual(&bench));
                report(9, &selected, &mut verdicts, || causal_speedup(&bench, work.path()));
            }
            Err(e) => {
                for n in [6, 7, 8, 9, 10].into_iter().filter(|&n| selected(n)) {
                    println!("criterion {n}: FAIL (benchmark setup failed: {e})");
                    verdicts.push((n, false));
                }
            }
        }
    }

    verdicts.sort();
    let passed = verdicts.iter().filter(|v| v.1).count();
    println!("acceptance: {passed}/{} criteria pass", verdicts.len());
    let strict = std::env::var("ADVTT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < verdicts.len() {
        std::process::exit(1);
    }
}
