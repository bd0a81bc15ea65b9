//! Convergence classification of discriminator loss traces, and a ranking
//! probe for whether a critic still tells clean masks from corrupted ones.

use crate::error::{Error, Result};
use crate::nets::Discriminator;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::train::{names, HistorySplit, TrainHistory};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_TOL: f64 = 0.15;
/// Smallest class size accepted by [`corrupted_detection_auc`].
pub const MIN_AUC_SAMPLES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvergenceMode {
    Discriminative,
    Equilibrium,
    Memorization,
    ForgettingCollapse,
    Undetermined,
}

impl fmt::Display for ConvergenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Discriminative => "discriminative",
            Self::Equilibrium => "equilibrium",
            Self::Memorization => "memorization",
            Self::ForgettingCollapse => "forgetting-collapse",
            Self::Undetermined => "undetermined",
        })
    }
}

/// Final-window means of the per-label discriminator losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub train_real: f64,
    pub train_fake: f64,
    pub val_real: f64,
    pub val_fake: f64,
    /// Mean clean-minus-corrupted score gap, when the history records it.
    pub anchor_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub mode: ConvergenceMode,
    pub evidence: Evidence,
    pub window: usize,
    pub tol: f64,
}

/// Mean of the values of the `window` highest epochs of one series.
fn window_mean(history: &TrainHistory, split: HistorySplit, name: &str, window: usize) -> Result<f64> {
    let by_epoch: BTreeMap<usize, f64> = history
        .records
        .iter()
        .filter(|r| r.split == split && r.loss_name == name)
        .map(|r| (r.epoch, r.value))
        .collect();
    if by_epoch.len() < window {
        return Err(Error::contract(format!(
            "{} {name} spans {} epochs, the window needs {window}",
            split.as_str(),
            by_epoch.len()
        )));
    }
    Ok(by_epoch.values().rev().take(window).sum::<f64>() / window as f64)
}

/// Labels the final `window` epochs of a history. Loss values follow the
/// history convention: per-label mean squared error against ±1, so an
/// undecided critic sits at 1.0 and a memorizing one at 2.0 on real masks.
pub fn classify_convergence(history: &TrainHistory, window: usize, tol: f64) -> Result<ConvergenceReport> {
    if window == 0 || !(tol.is_finite() && tol > 0.0) {
        return Err(Error::contract(format!("window {window} and tol {tol} must be positive")));
    }
    use HistorySplit::{Train, Val};
    let evidence = Evidence {
        train_real: window_mean(history, Train, names::DISC_REAL, window)?,
        train_fake: window_mean(history, Train, names::DISC_FAKE, window)?,
        val_real: window_mean(history, Val, names::DISC_REAL, window)?,
        val_fake: window_mean(history, Val, names::DISC_FAKE, window)?,
        anchor_gap: window_mean(history, Val, names::ANCHOR_GAP, window).ok(),
    };
    Ok(ConvergenceReport { mode: mode_of(&evidence, tol), evidence, window, tol })
}

fn mode_of(e: &Evidence, tol: f64) -> ConvergenceMode {
    let near = |v: f64, t: f64| (v - t).abs() <= tol;
    if near(e.val_real, 0.0) && near(e.val_fake, 0.0) {
        ConvergenceMode::Discriminative
    } else if near(e.val_real, 2.0) && near(e.val_fake, 0.0) {
        ConvergenceMode::Memorization
    } else if near(e.train_real, 1.0) && near(e.train_fake, 1.0) && e.anchor_gap.is_some_and(|g| g < tol) {
        // same losses as the equilibrium, but corrupted masks are no longer ranked lower
        ConvergenceMode::ForgettingCollapse
    } else if near(e.val_real, 1.0) && near(e.val_fake, 1.0) {
        ConvergenceMode::Equilibrium
    } else {
        ConvergenceMode::Undetermined
    }
}

/// Probability that a random clean score exceeds a random corrupted one,
/// ties counting one half.
pub fn auc(clean: &[f64], corrupted: &[f64]) -> Result<f64> {
    if clean.len() < MIN_AUC_SAMPLES || corrupted.len() < MIN_AUC_SAMPLES {
        return Err(Error::contract(format!(
            "need at least {MIN_AUC_SAMPLES} scores per class, got {} and {}",
            clean.len(),
            corrupted.len()
        )));
    }
    if clean.iter().chain(corrupted).any(|v| !v.is_finite()) {
        return Err(Error::contract("scores must be finite"));
    }
    // rank-sum with midranks
    let mut all: Vec<(f64, bool)> = clean.iter().map(|&v| (v, true)).chain(corrupted.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (clean.len() as f64, corrupted.len() as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC of critic scores on one-hot `[n, c, h, w]` batches of clean and corrupted masks.
pub fn corrupted_detection_auc<T: Real>(disc: &Discriminator<T>, clean_masks: &Tensor<T>, corrupted_masks: &Tensor<T>) -> Result<f64> {
    if clean_masks.shape()[1..] != corrupted_masks.shape()[1..] {
        return Err(Error::Shape(format!("{:?} vs {:?}", clean_masks.shape(), corrupted_masks.shape())));
    }
    let s = |m: &Tensor<T>| disc.score(m).into_iter().map(|v| v.to_f64()).collect::<Vec<_>>();
    auc(&s(clean_masks), &s(corrupted_masks))
}
