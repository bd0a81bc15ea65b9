//! Ablation rows. The component table removes one ingredient per row,
//! cumulatively; the anchor table varies the corruption used as fake anchors
//! and scores before adaptation.

use advtt::train::AnchorKind;
use serde::Serialize;

/// Component ablation, full model first.
pub const TABLE_ROWS: [&str; 5] = ["full", "no_ttt", "no_fake_anchors", "no_smoothness", "no_adaptor"];
/// Fake-anchor ablation.
pub const ANCHOR_ROWS: [&str; 5] = ["anchors_none", "patch_swap", "binary_noise", "both", "both_ttt"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Toggles {
    pub adaptor: bool,
    pub smoothness: bool,
    /// `None` disables fake anchors.
    pub anchors: Option<AnchorKindKey>,
}

/// Orderable stand-in for [`AnchorKind`], so toggles can key a cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKindKey {
    PatchSwap,
    BinaryNoise,
    Both,
}

impl From<AnchorKindKey> for AnchorKind {
    fn from(k: AnchorKindKey) -> Self {
        match k {
            AnchorKindKey::PatchSwap => AnchorKind::PatchSwap,
            AnchorKindKey::BinaryNoise => AnchorKind::BinaryNoise,
            AnchorKindKey::Both => AnchorKind::Both,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
    pub ttt: bool,
    /// The complete method, against which the other rows compare.
    pub reference: bool,
}

impl AblationRow {
    pub fn parse(name: &str) -> Result<Self, String> {
        use AnchorKindKey::*;
        let t = |adaptor, smoothness, anchors| Toggles { adaptor, smoothness, anchors };
        let (toggles, ttt) = match name {
            "full" | "both_ttt" => (t(true, true, Some(Both)), true),
            "no_ttt" | "both" => (t(true, true, Some(Both)), false),
            "no_fake_anchors" | "anchors_none" => (t(true, true, None), false),
            "no_smoothness" => (t(true, false, None), false),
            "no_adaptor" => (t(false, false, None), false),
            "patch_swap" => (t(true, true, Some(PatchSwap)), false),
            "binary_noise" => (t(true, true, Some(BinaryNoise)), false),
            _ => {
                let known: Vec<&str> = TABLE_ROWS.iter().chain(&ANCHOR_ROWS).copied().collect();
                return Err(format!("unknown ablation row {name:?} (known: {})", known.join(", ")));
            }
        };
        Ok(Self { name: name.to_owned(), toggles, ttt, reference: matches!(name, "full" | "both_ttt") })
    }
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}
