//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment; `include = path` splices
//! another file in place (relative to the including file), and later lines
//! override what it set. A key may appear once per file. Unknown keys are
//! rejected. Values set on the command line win over files, files over
//! defaults.

use advtt::datagen::ShiftParams;
use advtt::nets::{ModelConfig, DISCRIMINATOR_WIDTHS};
use advtt::train::{AnchorKind, TrainConfig};
use advtt::ttt::{TTTConfig, TttMode, TttUnit};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

const MAX_INCLUDE_DEPTH: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown configuration key {key:?}{}", origin_suffix(.origin))]
    UnknownKey { key: String, origin: Option<String> },
    #[error("bad value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("{origin}: {message}")]
    Syntax { origin: String, message: String },
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn origin_suffix(origin: &Option<String>) -> String {
    origin.as_ref().map(|o| format!(" at {o}")).unwrap_or_default()
}

/// Model family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gan,
    Causal,
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gan" => Ok(Self::Gan),
            "causal" => Ok(Self::Causal),
            _ => Err("expected gan or causal".into()),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gan => "gan",
            Self::Causal => "causal",
        })
    }
}

/// Which adaptation run `eval` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSource {
    Ttt,
    Continual,
}

impl EvalSource {
    pub fn dir_name(self) -> &'static str {
        match self {
            Self::Ttt => "ttt",
            Self::Continual => "continual",
        }
    }
}

impl FromStr for EvalSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ttt" => Ok(Self::Ttt),
            "continual" => Ok(Self::Continual),
            _ => Err("expected ttt or continual".into()),
        }
    }
}

impl fmt::Display for EvalSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_patients: usize,
    pub slices_per_patient: usize,
    pub image_size: usize,
    pub n_classes: usize,
    /// Apply `shift` to the test split when synthesizing.
    pub shift_test: bool,
    pub shift: ShiftParams,
    pub labelled_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_patients: 40,
            slices_per_patient: 8,
            image_size: 64,
            n_classes: 4,
            shift_test: false,
            shift: ShiftParams::BENCHMARK,
            labelled_frac: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub adaptor_width: usize,
    pub unet_depth: usize,
    pub unet_width: usize,
    pub disc_widths: Vec<usize>,
    pub residual_channels: usize,
    pub decoder_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            adaptor_width: m.adaptor_width,
            unet_depth: m.unet_depth,
            unet_width: m.unet_width,
            disc_widths: DISCRIMINATOR_WIDTHS.to_vec(),
            residual_channels: m.residual_channels,
            decoder_width: m.decoder_width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_boot: usize,
    pub source: EvalSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_boot: 10_000, source: EvalSource::Ttt }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateConfig {
    pub rows: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { rows: crate::ablate::TABLE_ROWS.iter().map(|s| s.to_string()).collect(), seeds: vec![0, 1, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseConfig {
    pub window: usize,
    pub tol: f64,
    /// History CSV; empty means `<run_dir>/history.csv`.
    pub history: String,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self { window: advtt::diagnostics::DEFAULT_WINDOW, tol: advtt::diagnostics::DEFAULT_TOL, history: String::new() }
    }
}

/// Every setting of one experiment. Module seeds derive from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run_dir: PathBuf,
    /// Dataset location; relative paths resolve against `run_dir`.
    pub data_dir: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub force: bool,
    pub model: Variant,
    pub data: DataConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub ttt: TTTConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub diagnose: DiagnoseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("run"),
            data_dir: PathBuf::from("data"),
            seed: 0,
            jobs: 1,
            force: false,
            model: Variant::Gan,
            data: DataConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            ttt: TTTConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            diagnose: DiagnoseConfig::default(),
        }
    }
}

/// Text form of one configuration value.
trait KvValue: Sized {
    fn parse_kv(s: &str) -> Result<Self, String>;
    fn format_kv(&self) -> String;
}

macro_rules! kv_via_fromstr {
    ($($t:ty),*) => {$(
        impl KvValue for $t {
            fn parse_kv(s: &str) -> Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn format_kv(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
kv_via_fromstr!(usize, u64, f64, bool, Variant, EvalSource);

impl KvValue for String {
    fn parse_kv(s: &str) -> Result<Self, String> {
        Ok(s.to_owned())
    }
    fn format_kv(&self) -> String {
        self.clone()
    }
}

impl KvValue for PathBuf {
    fn parse_kv(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Err("path is empty".into());
        }
        Ok(PathBuf::from(s))
    }
    fn format_kv(&self) -> String {
        self.display().to_string()
    }
}

impl KvValue for AnchorKind {
    fn parse_kv(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e: advtt::Error| e.to_string())
    }
    fn format_kv(&self) -> String {
        self.to_string()
    }
}

impl KvValue for TttMode {
    fn parse_kv(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e: advtt::Error| e.to_string())
    }
    fn format_kv(&self) -> String {
        self.to_string()
    }
}

impl KvValue for TttUnit {
    fn parse_kv(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e: advtt::Error| e.to_string())
    }
    fn format_kv(&self) -> String {
        self.to_string()
    }
}

impl KvValue for Option<usize> {
    fn parse_kv(s: &str) -> Result<Self, String> {
        if s == "none" {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|e: std::num::ParseIntError| e.to_string())
    }
    fn format_kv(&self) -> String {
        self.map_or_else(|| "none".to_owned(), |v| v.to_string())
    }
}

impl<T: KvValue> KvValue for Vec<T> {
    fn parse_kv(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse_kv(p.trim())).collect()
    }
    fn format_kv(&self) -> String {
        self.iter().map(T::format_kv).collect::<Vec<_>>().join(",")
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+ : $doc:literal;)*) => {
        /// Every accepted key with a one-line description.
        pub const KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        impl ExperimentConfig {
            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let bad = |reason: String| ConfigError::Value { key: key.to_owned(), value: value.to_owned(), reason };
                match key {
                    $($key => self$(.$field)+ = KvValue::parse_kv(value).map_err(bad)?,)*
                    _ => return Err(ConfigError::UnknownKey { key: key.to_owned(), origin: None }),
                }
                Ok(())
            }

            /// Text form of one key.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self$(.$field)+.format_kv()),)*
                    _ => None,
                }
            }
        }
    };
}

keys! {
    "run_dir" => run_dir: "directory receiving every artifact of the run";
    "data_dir" => data_dir: "dataset directory, relative to run_dir unless absolute";
    "seed" => seed: "root seed; module seeds derive from it";
    "jobs" => jobs: "worker threads for independent TTT";
    "force" => force: "overwrite existing outputs";
    "model" => model: "model family: gan or causal";
    "data.n_patients" => data.n_patients: "synthetic patients";
    "data.slices_per_patient" => data.slices_per_patient: "slices per synthetic patient";
    "data.image_size" => data.image_size: "side length of synthetic images";
    "data.n_classes" => data.n_classes: "label classes including background";
    "data.shift" => data.shift_test: "apply the intensity shift to the test split";
    "data.shift_gamma" => data.shift.gamma: "shift: gamma exponent";
    "data.shift_bias" => data.shift.bias_field_amplitude: "shift: bias field amplitude";
    "data.shift_noise" => data.shift.noise_std: "shift: additive noise std";
    "data.shift_contrast" => data.shift.contrast_scale: "shift: contrast scale";
    "data.labelled_frac" => data.labelled_frac: "fraction of training patients with paired masks";
    "net.adaptor_width" => net.adaptor_width: "adaptor hidden channels";
    "net.unet_depth" => net.unet_depth: "UNet resolution levels";
    "net.unet_width" => net.unet_width: "UNet channels at full resolution";
    "net.disc_widths" => net.disc_widths: "discriminator conv channels, five comma-separated values";
    "net.residual_channels" => net.residual_channels: "causal model: residual code channels";
    "net.decoder_width" => net.decoder_width: "causal model: decoder channels";
    "train.learning_rate" => train.learning_rate: "Adam learning rate";
    "train.batch_size" => train.batch_size: "batch size";
    "train.max_epochs" => train.max_epochs: "epoch cap";
    "train.val_patience" => train.val_patience: "early stopping patience in epochs";
    "train.max_iters_per_epoch" => train.max_iters_per_epoch: "iteration cap per epoch, 0 for none";
    "train.instance_noise_std" => train.instance_noise_std: "discriminator input noise std";
    "train.max_rotation" => train.max_rotation: "discriminator input rotation range (radians)";
    "train.max_shift_frac" => train.max_shift_frac: "discriminator input translation range (fraction of size)";
    "train.adv_weight_factor" => train.adv_weight_factor: "scale of the dynamic adversarial weight";
    "train.gp_lambda" => train.gp_lambda: "gradient penalty weight";
    "train.corrupted_fraction" => train.corrupted_fraction: "share of fake batches made of corrupted real masks";
    "train.patch_frac" => train.patch_frac: "patch swap side as a fraction of the image";
    "train.flip_prob" => train.flip_prob: "binary noise flip probability";
    "train.n_swaps" => train.n_swaps: "patch swaps per corrupted mask";
    "train.anchor_kind" => train.anchor_kind: "corruption: patch_swap, binary_noise or both";
    "train.use_adaptor" => train.use_adaptor: "train with the adaptor";
    "train.use_smoothness" => train.use_smoothness: "spectral norm, tanh and gradient penalty in the discriminator";
    "train.use_fake_anchors" => train.use_fake_anchors: "mix corrupted real masks into fake batches";
    "ttt.mode" => ttt.mode: "adaptation loss: adversarial, reconstruction or both";
    "ttt.unit" => ttt.unit: "adaptation unit: patient or slice";
    "ttt.patience" => ttt.patience: "steps without improvement before stopping";
    "ttt.max_iter" => ttt.max_iter: "step cap";
    "ttt.learning_rate" => ttt.learning_rate: "adaptor learning rate at test time";
    "ttt.freeze_after" => ttt.freeze_after: "continual: adapt only the first k subjects (none for all)";
    "eval.n_boot" => eval.n_boot: "bootstrap resamples for p-values";
    "eval.source" => eval.source: "adaptation run to score: ttt or continual";
    "ablate.rows" => ablate.rows: "ablation rows to run, comma-separated";
    "ablate.seeds" => ablate.seeds: "seeds averaged per ablation row";
    "diagnose.window" => diagnose.window: "final epochs inspected";
    "diagnose.tol" => diagnose.tol: "tolerance on loss means";
    "diagnose.history" => diagnose.history: "history CSV, empty for run_dir/history.csv";
}

/// One `key = value` assignment and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub origin: String,
}

/// Parses config text; `base` resolves includes.
pub fn parse_text(text: &str, origin: &str, base: Option<&Path>) -> Result<Vec<Assignment>, ConfigError> {
    parse_inner(text, origin, base, 0)
}

fn parse_inner(text: &str, origin: &str, base: Option<&Path>, depth: usize) -> Result<Vec<Assignment>, ConfigError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let at = format!("{origin}:{}", n + 1);
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { origin: at, message: format!("expected `key = value`, got {line:?}") });
        };
        let (key, value) = (k.trim(), v.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax { origin: at, message: "empty key".into() });
        }
        if key == "include" {
            if depth >= MAX_INCLUDE_DEPTH {
                return Err(ConfigError::Syntax { origin: at, message: "includes nested too deeply".into() });
            }
            let path = base.map_or_else(|| PathBuf::from(value), |b| b.join(value));
            let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
            out.extend(parse_inner(&text, &path.display().to_string(), path.parent(), depth + 1)?);
            continue;
        }
        if !seen.insert(key.to_owned()) {
            return Err(ConfigError::Syntax { origin: at, message: format!("{key} is set twice") });
        }
        out.push(Assignment { key: key.to_owned(), value: value.to_owned(), origin: at });
    }
    Ok(out)
}

pub fn parse_file(path: &Path) -> Result<Vec<Assignment>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
    parse_text(&text, &path.display().to_string(), path.parent())
}

impl ExperimentConfig {
    pub fn apply(&mut self, assignments: &[Assignment]) -> Result<(), ConfigError> {
        for a in assignments {
            self.set(&a.key, &a.value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { key, origin: Some(a.origin.clone()) },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides` (command-line values).
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply(&parse_file(f)?)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in reference order, as a loadable config file.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: advtt::Error| ConfigError::Invalid(e.to_string());
        if self.jobs == 0 {
            return Err(ConfigError::Invalid("jobs must be at least 1".into()));
        }
        if self.data.n_patients == 0 || self.data.slices_per_patient == 0 {
            return Err(ConfigError::Invalid("the dataset needs patients and slices".into()));
        }
        if !(self.data.labelled_frac > 0.0 && self.data.labelled_frac <= 1.0) {
            return Err(ConfigError::Invalid(format!("data.labelled_frac must lie in (0, 1], got {}", self.data.labelled_frac)));
        }
        self.data.shift.validate().map_err(inv)?;
        self.ttt_config(false).validate().map_err(inv)?;
        self.model_config(self.data.image_size, self.data.n_classes).validate().map_err(inv)?;
        self.train_config().validate().map_err(inv)?;
        if self.eval.n_boot == 0 {
            return Err(ConfigError::Invalid("eval.n_boot must be positive".into()));
        }
        if self.diagnose.window == 0 || !(self.diagnose.tol > 0.0) {
            return Err(ConfigError::Invalid("diagnose.window and diagnose.tol must be positive".into()));
        }
        for r in &self.ablate.rows {
            crate::ablate::AblationRow::parse(r).map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        if self.data_dir.is_absolute() {
            self.data_dir.clone()
        } else {
            self.run_dir.join(&self.data_dir)
        }
    }

    /// Network configuration for a dataset of the given geometry, with the
    /// training toggles applied.
    pub fn model_config(&self, image_size: usize, n_classes: usize) -> ModelConfig {
        let mut m = ModelConfig {
            image_size,
            n_classes,
            adaptor_width: self.net.adaptor_width,
            unet_depth: self.net.unet_depth,
            unet_width: self.net.unet_width,
            disc_widths: self.net.disc_widths.clone(),
            causal: self.model == Variant::Causal,
            residual_channels: self.net.residual_channels,
            decoder_width: self.net.decoder_width,
            ..ModelConfig::default()
        };
        self.train_config().apply_toggles(&mut m);
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn ttt_config(&self, continual: bool) -> TTTConfig {
        let mut t = TTTConfig { seed: self.seed, continual, ..self.ttt.clone() };
        if !continual {
            t.freeze_after = None;
        }
        t
    }
}
