//! Bundle persistence: `<dir>/model.bin` holds every parameter and buffer as
//! little-endian f64, `<dir>/model.json` describes the layout.

use crate::error::{Error, Result};
use crate::nets::{init_models, ModelBundle, ModelConfig};
use crate::nn::Module;
use crate::scalar::Real;
use crate::train::{names, HistorySplit, TrainHistory};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const BLOB_FILE: &str = "model.bin";
pub const MANIFEST_FILE: &str = "model.json";
const FORMAT: &str = "advtt-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Offset in values (not bytes).
    pub offset: usize,
    pub len: usize,
}

/// Where in training the stored parameters come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    /// Validation supervised loss at that epoch.
    pub val_loss: Option<f64>,
    pub epochs_run: usize,
}

impl TrainingInfo {
    /// Reads the kept epoch off a history: the first minimum of the
    /// validation supervised loss.
    pub fn from_history(history: &TrainHistory) -> Self {
        let best = history
            .records
            .iter()
            .filter(|r| r.split == HistorySplit::Val && r.loss_name == names::SUPERVISED)
            .fold(None, |acc: Option<(usize, f64)>, r| match acc {
                Some((_, b)) if b <= r.value => acc,
                _ => Some((r.epoch, r.value)),
            });
        Self { best_epoch: best.map(|b| b.0), val_loss: best.map(|b| b.1), epochs_run: history.n_epochs() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    /// Scalar type the bundle was trained in.
    pub scalar: String,
    pub model: ModelConfig,
    pub seed: u64,
    pub training: TrainingInfo,
    pub tensors: Vec<TensorEntry>,
    /// Hex parameter digests, for quick comparison.
    pub digests: Vec<(String, String)>,
}

/// Every stored buffer of a bundle, by name, in a fixed order.
fn buffers<T: Real>(b: &mut ModelBundle<T>) -> Vec<(String, &mut Vec<T>)> {
    let mut out: Vec<(String, &mut Vec<T>)> = Vec::new();
    for (i, p) in b.adaptor.params_mut().into_iter().enumerate() {
        out.push((format!("adaptor.{i}"), &mut p.value));
    }
    let (seg_params, norms) = {
        let seg = &mut b.segmentor;
        // parameters and batch-norm buffers borrow disjoint fields of each block
        let ptrs: Vec<*mut Vec<T>> = seg.params_mut().into_iter().map(|p| &mut p.value as *mut Vec<T>).collect();
        let norms: Vec<(*mut Vec<T>, *mut Vec<T>)> =
            seg.batch_norms_mut().into_iter().map(|n| (&mut n.running_mean as *mut Vec<T>, &mut n.running_var as *mut Vec<T>)).collect();
        (ptrs, norms)
    };
    // SAFETY: each pointer targets a distinct Vec inside `b.segmentor`, which
    // stays mutably borrowed by `b` for the lifetime of the returned list.
    unsafe {
        for (i, p) in seg_params.into_iter().enumerate() {
            out.push((format!("segmentor.{i}"), &mut *p));
        }
        for (j, (m, v)) in norms.into_iter().enumerate() {
            out.push((format!("segmentor.bn{j}.running_mean"), &mut *m));
            out.push((format!("segmentor.bn{j}.running_var"), &mut *v));
        }
    }
    let d = &mut b.discriminator;
    let (convs, fc, spectral) = (&mut d.convs, &mut d.fc, &mut d.spectral);
    let mut k = 0;
    for c in convs.iter_mut() {
        out.push((format!("discriminator.{k}"), &mut c.weight.value));
        out.push((format!("discriminator.{}", k + 1), &mut c.bias.value));
        k += 2;
    }
    out.push((format!("discriminator.{k}"), &mut fc.weight.value));
    out.push((format!("discriminator.{}", k + 1), &mut fc.bias.value));
    if let Some(sn) = spectral.as_mut() {
        for (l, s) in sn.iter_mut().enumerate() {
            out.push((format!("discriminator.sn{l}.u"), &mut s.u));
            out.push((format!("discriminator.sn{l}.v"), &mut s.v));
        }
    }
    if let Some(dec) = b.decoder.as_mut() {
        for (i, p) in dec.params_mut().into_iter().enumerate() {
            out.push((format!("decoder.{i}"), &mut p.value));
        }
    }
    out
}

/// Writes the bundle into `dir` (created if needed).
pub fn save_bundle<T: Real>(dir: &Path, bundle: &ModelBundle<T>, training: TrainingInfo) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut copy = bundle.clone();
    let mut tensors = Vec::new();
    let mut bytes = Vec::new();
    let mut offset = 0;
    for (name, values) in buffers(&mut copy) {
        tensors.push(TensorEntry { name, offset, len: values.len() });
        offset += values.len();
        for v in values.iter() {
            bytes.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
    let d = bundle.digests();
    let mut digests = vec![
        ("adaptor".to_owned(), format!("{:016x}", d.adaptor)),
        ("segmentor".to_owned(), format!("{:016x}", d.segmentor)),
        ("discriminator".to_owned(), format!("{:016x}", d.discriminator)),
    ];
    if let Some(dd) = d.decoder {
        digests.push(("decoder".to_owned(), format!("{dd:016x}")));
    }
    let manifest = CheckpointManifest {
        format: FORMAT.to_owned(),
        version: 1,
        scalar: T::NAME.to_owned(),
        model: bundle.config.clone(),
        seed: bundle.seed,
        training,
        tensors,
        digests,
    };
    fs::write(dir.join(BLOB_FILE), bytes)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn checkpoint_exists(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).is_file() && dir.join(BLOB_FILE).is_file()
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    if !checkpoint_exists(dir) {
        return Err(Error::Missing { what: "checkpoint".into(), path: dir.display().to_string() });
    }
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
}

/// Reads a bundle written by [`save_bundle`].
pub fn load_bundle<T: Real>(dir: &Path) -> Result<ModelBundle<T>> {
    let manifest = read_manifest(dir)?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::Format(format!("unsupported checkpoint {} v{}", manifest.format, manifest.version)));
    }
    let raw = fs::read(dir.join(BLOB_FILE))?;
    if raw.len() % 8 != 0 {
        return Err(Error::Format(format!("{BLOB_FILE}: {} bytes is not a whole number of f64 values", raw.len())));
    }
    let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut bundle: ModelBundle<T> = init_models(&manifest.model, manifest.seed)?;
    let slots = buffers(&mut bundle);
    if slots.len() != manifest.tensors.len() {
        return Err(Error::Format(format!("checkpoint lists {} tensors, model has {}", manifest.tensors.len(), slots.len())));
    }
    for ((name, slot), entry) in slots.into_iter().zip(&manifest.tensors) {
        if name != entry.name || slot.len() != entry.len {
            return Err(Error::Format(format!("tensor {} ({}) does not match {name} ({})", entry.name, entry.len, slot.len())));
        }
        let src = values
            .get(entry.offset..entry.offset + entry.len)
            .ok_or_else(|| Error::Format(format!("tensor {} lies outside the blob", entry.name)))?;
        for (d, &s) in slot.iter_mut().zip(src) {
            *d = T::from_f64(s);
        }
    }
    Ok(bundle)
}
