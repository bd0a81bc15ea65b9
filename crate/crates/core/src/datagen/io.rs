//! On-disk datasets: `<root>/<split>/<patient>/slice_NNN.{f32,json,mask.u8}`
//! plus `<root>/dataset.json`.

use super::shift::ShiftParams;
use super::types::{Image, Mask, PatientVolume, Slice};
use crate::error::{Error, Result};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Per-slice JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSidecar {
    pub height: usize,
    pub width: usize,
    /// Number of label classes; 0 when the slice has no mask.
    pub classes: usize,
    pub spacing: [f64; 2],
    pub patient_id: String,
}

/// Dataset-level description written next to the split directories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub image_size: usize,
    pub n_classes: usize,
    pub slices_per_patient: usize,
    pub seed: u64,
    /// Shift applied to the test split, if any.
    pub test_shift: Option<ShiftParams>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetInfo {
    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        fs::write(root.join("dataset.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::Format(format!("patient id {id:?} is not a valid directory name")));
    }
    Ok(())
}

pub fn write_volume<T: Real>(dir: &Path, volume: &PatientVolume<T>) -> Result<()> {
    check_id(&volume.patient_id)?;
    fs::create_dir_all(dir)?;
    for (k, s) in volume.slices.iter().enumerate() {
        let stem = format!("slice_{k:03}");
        let im = &s.image;
        let bytes: Vec<u8> = im.pixels.iter().flat_map(|v| (v.to_f64() as f32).to_le_bytes()).collect();
        fs::write(dir.join(format!("{stem}.f32")), bytes)?;
        let sidecar = SliceSidecar {
            height: im.height,
            width: im.width,
            classes: s.mask.as_ref().map_or(0, |m| m.classes),
            spacing: im.spacing,
            patient_id: volume.patient_id.clone(),
        };
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar)?)?;
        if let Some(m) = &s.mask {
            fs::write(dir.join(format!("{stem}.mask.u8")), m.labels())?;
        }
    }
    Ok(())
}

pub fn read_volume<T: Real>(dir: &Path) -> Result<PatientVolume<T>> {
    let mut stems: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(str::to_owned))
        .filter(|n| n.starts_with("slice_"))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Format(format!("{} holds no slices", dir.display())));
    }
    let mut patient_id = None;
    let mut slices = Vec::with_capacity(stems.len());
    for stem in stems {
        let sidecar: SliceSidecar = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let raw = fs::read(dir.join(format!("{stem}.f32")))?;
        let n = sidecar.height * sidecar.width;
        if raw.len() != 4 * n {
            return Err(Error::Format(format!("{stem}.f32: expected {} bytes, found {}", 4 * n, raw.len())));
        }
        let pixels = raw.chunks_exact(4).map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        let image = Image::new(sidecar.height, sidecar.width, pixels, sidecar.spacing, sidecar.patient_id.clone())?;
        let mask_path = dir.join(format!("{stem}.mask.u8"));
        let mask = if sidecar.classes > 0 && mask_path.exists() {
            let labels = fs::read(&mask_path)?;
            Some(Mask::from_labels(sidecar.height, sidecar.width, sidecar.classes, &labels)?)
        } else {
            None
        };
        match &patient_id {
            None => patient_id = Some(sidecar.patient_id.clone()),
            Some(id) if *id != sidecar.patient_id => {
                return Err(Error::Format(format!("{} mixes patients {id} and {}", dir.display(), sidecar.patient_id)))
            }
            _ => {}
        }
        slices.push(Slice { image, mask });
    }
    let volume = PatientVolume { patient_id: patient_id.expect("at least one slice"), slices };
    volume.geometry()?;
    Ok(volume)
}

pub fn write_split<T: Real>(root: &Path, split: &str, volumes: &[PatientVolume<T>]) -> Result<()> {
    for v in volumes {
        write_volume(&root.join(split).join(&v.patient_id), v)?;
    }
    Ok(())
}

/// Reads every patient directory of a split, in sorted order.
pub fn read_split<T: Real>(root: &Path, split: &str) -> Result<Vec<PatientVolume<T>>> {
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(Error::Format(format!("missing split directory {}", dir.display())));
    }
    let mut dirs: Vec<_> = fs::read_dir(&dir)?.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    dirs.sort();
    dirs.iter().map(|d| read_volume(d)).collect()
}
