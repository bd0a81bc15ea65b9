use super::types::{Mask, PatientVolume};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed;
use rand::seq::SliceRandom;

/// Default train/validation/test patient fractions.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.4, 0.2, 0.4];

/// Patient-level three-way partition.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientSplit<T> {
    pub train: Vec<PatientVolume<T>>,
    pub val: Vec<PatientVolume<T>>,
    pub test: Vec<PatientVolume<T>>,
}

/// Training data for semi-supervised learning.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPools<T> {
    /// Patients whose masks stay paired with their images.
    pub labelled: Vec<PatientVolume<T>>,
    /// Remaining patients, images only.
    pub unlabelled: Vec<PatientVolume<T>>,
    /// Masks of the unlabelled patients, used as unpaired real masks.
    pub unpaired_masks: Vec<Mask<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit<T> {
    pub train: TrainPools<T>,
    pub val: Vec<PatientVolume<T>>,
    pub test: Vec<PatientVolume<T>>,
}

/// Shuffles patients with `seed` and cuts them by `fractions`
/// (rounded train and validation counts; the rest is test).
pub fn split_three<T: Real>(mut dataset: Vec<PatientVolume<T>>, fractions: [f64; 3], seed: u64) -> Result<PatientSplit<T>> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let n = dataset.len();
    dataset.shuffle(&mut seed::rng_for(seed, "split/patients"));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let test = dataset.split_off(n_train + n_val);
    let val = dataset.split_off(n_train);
    Ok(PatientSplit { train: dataset, val, test })
}

/// Keeps masks for `ceil(labelled_frac · n)` randomly chosen training
/// patients; the others become image-only and donate their masks to the
/// unpaired pool.
pub fn partition_labelled<T: Real>(mut train: Vec<PatientVolume<T>>, labelled_frac: f64, seed: u64) -> Result<TrainPools<T>> {
    if !(labelled_frac > 0.0 && labelled_frac <= 1.0) {
        return Err(Error::config(format!("labelled fraction must lie in (0, 1], got {labelled_frac}")));
    }
    let n_labelled = ((labelled_frac * train.len() as f64).ceil() as usize).min(train.len());
    train.shuffle(&mut seed::rng_for(seed, "split/labelled"));
    let rest = train.split_off(n_labelled);
    let unpaired_masks = rest.iter().flat_map(|v| v.slices.iter().filter_map(|s| s.mask.clone())).collect();
    let unlabelled = rest.iter().map(|v| v.without_masks()).collect();
    Ok(TrainPools { labelled: train, unlabelled, unpaired_masks })
}

pub fn split_patients<T: Real>(dataset: Vec<PatientVolume<T>>, fractions: [f64; 3], labelled_frac: f64, seed: u64) -> Result<DataSplit<T>> {
    let PatientSplit { train, val, test } = split_three(dataset, fractions, seed)?;
    Ok(DataSplit { train: partition_labelled(train, labelled_frac, seed)?, val, test })
}
