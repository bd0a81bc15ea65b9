//! Synthetic data, preprocessing, distribution shifts, fake-anchor
//! corruption and discriminator-input augmentation.

mod augment;
mod corrupt;
pub mod io;
mod preprocess;
mod shift;
mod split;
mod synth;
mod types;

pub use io::{read_split, read_volume, write_split, write_volume, DatasetInfo, SliceSidecar, SPLIT_NAMES};
pub use augment::{augment_batch, augment_discriminator_input, AugmentParams};
pub use corrupt::{corrupt_labels, corrupt_mask, patch_side, CorruptionParams};
pub use preprocess::{median_iqr, preprocess_volume, quantile, Recipe};
pub use shift::{apply_domain_shift, shift_volume, ShiftParams};
pub use split::{partition_labelled, split_patients, split_three, DataSplit, PatientSplit, TrainPools, DEFAULT_FRACTIONS};
pub use synth::{generate_synthetic_dataset, SYNTH_SPACING};
pub use types::*;
