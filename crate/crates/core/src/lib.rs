//! Adversarial test-time training: a segmentation GAN whose stabilized mask
//! discriminator is re-used at inference to fine-tune a shallow adaptor on
//! each test subject.
//!
//! Numeric code is generic over [`Real`]; the aliases at the bottom of this
//! file fix the scalar type for the common cases.

pub mod causal;
pub mod checkpoint;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod ttt;

pub use error::{Error, Result};
pub use scalar::{Dual, Real};
pub use tensor::Tensor;

/// Scalar used by the command-line pipeline.
pub type Scalar = f32;
pub type Bundle = nets::ModelBundle<Scalar>;
pub type Split = datagen::DataSplit<Scalar>;
pub type Volume = datagen::PatientVolume<Scalar>;
pub type Adaptation = ttt::TTTResult<Scalar>;
