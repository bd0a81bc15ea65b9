//! Minimal layer library with explicit forward caches and backward passes.

mod adam;
mod conv;
mod layers;
mod param;
mod spectral;

pub use adam::Adam;
pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvGeom};
pub use layers::*;
pub use param::{Module, Param};
pub use spectral::{spectral_normalize, top_singular_value, SpectralNorm};

pub(crate) use param::digest;
