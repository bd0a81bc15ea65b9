use super::types::Mask;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed;
use rand::Rng;

/// Corruption recipe for fake anchors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionParams {
    /// Patch side as a fraction of the (shorter) image side.
    pub patch_frac: f64,
    pub flip_prob: f64,
    pub n_swaps: usize,
}

impl Default for CorruptionParams {
    fn default() -> Self {
        Self { patch_frac: 0.1, flip_prob: 0.05, n_swaps: 2 }
    }
}

/// Side in pixels of a corruption patch.
pub fn patch_side(height: usize, width: usize, patch_frac: f64) -> usize {
    (patch_frac * height.min(width) as f64).round() as usize
}

/// Label-map corruption: `n_swaps` exchanges of two non-overlapping square
/// patches, then every pixel is redrawn uniformly over the classes with
/// probability `flip_prob`.
pub fn corrupt_labels(labels: &mut [u8], height: usize, width: usize, classes: usize, params: &CorruptionParams, rng: &mut impl Rng) -> Result<()> {
    if !(params.patch_frac > 0.0 && params.patch_frac < 1.0) {
        return Err(Error::config(format!("patch_frac must lie in (0, 1), got {}", params.patch_frac)));
    }
    if !(0.0..=1.0).contains(&params.flip_prob) {
        return Err(Error::config(format!("flip_prob must lie in [0, 1], got {}", params.flip_prob)));
    }
    let side = patch_side(height, width, params.patch_frac).max(1);
    // two non-overlapping patches must fit along at least one axis
    if side > height.min(width) || (2 * side > height && 2 * side > width) {
        return Err(Error::config(format!("{side}px patches do not fit a {height}x{width} mask")));
    }
    for _ in 0..params.n_swaps {
        // joint rejection: some first positions admit no disjoint partner
        let ((y1, x1), (y2, x2)) = loop {
            let a = (rng.random_range(0..=height - side), rng.random_range(0..=width - side));
            let b = (rng.random_range(0..=height - side), rng.random_range(0..=width - side));
            if a.0.abs_diff(b.0) >= side || a.1.abs_diff(b.1) >= side {
                break (a, b);
            }
        };
        for dy in 0..side {
            for dx in 0..side {
                labels.swap((y1 + dy) * width + x1 + dx, (y2 + dy) * width + x2 + dx);
            }
        }
    }
    if params.flip_prob > 0.0 {
        for l in labels.iter_mut() {
            if rng.random_bool(params.flip_prob) {
                *l = rng.random_range(0..classes) as u8;
            }
        }
    }
    Ok(())
}

/// Seeded corruption of a one-hot mask; the result is one-hot.
pub fn corrupt_mask<T: Real>(mask: &Mask<T>, patch_frac: f64, flip_prob: f64, n_swaps: usize, seed: u64) -> Result<Mask<T>> {
    let mut labels = mask.labels();
    let params = CorruptionParams { patch_frac, flip_prob, n_swaps };
    corrupt_labels(&mut labels, mask.height, mask.width, mask.classes, &params, &mut seed::rng(seed))?;
    Mask::from_labels(mask.height, mask.width, mask.classes, &labels)
}
