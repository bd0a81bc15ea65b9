use super::types::SoftMask;
use crate::scalar::Real;
use crate::seed;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::FRAC_PI_2;

/// Discriminator-input augmentation: roto-translation then instance noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub noise_std: f64,
    /// Rotation angle drawn from `[0, max_rot]` radians.
    pub max_rot: f64,
    /// Shift drawn per axis from `[-f, f]` times the side.
    pub max_shift_frac: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { noise_std: 0.1, max_rot: FRAC_PI_2, max_shift_frac: 0.1 }
    }
}

impl AugmentParams {
    pub const NONE: Self = Self { noise_std: 0.0, max_rot: 0.0, max_shift_frac: 0.0 };

    pub fn is_identity(&self) -> bool {
        self.noise_std <= 0.0 && self.max_rot <= 0.0 && self.max_shift_frac <= 0.0
    }
}

/// Augments one channel-major `c × h × w` map in place. Pixels mapped from
/// outside the frame read as background (channel 0 set, others clear).
fn augment_map<T: Real>(data: &mut [T], c: usize, h: usize, w: usize, p: &AugmentParams, rng: &mut impl Rng) {
    let theta = if p.max_rot > 0.0 { rng.random_range(0.0..=p.max_rot) } else { 0.0 };
    let (ty, tx) = if p.max_shift_frac > 0.0 {
        let f = p.max_shift_frac;
        (rng.random_range(-f..=f) * h as f64, rng.random_range(-f..=f) * w as f64)
    } else {
        (0.0, 0.0)
    };
    if theta != 0.0 || ty != 0.0 || tx != 0.0 {
        warp(data, c, h, w, theta, ty, tx);
    }
    if p.noise_std > 0.0 {
        let normal = Normal::new(0.0, p.noise_std).expect("valid std");
        for v in data.iter_mut() {
            *v = T::from_f64((v.to_f64() + normal.sample(rng)).clamp(0.0, 1.0));
        }
    } else {
        for v in data.iter_mut() {
            *v = T::from_f64(v.to_f64().clamp(0.0, 1.0));
        }
    }
}

/// Bilinear rotation by `theta` about the centre followed by a `(ty, tx)` shift.
fn warp<T: Real>(data: &mut [T], c: usize, h: usize, w: usize, theta: f64, ty: f64, tx: f64) {
    let src: Vec<f64> = data.iter().map(|v| v.to_f64()).collect();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (cos, sin) = (theta.cos(), theta.sin());
    let plane = h * w;
    let fetch = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            if ch == 0 { 1.0 } else { 0.0 }
        } else {
            src[ch * plane + y as usize * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            // inverse map: output pixel → source location
            let (dy, dx) = (y as f64 - cy - ty, x as f64 - cx - tx);
            let sy = cos * dy + sin * dx + cy;
            let sx = -sin * dy + cos * dx + cx;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * fetch(ch, y0, x0) + fx * fetch(ch, y0, x0 + 1))
                    + fy * ((1.0 - fx) * fetch(ch, y0 + 1, x0) + fx * fetch(ch, y0 + 1, x0 + 1));
                data[ch * plane + y * w + x] = T::from_f64(v);
            }
        }
    }
}

/// Random rotation in `[0, max_rot]`, random shift, Gaussian instance noise,
/// clipped to `[0, 1]`. The simplex is not restored.
pub fn augment_discriminator_input<T: Real>(mask: &SoftMask<T>, params: &AugmentParams, seed: u64) -> SoftMask<T> {
    let mut out = mask.clone();
    if !params.is_identity() {
        augment_map(&mut out.data, mask.classes, mask.height, mask.width, params, &mut seed::rng(seed));
    }
    out
}

/// Augments every sample of a `[n, c, h, w]` batch independently.
pub fn augment_batch<T: Real>(batch: &Tensor<T>, params: &AugmentParams, rng: &mut impl Rng) -> Tensor<T> {
    let mut out = batch.clone();
    if params.is_identity() {
        return out;
    }
    let [n, c, h, w] = batch.shape();
    for i in 0..n {
        augment_map(out.sample_mut(i), c, h, w, params, rng);
    }
    out
}
