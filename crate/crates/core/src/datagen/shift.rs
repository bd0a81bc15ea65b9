use super::types::{Image, PatientVolume, Slice};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Intensity distribution shift applied to preprocessed images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    pub gamma: f64,
    pub bias_field_amplitude: f64,
    pub noise_std: f64,
    pub contrast_scale: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl ShiftParams {
    pub const IDENTITY: Self = Self { gamma: 1.0, bias_field_amplitude: 0.0, noise_std: 0.0, contrast_scale: 1.0 };

    /// The shift written to the test split by `synth --shift`.
    pub const BENCHMARK: Self = Self { gamma: 1.6, bias_field_amplitude: 0.3, noise_std: 0.1, contrast_scale: 0.7 };

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.contrast_scale > 0.0 && self.contrast_scale.is_finite()) {
            return Err(Error::config(format!("contrast_scale must be positive, got {}", self.contrast_scale)));
        }
        if !(self.bias_field_amplitude >= 0.0 && self.noise_std >= 0.0) {
            return Err(Error::config("bias field amplitude and noise std must be non-negative"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Smooth field in `[-1, 1]`: a normalized sum of two random low-frequency
/// plane waves.
fn bias_field(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let theta = rng.random_range(0.0..2.0 * PI);
            let freq = rng.random_range(0.4..1.0);
            (freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let mut field = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (ny, nx) = (y as f64 / h as f64, x as f64 / w as f64);
            let v: f64 = waves.iter().map(|&(fx, fy, p)| (PI * (fx * nx + fy * ny) + p).sin()).sum();
            field.push(v / waves.len() as f64);
        }
    }
    field
}

/// `x ↦ c·(sign(x)|x|^γ·(1 + a·b(p)) + n)`, where `b` is a smooth bias field
/// and `n ~ N(0, σ²)`, both drawn from `seed`. Spacing and id are preserved.
pub fn apply_domain_shift<T: Real>(image: &Image<T>, params: &ShiftParams, seed: u64) -> Result<Image<T>> {
    params.validate()?;
    let mut rng = seed::rng(seed);
    let field = (params.bias_field_amplitude > 0.0).then(|| bias_field(image.height, image.width, &mut rng));
    shift_with(image, params, field.as_deref(), &mut rng)
}

fn shift_with<T: Real>(image: &Image<T>, params: &ShiftParams, field: Option<&[f64]>, rng: &mut impl Rng) -> Result<Image<T>> {
    if params.is_identity() {
        return Ok(image.clone());
    }
    let normal = (params.noise_std > 0.0).then(|| Normal::new(0.0, params.noise_std).expect("valid std"));
    let pixels = image
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let x = p.to_f64();
            let mut v = if params.gamma == 1.0 { x } else { x.signum() * x.abs().powf(params.gamma) };
            if let Some(f) = field {
                v *= 1.0 + params.bias_field_amplitude * f[i];
            }
            if let Some(n) = &normal {
                v += n.sample(rng);
            }
            T::from_f64(v * params.contrast_scale)
        })
        .collect();
    Image::new(image.height, image.width, pixels, image.spacing, image.patient_id.clone())
}

/// Shifts every slice of a volume with one bias field per subject and fresh
/// noise per slice.
pub fn shift_volume<T: Real>(volume: &PatientVolume<T>, params: &ShiftParams, seed: u64) -> Result<PatientVolume<T>> {
    params.validate()?;
    let subject_seed = seed::derive_seed(seed, &format!("shift/{}", volume.patient_id));
    let (h, w, _) = volume.geometry()?;
    let field = (params.bias_field_amplitude > 0.0).then(|| bias_field(h, w, &mut seed::rng(subject_seed)));
    let slices = volume
        .slices
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut rng = seed::rng(seed::derive_indexed(subject_seed, "noise", k as u64));
            let image = shift_with(&s.image, params, field.as_deref(), &mut rng)?;
            Ok(Slice { image, mask: s.mask.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatientVolume { patient_id: volume.patient_id.clone(), slices })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(values: Vec<f64>) -> Image<f64> {
        let n = (values.len() as f64).sqrt() as usize;
        Image::new(n, n, values, [1.0, 1.0], "p").unwrap()
    }

    #[test]
    fn identity_is_exact() {
        let im = image((0..16).map(|i| i as f64 * 0.3 - 2.0).collect());
        assert_eq!(apply_domain_shift(&im, &ShiftParams::IDENTITY, 5).unwrap(), im);
    }

    #[test]
    fn gamma_on_constant_image() {
        let im = image(vec![0.7; 9]);
        let p = ShiftParams { gamma: 2.0, ..ShiftParams::IDENTITY };
        let out = apply_domain_shift(&im, &p, 0).unwrap();
        assert!(out.pixels.iter().all(|&v| (v - 0.49).abs() < 1e-12));
        let neg = apply_domain_shift(&image(vec![-0.5; 4]), &p, 0).unwrap();
        assert!(neg.pixels.iter().all(|&v| (v + 0.25).abs() < 1e-12));
    }

    #[test]
    fn noise_is_reproducible() {
        let im = image(vec![0.1; 64]);
        let p = ShiftParams { noise_std: 0.1, ..ShiftParams::IDENTITY };
        let a = apply_domain_shift(&im, &p, 3).unwrap();
        assert_eq!(a, apply_domain_shift(&im, &p, 3).unwrap());
        assert_ne!(a, apply_domain_shift(&im, &p, 4).unwrap());
        assert_ne!(a, im);
    }

    #[test]
    fn rejects_non_positive_gamma() {
        let im = image(vec![1.0; 4]);
        for g in [0.0, -1.0] {
            let p = ShiftParams { gamma: g, ..ShiftParams::IDENTITY };
            assert!(matches!(apply_domain_shift(&im, &p, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn contrast_scales_linearly() {
        let im = image(vec![0.5, -1.0, 2.0, 0.0]);
        let p = ShiftParams { contrast_scale: 0.5, ..ShiftParams::IDENTITY };
        assert_eq!(apply_domain_shift(&im, &p, 0).unwrap().pixels, vec![0.25, -0.5, 1.0, 0.0]);
    }

    #[test]
    fn volume_shift_keeps_masks() {
        let vols = crate::datagen::generate_synthetic_dataset::<f64>(1, 3, 32, 3, 0).unwrap();
        let shifted = shift_volume(&vols[0], &ShiftParams::BENCHMARK, 9).unwrap();
        for (a, b) in vols[0].slices.iter().zip(&shifted.slices) {
            assert_eq!(a.mask, b.mask);
            assert_ne!(a.image.pixels, b.image.pixels);
        }
    }
}
