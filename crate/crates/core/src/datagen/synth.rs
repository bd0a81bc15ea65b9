use super::types::{Image, Mask, PatientVolume, Slice};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

/// Pixel spacing (mm) of generated volumes.
pub const SYNTH_SPACING: f64 = 1.5;

/// Pose, size and texture of one synthetic subject.
#[derive(Clone, Debug)]
struct Anatomy {
    cx: f64,
    cy: f64,
    angle: f64,
    aspect: f64,
    /// Inner disk radius as a fraction of the image side.
    r_inner: f64,
    thickness: f64,
    /// Direction of the attached blob.
    side: f64,
    blob: (f64, f64),
    body: (f64, f64),
    intensity: Vec<f64>,
    background: f64,
    body_level: f64,
    waves: [(f64, f64, f64); 3],
    distractors: Vec<(f64, f64, f64)>,
}

impl Anatomy {
    fn sample(classes: usize, rng: &mut impl Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let mut intensity = vec![0.0; classes];
        intensity[0] = 0.0;
        if classes > 1 {
            intensity[1] = u(0.82, 0.95);
        }
        if classes > 2 {
            intensity[2] = u(0.38, 0.50);
        }
        for (k, v) in intensity.iter_mut().enumerate().skip(3) {
            *v = if k == 3 { u(0.65, 0.75) } else { u(0.55, 0.62) };
        }
        let waves = [
            (u(0.5, 2.0), u(0.0, 2.0 * PI), u(0.0, 2.0 * PI)),
            (u(0.5, 2.0), u(0.0, 2.0 * PI), u(0.0, 2.0 * PI)),
            (u(0.5, 2.0), u(0.0, 2.0 * PI), u(0.0, 2.0 * PI)),
        ];
        let n_distract = 2 + (u(0.0, 2.0) as usize);
        let distractors = (0..n_distract).map(|_| (u(0.15, 0.85), u(0.15, 0.85), u(0.025, 0.045))).collect();
        Self {
            cx: 0.5 + u(-0.08, 0.08),
            cy: 0.5 + u(-0.08, 0.08),
            angle: u(0.0, PI),
            aspect: u(0.85, 1.18),
            r_inner: u(0.09, 0.14),
            thickness: u(0.045, 0.07),
            side: u(0.0, 2.0 * PI),
            blob: (u(0.09, 0.13), u(0.06, 0.09)),
            body: (u(0.40, 0.47), u(0.36, 0.44)),
            intensity,
            background: u(0.02, 0.08),
            body_level: u(0.22, 0.32),
            waves,
            distractors,
        }
    }
}

/// Renders one slice: the label map first, then intensities from labels.
fn render_slice(a: &Anatomy, size: usize, classes: usize, scale: f64, drift: (f64, f64), noise: &mut impl FnMut() -> f64) -> (Vec<f64>, Vec<u8>) {
    let s = size as f64;
    let (cx, cy) = ((a.cx + drift.0) * s, (a.cy + drift.1) * s);
    let (ca, sa) = (a.angle.cos(), a.angle.sin());
    let r1 = a.r_inner * scale * s;
    let r2 = r1 + a.thickness * s;
    let outer = r2 * a.aspect.max(1.0 / a.aspect);
    let (bx, by) = (cx + (outer + 0.45 * a.blob.0 * s) * a.side.cos(), cy + (outer + 0.45 * a.blob.0 * s) * a.side.sin());
    let extras: Vec<(f64, f64, f64)> = (4..classes)
        .map(|k| {
            let phi = a.side + PI * (0.55 + 0.3 * (k - 4) as f64);
            let r = (0.035 + 0.005 * (k % 3) as f64) * s;
            let d = outer + r + 0.04 * s;
            (cx + d * phi.cos(), cy + d * phi.sin(), r)
        })
        .collect();
    let mut labels = vec![0u8; size * size];
    let mut pixels = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            let u = (dx * ca + dy * sa) / a.aspect;
            let v = (-dx * sa + dy * ca) * a.aspect;
            let rho = (u * u + v * v).sqrt();
            let mut label = 0u8;
            if classes > 1 && rho < r1 {
                label = 1;
            } else if classes > 2 && rho < r2 {
                label = 2;
            } else if classes > 3 {
                let (ex, ey) = (px - bx, py - by);
                let (bu, bv) = (ex * a.side.cos() + ey * a.side.sin(), -ex * a.side.sin() + ey * a.side.cos());
                let (ra, rb) = (a.blob.0 * s * scale.sqrt(), a.blob.1 * s * 1.6);
                if (bu / ra).powi(2) + (bv / rb).powi(2) < 1.0 {
                    label = 3;
                }
                for (k, &(ex, ey, r)) in extras.iter().enumerate() {
                    if label == 0 && (px - ex).powi(2) + (py - ey).powi(2) < r * r {
                        label = (4 + k) as u8;
                    }
                }
            }
            labels[y * size + x] = label;
            let (nx, ny) = (px / s, py / s);
            let texture: f64 = a.waves.iter().map(|&(f, p, q)| (2.0 * PI * f * nx + p).sin() * (2.0 * PI * f * ny + q).cos()).sum::<f64>() / 3.0;
            let in_body = ((nx - 0.5) / a.body.0).powi(2) + ((ny - 0.5) / a.body.1).powi(2) < 1.0;
            let mut value = if label > 0 {
                a.intensity[label as usize]
            } else if in_body {
                let spot = a.distractors.iter().any(|&(dx, dy, r)| (nx - dx).powi(2) + (ny - dy).powi(2) < r * r);
                if spot { 0.8 } else { a.body_level }
            } else {
                a.background
            };
            value += 0.05 * texture + noise();
            pixels[y * size + x] = value.max(0.0);
        }
    }
    (pixels, labels)
}

/// Synthetic cardiac-like subjects: a disk (class 1) inside an annulus
/// (class 2), an attached blob (class 3) and small satellite disks for any
/// further classes, on a textured body with unlabelled bright distractors.
///
/// Each subject draws its own pose, size and intensities; slices shrink from
/// base to apex. Masks are the label maps the intensities are rendered from.
pub fn generate_synthetic_dataset<T: Real>(n_patients: usize, slices_per_patient: usize, image_size: usize, n_classes: usize, seed: u64) -> Result<Vec<PatientVolume<T>>> {
    if n_classes < 2 {
        return Err(Error::config(format!("n_classes must be at least 2, got {n_classes}")));
    }
    if n_classes > 8 {
        return Err(Error::config(format!("at most 8 synthetic classes are supported, got {n_classes}")));
    }
    if image_size < 32 {
        return Err(Error::config(format!("image_size must be at least 32, got {image_size}")));
    }
    if n_patients == 0 || slices_per_patient == 0 {
        return Err(Error::config("need at least one patient and one slice"));
    }
    (0..n_patients)
        .map(|i| {
            let mut rng = seed::rng(seed::derive_indexed(seed, "synth/patient", i as u64));
            let anatomy = Anatomy::sample(n_classes, &mut rng);
            let id = format!("P{i:03}");
            let normal = Normal::new(0.0, 0.03).expect("valid std");
            let slices = (0..slices_per_patient)
                .map(|k| {
                    let t = if slices_per_patient > 1 { k as f64 / (slices_per_patient - 1) as f64 } else { 0.5 };
                    let scale = 1.12 - 0.4 * t;
                    let drift = (rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
                    let mut noise_rng = seed::rng(seed::derive_indexed(seed, &format!("synth/noise/{i}"), k as u64));
                    let mut noise = || normal.sample(&mut noise_rng);
                    let (pixels, labels) = render_slice(&anatomy, image_size, n_classes, scale, drift, &mut noise);
                    let image = Image::new(
                        image_size,
                        image_size,
                        pixels.into_iter().map(T::from_f64).collect(),
                        [SYNTH_SPACING; 2],
                        id.clone(),
                    )?;
                    let mask = Mask::from_labels(image_size, image_size, n_classes, &labels)?;
                    Ok(Slice { image, mask: Some(mask) })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PatientVolume { patient_id: id, slices })
        })
        .collect()
}
