use super::types::{Image, Mask, PatientVolume, Slice};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Target geometry of the preprocessing step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recipe {
    pub spacing: f64,
    pub size: usize,
}

impl Recipe {
    /// Cardiac cine MRI: 224² crops at 1.51 mm.
    pub const CARDIAC: Self = Self { spacing: 1.51, size: 224 };
}

/// Quantile with linear interpolation between order statistics (type 7).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(median, IQR)` of a sample.
pub fn median_iqr(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    (quantile(&v, 0.5), quantile(&v, 0.75) - quantile(&v, 0.25))
}

fn resampled_len(n: usize, spacing: f64, target: f64) -> usize {
    ((n as f64 * spacing / target).round() as usize).max(1)
}

/// Bilinear resampling on pixel centres, edge-clamped.
fn resample_bilinear(src: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn resample_nearest(src: &[u8], h: usize, w: usize, nh: usize, nw: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let sy = (((y as f64 + 0.5) * h as f64 / nh as f64) as usize).min(h - 1);
        for x in 0..nw {
            let sx = (((x as f64 + 0.5) * w as f64 / nw as f64) as usize).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

/// Centre crop / zero pad a row-major plane to `size × size`.
fn crop_or_pad<V: Copy>(src: &[V], h: usize, w: usize, size: usize, fill: V) -> Vec<V> {
    let mut out = vec![fill; size * size];
    // offsets of the source window (crop) and the destination window (pad)
    let (sy0, dy0) = if h >= size { ((h - size) / 2, 0) } else { (0, (size - h) / 2) };
    let (sx0, dx0) = if w >= size { ((w - size) / 2, 0) } else { (0, (size - w) / 2) };
    let (rows, cols) = (h.min(size), w.min(size));
    for r in 0..rows {
        let s = (sy0 + r) * w + sx0;
        let d = (dy0 + r) * size + dx0;
        out[d..d + cols].copy_from_slice(&src[s..s + cols]);
    }
    out
}

/// Resamples every slice to `target_spacing` (bilinear images, nearest-neighbour
/// masks), centre-crops or zero-pads to `target_size²`, then maps intensities to
/// `(x − median)/IQR` with statistics pooled over the whole volume.
pub fn preprocess_volume<T: Real>(volume: &PatientVolume<T>, target_spacing: f64, target_size: usize) -> Result<PatientVolume<T>> {
    if !(target_spacing > 0.0) || target_size == 0 {
        return Err(Error::config("target spacing and size must be positive"));
    }
    volume.geometry()?;
    let mut planes: Vec<(Vec<f64>, Option<Vec<u8>>, usize)> = Vec::with_capacity(volume.slices.len());
    for s in &volume.slices {
        let im = &s.image;
        let (mut h, mut w) = (im.height, im.width);
        let mut px: Vec<f64> = im.pixels.iter().map(|v| v.to_f64()).collect();
        let mut labels = s.mask.as_ref().map(|m| m.labels());
        let (nh, nw) = (resampled_len(h, im.spacing[0], target_spacing), resampled_len(w, im.spacing[1], target_spacing));
        if (nh, nw) != (h, w) {
            px = resample_bilinear(&px, h, w, nh, nw);
            labels = labels.map(|l| resample_nearest(&l, h, w, nh, nw));
            (h, w) = (nh, nw);
        }
        if (h, w) != (target_size, target_size) {
            px = crop_or_pad(&px, h, w, target_size, 0.0);
            labels = labels.map(|l| crop_or_pad(&l, h, w, target_size, 0u8));
        }
        planes.push((px, labels, s.mask.as_ref().map_or(0, |m| m.classes)));
    }
    let (median, iqr) = median_iqr(planes.iter().flat_map(|p| p.0.iter().copied()));
    if !(iqr > 0.0) || !iqr.is_finite() {
        return Err(Error::DegenerateVolume { patient_id: volume.patient_id.clone() });
    }
    let slices = planes
        .into_iter()
        .zip(&volume.slices)
        .map(|((px, labels, classes), s)| {
            let pixels = px.into_iter().map(|v| T::from_f64((v - median) / iqr)).collect();
            let image = Image::new(target_size, target_size, pixels, [target_spacing; 2], s.image.patient_id.clone())?;
            let mask = labels.map(|l| Mask::from_labels(target_size, target_size, classes, &l)).transpose()?;
            Ok(Slice { image, mask })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatientVolume { patient_id: volume.patient_id.clone(), slices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_synthetic_dataset;

    fn volume(h: usize, w: usize, spacing: f64, f: impl Fn(usize, usize, usize) -> f64) -> PatientVolume<f64> {
        let slices = (0..3)
            .map(|k| {
                let px = (0..h * w).map(|i| f(k, i / w, i % w)).collect();
                let labels: Vec<u8> = (0..h * w).map(|i| ((i / w) * 3 / h) as u8).collect();
                Slice {
                    image: Image::new(h, w, px, [spacing; 2], "v").unwrap(),
                    mask: Some(Mask::from_labels(h, w, 3, &labels).unwrap()),
                }
            })
            .collect();
        PatientVolume { patient_id: "v".into(), slices }
    }

    #[test]
    fn cardiac_recipe() {
        assert_eq!(Recipe::CARDIAC, Recipe { spacing: 1.51, size: 224 });
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(median_iqr([5.0, 1.0, 3.0]), (3.0, 2.0));
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let v = volume(8, 8, 1.0, |_, _, _| 3.0);
        assert!(matches!(preprocess_volume(&v, 1.0, 8), Err(Error::DegenerateVolume { .. })));
    }

    #[test]
    fn volume_at_target_keeps_geometry() {
        let v = volume(16, 16, 1.5, |k, y, x| (k * 7 + y * 3 + x * x) as f64 * 0.1);
        let out = preprocess_volume(&v, 1.5, 16).unwrap();
        for (a, b) in v.slices.iter().zip(&out.slices) {
            assert_eq!((b.image.height, b.image.width), (16, 16));
            assert_eq!(a.mask, b.mask);
        }
        let (m, iqr) = median_iqr(out.slices.iter().flat_map(|s| s.image.pixels.iter().copied()));
        assert!(m.abs() < 1e-5 && (iqr - 1.0).abs() < 1e-5);
    }

    #[test]
    fn resamples_then_crops() {
        // 40 px at 3 mm → 80 px at 1.5 mm → cropped to 64
        let v = volume(40, 40, 3.0, |_, y, x| (y + 2 * x) as f64);
        let out = preprocess_volume(&v, 1.5, 64).unwrap();
        let s = &out.slices[0];
        assert_eq!((s.image.height, s.image.width, s.image.spacing), (64, 64, [1.5, 1.5]));
        assert_eq!(s.mask.as_ref().unwrap().height, 64);
        // small inputs are zero-padded: the border holds the raw zero level
        let small = volume(10, 10, 1.5, |_, y, x| 1.0 + (y * 10 + x) as f64);
        let out = preprocess_volume(&small, 1.5, 16).unwrap();
        let border = out.slices[0].image.pixels[0];
        assert!(out.slices[0].image.pixels.iter().filter(|&&p| p == border).count() >= 16 * 16 - 100);
        assert_eq!(out.slices[0].mask.as_ref().unwrap().labels()[0], 0);
    }

    #[test]
    fn synthetic_volumes_normalize() {
        for vol in generate_synthetic_dataset::<f64>(3, 4, 32, 3, 5).unwrap() {
            let out = preprocess_volume(&vol, 1.5, 32).unwrap();
            let (m, iqr) = median_iqr(out.slices.iter().flat_map(|s| s.image.pixels.iter().copied()));
            assert!(m.abs() < 1e-5, "{m}");
            assert!((iqr - 1.0).abs() < 1e-5, "{iqr}");
        }
    }
}
