use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Single-channel 2-D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities.
    pub pixels: Vec<T>,
    /// Millimetres per pixel (row, column).
    pub spacing: [f64; 2],
    pub patient_id: String,
}

impl<T: Real> Image<T> {
    pub fn new(height: usize, width: usize, pixels: Vec<T>, spacing: [f64; 2], patient_id: impl Into<String>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!("{height}x{width} image needs {} pixels, got {}", height * width, pixels.len())));
        }
        if !pixels.iter().all(|p| p.is_finite()) {
            return Err(Error::contract("image contains non-finite pixels"));
        }
        Ok(Self { height, width, pixels, spacing, patient_id: patient_id.into() })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.pixels[y * self.width + x]
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            spacing: self.spacing,
            patient_id: self.patient_id.clone(),
        }
    }

    /// `[1, 1, h, w]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec([1, 1, self.height, self.width], self.pixels.clone()).expect("image shape")
    }

    /// Rebuilds images from a `[n, 1, h, w]` tensor, copying metadata from `like`.
    pub fn from_tensor(t: &Tensor<T>, like: &[&Image<T>]) -> Vec<Image<T>> {
        (0..t.n())
            .map(|i| Image {
                height: t.h(),
                width: t.w(),
                pixels: t.sample(i).to_vec(),
                spacing: like[i].spacing,
                patient_id: like[i].patient_id.clone(),
            })
            .collect()
    }
}

/// Stacks images into a `[n, 1, h, w]` batch.
pub fn images_to_tensor<T: Real>(images: &[&Image<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::contract("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if (im.height, im.width) != (h, w) {
            return Err(Error::Shape(format!("image {}x{} in a {h}x{w} batch", im.height, im.width)));
        }
        data.extend_from_slice(&im.pixels);
    }
    Tensor::from_vec([images.len(), 1, h, w], data)
}

/// One-hot label map stored channel-major (`c × h × w`); channel 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask<T> {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mask<T> {
    pub fn from_labels(height: usize, width: usize, classes: usize, labels: &[u8]) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!("{height}x{width} label map needs {} labels, got {}", height * width, labels.len())));
        }
        let plane = height * width;
        let mut data = vec![T::zero(); classes * plane];
        for (p, &l) in labels.iter().enumerate() {
            if l as usize >= classes {
                return Err(Error::Format(format!("label {l} out of range for {classes} classes")));
            }
            data[l as usize * plane + p] = T::one();
        }
        Ok(Self { height, width, classes, data })
    }

    /// Validates the one-hot invariant.
    pub fn from_one_hot(height: usize, width: usize, classes: usize, data: Vec<T>) -> Result<Self> {
        let m = Self { height, width, classes, data };
        if m.data.len() != classes * height * width {
            return Err(Error::Shape("one-hot data length".into()));
        }
        let plane = height * width;
        for p in 0..plane {
            let mut ones = 0;
            for c in 0..classes {
                match m.data[c * plane + p].to_f64() {
                    v if v == 1.0 => ones += 1,
                    v if v == 0.0 => {}
                    v => return Err(Error::contract(format!("mask value {v} is not binary"))),
                }
            }
            if ones != 1 {
                return Err(Error::contract("mask pixel is not one-hot"));
            }
        }
        Ok(m)
    }

    pub fn labels(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|p| (0..self.classes).find(|&c| self.data[c * plane + p].to_f64() > 0.5).unwrap_or(0) as u8)
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let plane = self.height * self.width;
        (0..self.classes)
            .map(|c| self.data[c * plane..(c + 1) * plane].iter().filter(|v| v.to_f64() > 0.5).count())
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Mask<U> {
        Mask {
            height: self.height,
            width: self.width,
            classes: self.classes,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn to_soft(&self) -> SoftMask<T> {
        SoftMask { height: self.height, width: self.width, classes: self.classes, data: self.data.clone() }
    }
}

/// Per-pixel class probabilities, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask<T> {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<T>,
}

impl<T: Real> SoftMask<T> {
    /// Splits a `[n, c, h, w]` probability tensor into masks.
    pub fn from_tensor(t: &Tensor<T>) -> Vec<SoftMask<T>> {
        (0..t.n())
            .map(|i| SoftMask { height: t.h(), width: t.w(), classes: t.c(), data: t.sample(i).to_vec() })
            .collect()
    }

    /// Argmax hardening (first maximal class wins ties).
    pub fn harden(&self) -> Mask<T> {
        let plane = self.height * self.width;
        let labels: Vec<u8> = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.data[c * plane + p].to_f64() > self.data[best * plane + p].to_f64() {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Mask::from_labels(self.height, self.width, self.classes, &labels).expect("argmax labels in range")
    }

    pub fn cast<U: Real>(&self) -> SoftMask<U> {
        SoftMask {
            height: self.height,
            width: self.width,
            classes: self.classes,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Anything laid out as a channel-major `c × h × w` map.
pub trait ChannelMap<T> {
    fn dims(&self) -> (usize, usize, usize);
    fn values(&self) -> &[T];
}

impl<T> ChannelMap<T> for Mask<T> {
    fn dims(&self) -> (usize, usize, usize) {
        (self.classes, self.height, self.width)
    }
    fn values(&self) -> &[T] {
        &self.data
    }
}

impl<T> ChannelMap<T> for SoftMask<T> {
    fn dims(&self) -> (usize, usize, usize) {
        (self.classes, self.height, self.width)
    }
    fn values(&self) -> &[T] {
        &self.data
    }
}

/// Stacks masks into a `[n, c, h, w]` batch.
pub fn masks_to_tensor<T: Real, M: ChannelMap<T>>(masks: &[&M]) -> Result<Tensor<T>> {
    let first = masks.first().ok_or_else(|| Error::contract("empty mask batch"))?;
    let (c, h, w) = first.dims();
    let mut data = Vec::with_capacity(masks.len() * c * h * w);
    for m in masks {
        if m.dims() != (c, h, w) {
            return Err(Error::Shape(format!("mask {:?} in a {:?} batch", m.dims(), (c, h, w))));
        }
        data.extend_from_slice(m.values());
    }
    Tensor::from_vec([masks.len(), c, h, w], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slice<T> {
    pub image: Image<T>,
    pub mask: Option<Mask<T>>,
}

/// Ordered slices of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientVolume<T> {
    pub patient_id: String,
    pub slices: Vec<Slice<T>>,
}

impl<T: Real> PatientVolume<T> {
    pub fn images(&self) -> Vec<&Image<T>> {
        self.slices.iter().map(|s| &s.image).collect()
    }

    /// Ground-truth masks, if every slice carries one.
    pub fn masks(&self) -> Option<Vec<&Mask<T>>> {
        self.slices.iter().map(|s| s.mask.as_ref()).collect()
    }

    pub fn image_tensor(&self) -> Result<Tensor<T>> {
        images_to_tensor(&self.images())
    }

    pub fn without_masks(&self) -> Self {
        Self {
            patient_id: self.patient_id.clone(),
            slices: self.slices.iter().map(|s| Slice { image: s.image.clone(), mask: None }).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> PatientVolume<U> {
        PatientVolume {
            patient_id: self.patient_id.clone(),
            slices: self
                .slices
                .iter()
                .map(|s| Slice { image: s.image.cast(), mask: s.mask.as_ref().map(|m| m.cast()) })
                .collect(),
        }
    }

    /// `(h, w, c)` shared by every slice; `c` is 0 when no masks are present.
    pub fn geometry(&self) -> Result<(usize, usize, usize)> {
        let first = self.slices.first().ok_or_else(|| Error::contract(format!("volume {} has no slices", self.patient_id)))?;
        let (h, w) = (first.image.height, first.image.width);
        let c = first.mask.as_ref().map_or(0, |m| m.classes);
        for s in &self.slices {
            if (s.image.height, s.image.width) != (h, w) || s.mask.as_ref().map_or(0, |m| m.classes) != c {
                return Err(Error::Shape(format!("volume {} mixes slice geometries", self.patient_id)));
            }
        }
        Ok((h, w, c))
    }
}
