use crate::nn::{relu, relu_backward, upsample_nearest, upsample_nearest_backward, Conv2d, ConvGeom, Module, Param};
use crate::scalar::Real;
use crate::tensor::Tensor;
use rand::Rng;

/// Reconstructs the adapted image from a mask and an appearance code.
///
/// The code is upsampled to image resolution, concatenated with the mask and
/// passed through three 3×3 convolutions (ReLU, ReLU, linear).
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub conv3: Conv2d<T>,
    pub classes: usize,
    pub residual_channels: usize,
    /// Image size over residual size.
    pub factor: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    cat: Tensor<T>,
    h1: Tensor<T>,
    h2: Tensor<T>,
}

impl<T: Real> Decoder<T> {
    pub fn new(classes: usize, residual_channels: usize, width: usize, factor: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(ConvGeom::same3(classes + residual_channels, width), 1.0, rng),
            conv2: Conv2d::new(ConvGeom::same3(width, width), 1.0, rng),
            conv3: Conv2d::new(ConvGeom::same3(width, 1), 1.0, rng),
            classes,
            residual_channels,
            factor,
        }
    }

    pub fn forward(&self, mask: &Tensor<T>, residual: &Tensor<T>) -> (Tensor<T>, DecoderCache<T>) {
        assert_eq!(mask.c(), self.classes, "decoder mask channels");
        assert_eq!(residual.c(), self.residual_channels, "decoder residual channels");
        let up = upsample_nearest(residual, self.factor);
        assert_eq!(up.shape()[2..], mask.shape()[2..], "residual does not match mask resolution");
        let cat = Tensor::concat_channels(mask, &up);
        let h1 = relu(&self.conv1.forward(&cat));
        let h2 = relu(&self.conv2.forward(&h1));
        let out = self.conv3.forward(&h2);
        (out, DecoderCache { cat, h1, h2 })
    }

    /// Returns `(∂L/∂mask, ∂L/∂residual)`.
    pub fn backward(&mut self, cache: &DecoderCache<T>, dy: &Tensor<T>, param_grads: bool) -> (Tensor<T>, Tensor<T>) {
        let dh2 = self.conv3.backward(&cache.h2, dy, param_grads, true).expect("dx");
        let dz2 = relu_backward(&cache.h2, &dh2);
        let dh1 = self.conv2.backward(&cache.h1, &dz2, param_grads, true).expect("dx");
        let dz1 = relu_backward(&cache.h1, &dh1);
        let dcat = self.conv1.backward(&cache.cat, &dz1, param_grads, true).expect("dx");
        let (dmask, dup) = dcat.split_channels(self.classes);
        (dmask, upsample_nearest_backward(&dup, self.factor))
    }
}

impl<T: Real> Module<T> for Decoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.conv3.weight,
            &self.conv3.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
        ]
    }
}
