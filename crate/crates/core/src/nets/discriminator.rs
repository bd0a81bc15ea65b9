use crate::nn::{
    conv2d_backward, conv2d_forward, leaky_relu, leaky_relu_backward, tanh, tanh_backward, Conv2d, ConvGeom, Linear,
    Module, Param, SpectralNorm,
};
use crate::scalar::Real;
use crate::tensor::Tensor;
use rand::Rng;

/// Widths of the five 4×4 convolution layers.
pub const DISCRIMINATOR_WIDTHS: [usize; 5] = [32, 64, 128, 256, 512];

const LEAKY_SLOPE: f64 = 0.2;

/// Convolutional mask critic with a scalar linear output.
///
/// With smoothness enabled every layer (including the final fully-connected
/// one) is spectrally normalized and hidden activations are `tanh`;
/// otherwise weights are used raw with leaky-ReLU activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub convs: Vec<Conv2d<T>>,
    pub fc: Linear<T>,
    /// One entry per conv layer plus one for the fully-connected layer.
    pub spectral: Option<Vec<SpectralNorm<T>>>,
    pub input_shape: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct DiscriminatorCache<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    post: Vec<Tensor<T>>,
    weights: Vec<Vec<T>>,
    sigmas: Vec<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(classes: usize, height: usize, width: usize, widths: &[usize], smooth: bool, rng: &mut impl Rng) -> Self {
        let mut convs = Vec::with_capacity(widths.len());
        let mut in_ch = classes;
        let (mut h, mut w) = (height, width);
        for (i, &out) in widths.iter().enumerate() {
            let stride = if i < 2 { 2 } else { 1 };
            let geom = ConvGeom::new(in_ch, out, 4, stride, 1);
            convs.push(Conv2d::new(geom, 1.0, rng));
            (h, w) = geom.out_hw(h, w);
            in_ch = out;
        }
        let fc = Linear::new(in_ch * h * w, 1, rng);
        let spectral = smooth.then(|| {
            let mut sn: Vec<SpectralNorm<T>> =
                convs.iter().map(|c| SpectralNorm::new(c.geom.out_ch, c.geom.patch_len())).collect();
            sn.push(SpectralNorm::new(1, fc.in_features));
            sn
        });
        let mut d = Self { convs, fc, spectral, input_shape: [classes, height, width] };
        // settle the singular-vector estimates before first use
        for _ in 0..15 {
            d.power_iterate();
        }
        d
    }

    pub fn is_smooth(&self) -> bool {
        self.spectral.is_some()
    }

    /// Spatial size after the convolution stack.
    pub fn feature_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for c in &self.convs {
            (h, w) = c.geom.out_hw(h, w);
        }
        (h, w)
    }

    /// One persistent power-iteration step per spectrally normalized layer.
    pub fn power_iterate(&mut self) {
        if let Some(sn) = self.spectral.as_mut() {
            for (s, c) in sn.iter_mut().zip(&self.convs) {
                s.power_iterate(&c.weight.value);
            }
            sn.last_mut().expect("fc entry").power_iterate(&self.fc.weight.value);
        }
    }

    fn raw_weight(&self, layer: usize) -> &[T] {
        if layer < self.convs.len() {
            &self.convs[layer].weight.value
        } else {
            &self.fc.weight.value
        }
    }

    /// Weights as used in the forward pass (`W/σ` under spectral norm).
    pub fn effective_weights(&self) -> (Vec<Vec<T>>, Vec<T>) {
        let layers = self.convs.len() + 1;
        match &self.spectral {
            Some(sn) => (0..layers).map(|l| sn[l].normalize(self.raw_weight(l))).unzip(),
            None => ((0..layers).map(|l| self.raw_weight(l).to_vec()).collect(), vec![T::one(); layers]),
        }
    }

    /// Scores each mask in a `[n, c, h, w]` batch.
    pub fn forward(&self, m: &Tensor<T>) -> (Vec<T>, DiscriminatorCache<T>) {
        assert_eq!(m.shape()[1..], self.input_shape, "discriminator input shape");
        let (weights, sigmas) = self.effective_weights();
        let mut inputs = Vec::with_capacity(self.convs.len() + 1);
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut post = Vec::with_capacity(self.convs.len());
        let mut h = m.clone();
        for (l, conv) in self.convs.iter().enumerate() {
            let z = conv2d_forward(&h, &weights[l], Some(&conv.bias.value), &conv.geom);
            let a = if self.is_smooth() { tanh(&z) } else { leaky_relu(&z, LEAKY_SLOPE) };
            inputs.push(h);
            pre.push(z);
            post.push(a.clone());
            h = a;
        }
        let out = self.fc.forward_with(&h, &weights[self.convs.len()]);
        inputs.push(h);
        (out.into_vec(), DiscriminatorCache { inputs, pre, post, weights, sigmas })
    }

    pub fn score(&self, m: &Tensor<T>) -> Vec<T> {
        self.forward(m).0
    }

    /// Input gradient `∂L/∂m` plus, when requested, gradients for every
    /// parameter in [`Module::params`] order (w.r.t. the raw weights).
    pub fn gradients(&self, cache: &DiscriminatorCache<T>, dscores: &[T], want_params: bool) -> (Tensor<T>, Option<Vec<Vec<T>>>) {
        let n = dscores.len();
        let nl = self.convs.len();
        let dy = Tensor::from_vec([n, 1, 1, 1], dscores.to_vec()).expect("score batch");
        let (mut dh, dw_fc) = self.fc.backward_with(&cache.inputs[nl], &cache.weights[nl], &dy);
        let mut grads: Vec<Vec<T>> = Vec::new();
        let mut conv_grads: Vec<(Vec<T>, Vec<T>)> = Vec::with_capacity(nl);
        for l in (0..nl).rev() {
            let dz = if self.is_smooth() {
                tanh_backward(&cache.post[l], &dh)
            } else {
                leaky_relu_backward(&cache.pre[l], &dh, LEAKY_SLOPE)
            };
            let geom = self.convs[l].geom;
            let mut dw = want_params.then(|| vec![T::zero(); geom.weight_len()]);
            let mut db = want_params.then(|| vec![T::zero(); geom.out_ch]);
            dh = conv2d_backward(&cache.inputs[l], &cache.weights[l], &dz, &geom, dw.as_deref_mut(), db.as_deref_mut(), true)
                .expect("dx");
            if let (Some(dw), Some(db)) = (dw, db) {
                conv_grads.push((self.raw_grad(l, cache, &dw), db));
            }
        }
        if want_params {
            for (dw, db) in conv_grads.into_iter().rev() {
                grads.push(dw);
                grads.push(db);
            }
            let (dw, db) = dw_fc;
            grads.push(self.raw_grad(nl, cache, &dw));
            grads.push(db);
        }
        (dh, want_params.then_some(grads))
    }

    /// Returns `∂L/∂m` and accumulates parameter gradients when `param_grads`.
    pub fn backward(&mut self, cache: &DiscriminatorCache<T>, dscores: &[T], param_grads: bool) -> Tensor<T> {
        let (dm, grads) = self.gradients(cache, dscores, param_grads);
        if let Some(grads) = grads {
            for (p, g) in self.params_mut().into_iter().zip(grads) {
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        dm
    }

    fn raw_grad(&self, layer: usize, cache: &DiscriminatorCache<T>, g: &[T]) -> Vec<T> {
        match &self.spectral {
            Some(sn) => sn[layer].backward(self.raw_weight(layer), cache.sigmas[layer], g),
            None => g.to_vec(),
        }
    }

    /// Copy with every parameter and buffer mapped into another scalar type.
    pub fn map_scalar<U: Real>(&self, f: impl Fn(T) -> U + Copy) -> Discriminator<U> {
        Discriminator {
            convs: self.convs.iter().map(|c| c.map_scalar(f)).collect(),
            fc: self.fc.map_scalar(f),
            spectral: self.spectral.as_ref().map(|v| v.iter().map(|s| s.map_scalar(f)).collect()),
            input_shape: self.input_shape,
        }
    }
}

impl<T: Real> Module<T> for Discriminator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = self.convs.iter().flat_map(|c| [&c.weight, &c.bias]).collect();
        out.push(&self.fc.weight);
        out.push(&self.fc.bias);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = self.convs.iter_mut().flat_map(|c| [&mut c.weight, &mut c.bias]).collect();
        out.push(&mut self.fc.weight);
        out.push(&mut self.fc.bias);
        out
    }
}
