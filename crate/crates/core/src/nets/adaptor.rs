use crate::nn::{gaussian, gaussian_backward, Conv2d, ConvGeom, Module, Param};
use crate::scalar::Real;
use crate::tensor::Tensor;
use rand::Rng;

/// Shallow residual block placed in front of the segmentor.
///
/// `x' = x + conv3(f₂(conv2(f₁(conv1(x)))))` with `fᵢ(t) = exp(-t²/sᵢ²)`;
/// `sᵢ` are trainable and randomly initialised.
#[derive(Clone, Debug, PartialEq)]
pub struct Adaptor<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub conv3: Conv2d<T>,
    /// Activation scales `[s₁, s₂]`.
    pub scales: Param<T>,
}

#[derive(Clone, Debug)]
pub struct AdaptorCache<T> {
    x: Tensor<T>,
    t1: Tensor<T>,
    a1: Tensor<T>,
    t2: Tensor<T>,
    a2: Tensor<T>,
}

impl<T: Real> Adaptor<T> {
    pub fn new(width: usize, rng: &mut impl Rng) -> Self {
        let conv1 = Conv2d::new(ConvGeom::same3(1, width), 1.0, rng);
        let conv2 = Conv2d::new(ConvGeom::same3(width, width), 1.0, rng);
        let conv3 = Conv2d::new(ConvGeom::same3(width, 1), 0.5, rng);
        let scales = Param::new((0..2).map(|_| T::from_f64(rng.random_range(0.5..1.5))).collect());
        Self { conv1, conv2, conv3, scales }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, AdaptorCache<T>) {
        assert_eq!(x.c(), 1, "adaptor expects single-channel images");
        let t1 = self.conv1.forward(x);
        let a1 = gaussian(&t1, self.scales.value[0]);
        let t2 = self.conv2.forward(&a1);
        let a2 = gaussian(&t2, self.scales.value[1]);
        let mut y = self.conv3.forward(&a2);
        y.add_assign(x);
        (y, AdaptorCache { x: x.clone(), t1, a1, t2, a2 })
    }

    /// Backpropagates `dy = ∂L/∂x'`; returns `∂L/∂x` when `need_dx`.
    pub fn backward(&mut self, cache: &AdaptorCache<T>, dy: &Tensor<T>, param_grads: bool, need_dx: bool) -> Option<Tensor<T>> {
        let da2 = self.conv3.backward(&cache.a2, dy, param_grads, true).expect("dx");
        let (dt2, ds2) = gaussian_backward(&cache.t2, &cache.a2, &da2, self.scales.value[1]);
        let da1 = self.conv2.backward(&cache.a1, &dt2, param_grads, true).expect("dx");
        let (dt1, ds1) = gaussian_backward(&cache.t1, &cache.a1, &da1, self.scales.value[0]);
        let dx_branch = self.conv1.backward(&cache.x, &dt1, param_grads, need_dx);
        if param_grads {
            self.scales.grad[0] += ds1;
            self.scales.grad[1] += ds2;
        }
        dx_branch.map(|mut d| {
            d.add_assign(dy);
            d
        })
    }
}

impl<T: Real> Module<T> for Adaptor<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.scales,
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
            &mut self.scales,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
        ]
    }
}
