use crate::scalar::Real;
use rand::Rng;
use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

/// Trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![T::zero(); len])
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform(len: usize, bound: f64, rng: &mut impl Rng) -> Self {
        Self::new(
            (0..len)
                .map(|_| T::from_f64(rng.random_range(-bound..=bound)))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn map_scalar<U: Real>(&self, f: impl Fn(T) -> U) -> Param<U> {
        Param {
            value: self.value.iter().map(|&v| f(v)).collect(),
            grad: self.grad.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Anything that owns trainable parameters in a fixed order.
pub trait Module<T: Real> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Stable fingerprint of every parameter value (bit-level).
    fn param_digest(&self) -> u64 {
        digest(self.params().into_iter())
    }

    fn flat_values(&self) -> Vec<T> {
        self.params()
            .iter()
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }

    fn flat_grads(&self) -> Vec<T> {
        self.params()
            .iter()
            .flat_map(|p| p.grad.iter().copied())
            .collect()
    }

    fn set_flat_values(&mut self, flat: &[T]) {
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.value.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
    }
}

pub(crate) fn digest<'a, T: Real>(params: impl Iterator<Item = &'a Param<T>>) -> u64 {
    let mut h = DefaultHasher::new();
    for p in params {
        h.write_usize(p.value.len());
        for v in &p.value {
            h.write_u64(v.to_f64().to_bits());
        }
    }
    h.finish()
}
