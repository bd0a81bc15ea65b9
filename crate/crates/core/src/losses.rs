//! Training objectives. Every loss returns its value together with the
//! gradient w.r.t. its differentiable inputs.

use crate::error::{Error, Result};
use crate::nets::Discriminator;
use crate::nn::Module;
use crate::scalar::{Dual, Real};
use crate::seed;
use crate::tensor::Tensor;
use rand::Rng;

/// Probability floor inside the logarithm.
pub const CE_EPS: f64 = 1e-7;

/// Default gradient-penalty coefficient.
pub const GP_LAMBDA: f64 = 10.0;

/// A scalar loss with named additive parts.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub components: Vec<(String, T)>,
}

impl<T: Real> LossValue<T> {
    pub fn single(name: &str, value: T) -> Self {
        Self { value, components: vec![(name.to_owned(), value)] }
    }

    pub fn from_parts(parts: Vec<(String, T)>) -> Self {
        Self { value: parts.iter().map(|p| p.1).sum(), components: parts }
    }

    pub fn component(&self, name: &str) -> Option<T> {
        self.components.iter().find(|c| c.0 == name).map(|c| c.1)
    }
}

/// `wᵢ = 1 − nᵢ/n_tot` over a one-hot `[n, c, h, w]` batch.
pub fn class_weights<T: Real>(target: &Tensor<T>) -> Result<Vec<T>> {
    let [n, c, h, w] = target.shape();
    let plane = h * w;
    if n * plane == 0 || c == 0 {
        return Err(Error::contract("class weights of an empty mask"));
    }
    let mut counts = vec![0.0f64; c];
    for b in 0..n {
        let s = target.sample(b);
        for (k, cnt) in counts.iter_mut().enumerate() {
            *cnt += s[k * plane..(k + 1) * plane].iter().map(|v| v.to_f64()).sum::<f64>();
        }
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::contract("class weights of an empty mask"));
    }
    Ok(counts.into_iter().map(|k| T::from_f64(1.0 - k / total)).collect())
}

/// `−(1/P) Σ_p Σᵢ wᵢ yᵢ log max(ỹᵢ, ε)` over the `P = n·h·w` pixels of a batch,
/// with batch class weights. Returns the loss (one component per class) and
/// `∂L/∂ỹ`.
pub fn weighted_cross_entropy<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(LossValue<T>, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::contract(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let weights = class_weights(target)?;
    let [n, c, h, w] = pred.shape();
    let plane = h * w;
    let inv_p = T::from_f64(1.0 / (n * plane) as f64);
    let eps = T::from_f64(CE_EPS);
    let mut per_class = vec![T::zero(); c];
    let mut grad = Tensor::zeros(pred.shape());
    for b in 0..n {
        let (p, y) = (pred.sample(b), target.sample(b));
        let g = grad.sample_mut(b);
        for k in 0..c {
            let wk = weights[k];
            if wk == T::zero() {
                continue;
            }
            for i in k * plane..(k + 1) * plane {
                let yi = y[i];
                if yi == T::zero() {
                    continue;
                }
                let q = p[i];
                let clipped = q.max(eps).min(T::one());
                per_class[k] -= wk * yi * clipped.ln() * inv_p;
                if q > eps && q < T::one() {
                    g[i] = -(wk * yi * inv_p) / q;
                }
            }
        }
    }
    let parts = per_class.into_iter().enumerate().map(|(k, v)| (format!("class_{k}"), v)).collect();
    Ok((LossValue::from_parts(parts), grad))
}

fn mean_sq<T: Real>(d: &[T], target: T) -> (T, Vec<T>) {
    if d.is_empty() {
        return (T::zero(), Vec::new());
    }
    let inv = T::from_f64(1.0 / d.len() as f64);
    let half = T::from_f64(0.5);
    let value = d.iter().map(|&x| half * (x - target) * (x - target)).sum::<T>() * inv;
    (value, d.iter().map(|&x| (x - target) * inv).collect())
}

/// Least-squares critic loss with labels +1 (real) and −1 (fake):
/// `½·mean(d_r − 1)² + ½·mean(d_f + 1)²`, components `real` and `fake`.
/// Also returns the gradients w.r.t. both score batches.
pub fn lsgan_discriminator_loss<T: Real>(d_real: &[T], d_fake: &[T]) -> (LossValue<T>, Vec<T>, Vec<T>) {
    let (real, g_real) = mean_sq(d_real, T::one());
    let (fake, g_fake) = mean_sq(d_fake, -T::one());
    (LossValue::from_parts(vec![("real".into(), real), ("fake".into(), fake)]), g_real, g_fake)
}

/// `½·mean(d_f²)` and its gradient.
pub fn lsgan_generator_loss<T: Real>(d_fake: &[T]) -> (LossValue<T>, Vec<T>) {
    let (v, g) = mean_sq(d_fake, T::zero());
    (LossValue::single("adversarial", v), g)
}

/// Default factor of the dynamic adversarial weight.
pub const ADV_WEIGHT_FACTOR: f64 = 0.1;

/// `a = 0.1·|L|/|V|`, or 0 (with a warning) when `V = 0`.
pub fn dynamic_weight(l_sup: f64, v_adv: f64) -> f64 {
    scaled_dynamic_weight(ADV_WEIGHT_FACTOR, l_sup, v_adv)
}

/// `a = factor·|L|/|V|`, 0 when undefined.
pub fn scaled_dynamic_weight(factor: f64, l_sup: f64, v_adv: f64) -> f64 {
    if v_adv == 0.0 || !v_adv.is_finite() || !l_sup.is_finite() {
        log::warn!("dynamic weight undefined for L = {l_sup}, V = {v_adv}; using 0");
        return 0.0;
    }
    factor * l_sup.abs() / v_adv.abs()
}

/// Anything that scores mask batches and exposes per-sample input gradients.
pub trait Critic<T: Real> {
    fn scores_and_input_grads(&self, m: &Tensor<T>) -> (Vec<T>, Tensor<T>);
}

impl<T: Real> Critic<T> for Discriminator<T> {
    fn scores_and_input_grads(&self, m: &Tensor<T>) -> (Vec<T>, Tensor<T>) {
        let (scores, cache) = self.forward(m);
        let ones = vec![T::one(); scores.len()];
        (scores, self.gradients(&cache, &ones, false).0)
    }
}

/// Random interpolates `u·real + (1 − u)·fake`, one `u ~ U(0, 1)` per sample.
pub fn interpolate<T: Real>(real: &Tensor<T>, fake: &Tensor<T>, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::contract(format!("real {:?} vs fake {:?}", real.shape(), fake.shape())));
    }
    let mut out = fake.clone();
    for b in 0..real.n() {
        let u = T::from_f64(rng.random_range(0.0..1.0));
        for (o, &r) in out.sample_mut(b).iter_mut().zip(real.sample(b)) {
            *o = u * r + (T::one() - u) * *o;
        }
    }
    Ok(out)
}

fn norms<T: Real>(g: &Tensor<T>) -> Vec<T> {
    (0..g.n()).map(|b| g.sample(b).iter().map(|&v| v * v).sum::<T>().sqrt()).collect()
}

/// `λ·mean_b(‖∇_m d(m̂_b)‖₂ − 1)²` for any critic.
pub fn gradient_penalty_value<T: Real, C: Critic<T>>(critic: &C, real: &Tensor<T>, fake: &Tensor<T>, lambda: f64, seed: u64) -> Result<LossValue<T>> {
    let m = interpolate(real, fake, &mut seed::rng(seed))?;
    let (_, g) = critic.scores_and_input_grads(&m);
    let n = norms(&g);
    let lam = T::from_f64(lambda / n.len().max(1) as f64);
    let v = n.iter().map(|&x| (x - T::one()) * (x - T::one())).sum::<T>() * lam;
    Ok(LossValue::single("gradient_penalty", v))
}

/// Gradient penalty of the discriminator on random interpolates. With
/// `param_grads` its parameter gradient is accumulated: the mixed second
/// derivative is taken exactly by pushing dual numbers through one more
/// forward/backward pass.
pub fn gradient_penalty<T: Real>(disc: &mut Discriminator<T>, real: &Tensor<T>, fake: &Tensor<T>, lambda: f64, seed: u64, param_grads: bool) -> Result<LossValue<T>> {
    let m = interpolate(real, fake, &mut seed::rng(seed))?;
    let (_, g) = disc.scores_and_input_grads(&m);
    let n = norms(&g);
    let batch = n.len().max(1) as f64;
    let lam = T::from_f64(lambda / batch);
    let value = n.iter().map(|&x| (x - T::one()) * (x - T::one())).sum::<T>() * lam;
    if param_grads && lambda != 0.0 {
        // ∂/∂θ Σ_b c_b(‖g_b‖−1)² = Σ_b D_m(∇_θ d)(m̂_b)[c_b g_b], c_b = 2λ(‖g_b‖−1)/(B‖g_b‖)
        let mut seeded: Vec<Dual<T>> = Vec::with_capacity(m.len());
        for b in 0..m.n() {
            let c = if n[b] > T::zero() { T::from_f64(2.0 * lambda / batch) * (n[b] - T::one()) / n[b] } else { T::zero() };
            seeded.extend(m.sample(b).iter().zip(g.sample(b)).map(|(&x, &gb)| Dual::new(x, c * gb)));
        }
        let m_dual = Tensor::from_vec(m.shape(), seeded)?;
        let dd: Discriminator<Dual<T>> = disc.map_scalar(Dual::constant);
        let (_, cache) = dd.forward(&m_dual);
        let (_, grads) = dd.gradients(&cache, &vec![<Dual<T> as num_traits::One>::one(); m.n()], true);
        for (p, gd) in disc.params_mut().into_iter().zip(grads.expect("parameter gradients")) {
            p.grad.iter_mut().zip(gd).for_each(|(a, b)| *a += b.eps);
        }
    }
    Ok(LossValue::single("gradient_penalty", value))
}

/// `mean|x′ − x̃′|` and its gradients w.r.t. `(x′, x̃′)`.
pub fn mae_reconstruction<T: Real>(x_prime: &Tensor<T>, x_rec: &Tensor<T>) -> Result<(LossValue<T>, Tensor<T>, Tensor<T>)> {
    if x_prime.shape() != x_rec.shape() {
        return Err(Error::contract(format!("adapted image {:?} vs reconstruction {:?}", x_prime.shape(), x_rec.shape())));
    }
    if x_prime.is_empty() {
        return Err(Error::contract("reconstruction of an empty batch"));
    }
    let inv = T::from_f64(1.0 / x_prime.len() as f64);
    let mut value = T::zero();
    let mut d_rec = Tensor::zeros(x_rec.shape());
    for ((&a, &b), g) in x_prime.data().iter().zip(x_rec.data()).zip(d_rec.data_mut()) {
        value += (a - b).abs();
        *g = if b > a {
            inv
        } else if b < a {
            -inv
        } else {
            T::zero()
        };
    }
    let d_prime = d_rec.scale(-T::one());
    Ok((LossValue::single("reconstruction", value * inv), d_prime, d_rec))
}
