use super::param::Param;
use crate::scalar::Real;
use crate::tensor::Tensor;
use rand::Rng;

/// Batch normalization over `(batch, height, width)` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    /// Batch mean/variance when normalized with batch statistics.
    batch: Option<(Vec<T>, Vec<T>, usize)>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::zeros(channels),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Tensor<T>) {
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for k in off..off + plane {
                    let v = (x.data()[k] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[k] = v;
                    y.data_mut()[k] = g * v + b;
                }
            }
        }
        (y, xhat)
    }

    /// Normalizes with batch statistics (`train`) or the running estimates.
    /// Running estimates only change through [`BatchNorm2d::commit`].
    pub fn forward(&self, x: &Tensor<T>, train: bool) -> (Tensor<T>, BnCache<T>) {
        let eps = T::from_f64(self.eps);
        if !train {
            let inv_std: Vec<T> = self.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let (y, xhat) = self.normalize(x, &self.running_mean, &inv_std);
            return (y, BnCache { xhat, inv_std, batch: None });
        }
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let count = T::from_f64((n * plane) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * plane;
                s += x.data()[off..off + plane].iter().copied().sum::<T>();
            }
            mean[ch] = s / count;
            let mut q = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for &v in &x.data()[off..off + plane] {
                    let d = v - mean[ch];
                    q += d * d;
                }
            }
            var[ch] = q / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = self.normalize(x, &mean, &inv_std);
        (y, BnCache { xhat, inv_std, batch: Some((mean, var, n * plane)) })
    }

    /// Folds the batch statistics of a training-mode forward into the
    /// running estimates.
    pub fn commit(&mut self, cache: &BnCache<T>) {
        let Some((mean, var, count)) = &cache.batch else { return };
        let m = T::from_f64(self.momentum);
        let total = *count as f64;
        let unbias = T::from_f64(if total > 1.0 { total / (total - 1.0) } else { 1.0 });
        for ch in 0..mean.len() {
            self.running_mean[ch] = (T::one() - m) * self.running_mean[ch] + m * mean[ch];
            self.running_var[ch] = (T::one() - m) * self.running_var[ch] + m * var[ch] * unbias;
        }
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Tensor<T>, param_grads: bool) -> Tensor<T> {
        let [n, c, h, w] = dy.shape();
        let plane = h * w;
        let count = T::from_f64((n * plane) as f64);
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for k in off..off + plane {
                    sum_dy += dy.data()[k];
                    sum_dy_xhat += dy.data()[k] * cache.xhat.data()[k];
                }
            }
            if param_grads {
                self.gamma.grad[ch] += sum_dy_xhat;
                self.beta.grad[ch] += sum_dy;
            }
            let scale = self.gamma.value[ch] * cache.inv_std[ch];
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for k in off..off + plane {
                    dx.data_mut()[k] = if cache.batch.is_some() {
                        scale * (dy.data()[k] - sum_dy / count - cache.xhat.data()[k] * sum_dy_xhat / count)
                    } else {
                        scale * dy.data()[k]
                    };
                }
            }
        }
        dx
    }

    pub fn map_scalar<U: Real>(&self, f: impl Fn(T) -> U + Copy) -> BatchNorm2d<U> {
        BatchNorm2d {
            gamma: self.gamma.map_scalar(f),
            beta: self.beta.map_scalar(f),
            running_mean: self.running_mean.iter().map(|&v| f(v)).collect(),
            running_var: self.running_var.iter().map(|&v| f(v)).collect(),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v.to_f64() > 0.0 { v } else { T::zero() })
}

/// Gradient of ReLU expressed through its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    y.zip_map(dy, |v, d| if v.to_f64() > 0.0 { d } else { T::zero() })
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64(slope);
    x.map(|v| if v.to_f64() > 0.0 { v } else { v * s })
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64(slope);
    x.zip_map(dy, |v, d| if v.to_f64() > 0.0 { d } else { d * s })
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn tanh_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    y.zip_map(dy, |v, d| d * (T::one() - v * v))
}

/// `exp(-t² / s²)`.
pub fn gaussian<T: Real>(x: &Tensor<T>, s: T) -> Tensor<T> {
    let inv = T::one() / (s * s);
    x.map(|t| (-(t * t) * inv).exp())
}

/// Returns the input gradient and `∂L/∂s`.
pub fn gaussian_backward<T: Real>(x: &Tensor<T>, y: &Tensor<T>, dy: &Tensor<T>, s: T) -> (Tensor<T>, T) {
    let s2 = s * s;
    let two = T::from_f64(2.0);
    let mut ds = T::zero();
    let mut dx = Tensor::zeros(x.shape());
    for (k, ((&t, &v), &d)) in x.data().iter().zip(y.data()).zip(dy.data()).enumerate() {
        let g = d * v;
        dx.data_mut()[k] = -two * t / s2 * g;
        ds += two * t * t / (s2 * s) * g;
    }
    (dx, ds)
}

/// 2×2 max pooling with stride 2; also returns argmax offsets.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (2 * oy, 2 * ox);
                    let mut bv = x.at(b, ch, best.0, best.1);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let v = x.at(b, ch, 2 * oy + dy, 2 * ox + dx);
                        if v.to_f64() > bv.to_f64() {
                            bv = v;
                            best = (2 * oy + dy, 2 * ox + dx);
                        }
                    }
                    *y.at_mut(b, ch, oy, ox) = bv;
                    idx.push((best.0 * w + best.1) as u32);
                }
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward<T: Real>(input_shape: [usize; 4], idx: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let mut dx = Tensor::zeros(input_shape);
    let plane_out = dy.h() * dy.w();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane_out;
            for k in 0..plane_out {
                let off = (b * c + ch) * h * w + idx[base + k] as usize;
                dx.data_mut()[off] += dy.data()[base + k];
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor::zeros([n, c, h * factor, w * factor]);
    for b in 0..n {
        for ch in 0..c {
            for yy in 0..h * factor {
                for xx in 0..w * factor {
                    *y.at_mut(b, ch, yy, xx) = x.at(b, ch, yy / factor, xx / factor);
                }
            }
        }
    }
    y
}

pub fn upsample_nearest_backward<T: Real>(dy: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, h, w] = dy.shape();
    let mut dx = Tensor::zeros([n, c, h / factor, w / factor]);
    for b in 0..n {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    *dx.at_mut(b, ch, yy / factor, xx / factor) += dy.at(b, ch, yy, xx);
                }
            }
        }
    }
    dx
}

/// Softmax across the channel axis at every pixel.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        let xs = x.sample(b);
        let ys = y.sample_mut(b);
        for p in 0..plane {
            let mut m = xs[p];
            for ch in 1..c {
                m = m.max(xs[ch * plane + p]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (xs[ch * plane + p] - m).exp();
                ys[ch * plane + p] = e;
                z += e;
            }
            for ch in 0..c {
                ys[ch * plane + p] /= z;
            }
        }
    }
    y
}

pub fn softmax_channels_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = y.shape();
    let plane = h * w;
    let mut dx = Tensor::zeros(y.shape());
    for b in 0..n {
        let ys = y.sample(b);
        let dys = dy.sample(b);
        let dxs = dx.sample_mut(b);
        for p in 0..plane {
            let mut dot = T::zero();
            for ch in 0..c {
                dot += ys[ch * plane + p] * dys[ch * plane + p];
            }
            for ch in 0..c {
                let k = ch * plane + p;
                dxs[k] = ys[k] * (dys[k] - dot);
            }
        }
    }
    dx
}

/// Fully connected layer on flattened samples; output shape `[n, out, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / in_features as f64).sqrt();
        Self {
            in_features,
            out_features,
            weight: Param::uniform(in_features * out_features, bound, rng),
            bias: Param::zeros(out_features),
        }
    }

    pub fn forward_with(&self, x: &Tensor<T>, weight: &[T]) -> Tensor<T> {
        let n = x.n();
        assert_eq!(x.sample_len(), self.in_features, "linear input features");
        let mut y = Tensor::zeros([n, self.out_features, 1, 1]);
        let (fi, fo) = (self.in_features as isize, self.out_features as isize);
        // Y (n × out) = X (n × in) · Wᵀ
        T::gemm(n, self.in_features, self.out_features, x.data(), (fi, 1), weight, (1, fi), y.data_mut(), (fo, 1), false);
        for b in 0..n {
            for o in 0..self.out_features {
                *y.at_mut(b, o, 0, 0) += self.bias.value[o];
            }
        }
        y
    }

    /// Returns `(dx, (dW, db))` for the weight used in the forward pass.
    pub fn backward_with(&self, x: &Tensor<T>, weight: &[T], dy: &Tensor<T>) -> (Tensor<T>, (Vec<T>, Vec<T>)) {
        let n = x.n();
        let (fi, fo) = (self.in_features as isize, self.out_features as isize);
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(n, self.out_features, self.in_features, dy.data(), (fo, 1), weight, (fi, 1), dx.data_mut(), (fi, 1), false);
        let mut dw = vec![T::zero(); weight.len()];
        T::gemm(self.out_features, n, self.in_features, dy.data(), (1, fo), x.data(), (fi, 1), &mut dw, (fi, 1), false);
        let mut db = vec![T::zero(); self.out_features];
        for b in 0..n {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dy.at(b, o, 0, 0);
            }
        }
        (dx, (dw, db))
    }

    pub fn map_scalar<U: Real>(&self, f: impl Fn(T) -> U + Copy) -> Linear<U> {
        Linear {
            in_features: self.in_features,
            out_features: self.out_features,
            weight: self.weight.map_scalar(f),
            bias: self.bias.map_scalar(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_activation_values() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![0.0f64, 0.8, -0.8]).unwrap();
        let y = gaussian(&x, 0.8);
        assert_eq!(y.data()[0], 1.0);
        assert!((y.data()[1] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(y.data()[1], y.data()[2]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec([2, 3, 2, 2], (0..24).map(|i| (i as f64 * 1.3).sin() * 5.0).collect()).unwrap();
        let y = softmax_channels(&x);
        for b in 0..2 {
            for yy in 0..2 {
                for xx in 0..2 {
                    let s: f64 = (0..3).map(|c| y.at(b, c, yy, xx)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec([1, 1, 2, 4], vec![1.0f64, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]).unwrap();
        let (y, idx) = maxpool2(&x);
        assert_eq!(y.data(), &[5.0, 9.0]);
        let dx = maxpool2_backward(x.shape(), &idx, &Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }
}
