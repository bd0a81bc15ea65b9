use super::param::Param;
use crate::scalar::Real;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Square-kernel 2-D convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    /// 3×3, stride 1, "same" padding.
    pub fn same3(in_ch: usize, out_ch: usize) -> Self {
        Self::new(in_ch, out_ch, 3, 1, 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Columns of the weight matrix (`in_ch · k · k`).
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.patch_len()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, cols: &mut [T]) {
    let k = g.kernel;
    let p = oh * ow;
    for c in 0..g.in_ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, dx: &mut [T]) {
    let k = g.kernel;
    let p = oh * ow;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` with weights laid out `[out, in, k, k]`.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert_eq!(c, g.in_ch, "conv input channels");
    assert_eq!(weight.len(), g.weight_len(), "conv weight length");
    let (oh, ow) = g.out_hw(h, w);
    let p = oh * ow;
    let kk = g.patch_len();
    let mut y = Tensor::zeros([n, g.out_ch, oh, ow]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
    for i in 0..n {
        let xs = x.sample(i);
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, h, w, g, oh, ow, &mut cols);
            &cols
        };
        let ys = y.sample_mut(i);
        T::gemm(g.out_ch, kk, p, weight, (kk as isize, 1), src, (p as isize, 1), ys, (p as isize, 1), false);
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                ys[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    y
}

/// Accumulates weight/bias gradients (when buffers are given) and returns
/// the input gradient when `need_dx` is set.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    g: &ConvGeom,
    mut dweight: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let [n, _, h, w] = x.shape();
    let (oh, ow) = g.out_hw(h, w);
    assert_eq!(dy.shape(), [n, g.out_ch, oh, ow], "conv output gradient shape");
    let p = oh * ow;
    let kk = g.patch_len();
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![T::zero(); kk * p];
    let mut dcols = if need_dx && !g.is_pointwise() { vec![T::zero(); kk * p] } else { Vec::new() };
    for i in 0..n {
        let dys = dy.sample(i);
        if let Some(dw) = dweight.as_deref_mut() {
            let src: &[T] = if g.is_pointwise() {
                x.sample(i)
            } else {
                im2col(x.sample(i), h, w, g, oh, ow, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            T::gemm(g.out_ch, p, kk, dys, (p as isize, 1), src, (1, p as isize), dw, (kk as isize, 1), true);
        }
        if let Some(db) = dbias.as_deref_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dys[o * p..(o + 1) * p].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = dx.sample_mut(i);
            if g.is_pointwise() {
                T::gemm(kk, g.out_ch, p, weight, (1, kk as isize), dys, (p as isize, 1), dxs, (p as isize, 1), false);
            } else {
                // dcols = Wᵀ · dY
                T::gemm(kk, g.out_ch, p, weight, (1, kk as isize), dys, (p as isize, 1), &mut dcols, (p as isize, 1), false);
                col2im(&dcols, h, w, g, oh, ow, dxs);
            }
        }
    }
    dx
}

/// Convolution layer owning its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub geom: ConvGeom,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv2d<T> {
    /// He-uniform weights scaled by `gain`, zero bias.
    pub fn new(geom: ConvGeom, gain: f64, rng: &mut impl Rng) -> Self {
        let bound = gain * (6.0 / geom.patch_len() as f64).sqrt();
        Self {
            geom,
            weight: Param::uniform(geom.weight_len(), bound, rng),
            bias: Param::zeros(geom.out_ch),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        conv2d_forward(x, &self.weight.value, Some(&self.bias.value), &self.geom)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, param_grads: bool, need_dx: bool) -> Option<Tensor<T>> {
        let (dw, db) = if param_grads {
            (Some(&mut self.weight.grad[..]), Some(&mut self.bias.grad[..]))
        } else {
            (None, None)
        };
        conv2d_backward(x, &self.weight.value, dy, &self.geom, dw, db, need_dx)
    }

    pub fn map_scalar<U: Real>(&self, f: impl Fn(T) -> U + Copy) -> Conv2d<U> {
        Conv2d {
            geom: self.geom,
            weight: self.weight.map_scalar(f),
            bias: self.bias.map_scalar(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &Tensor<f64>, w: &[f64], g: &ConvGeom) -> Tensor<f64> {
        let [n, _, h, wd] = x.shape();
        let (oh, ow) = g.out_hw(h, wd);
        let mut y = Tensor::zeros([n, g.out_ch, oh, ow]);
        for b in 0..n {
            for o in 0..g.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..g.in_ch {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.at(b, c, iy as usize, ix as usize)
                                        * w[((o * g.in_ch + c) * g.kernel + ky) * g.kernel + kx];
                                }
                            }
                        }
                        *y.at_mut(b, o, oy, ox) = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn gemm_convolution_matches_direct_loops() {
        for g in [
            ConvGeom::new(2, 3, 3, 1, 1),
            ConvGeom::new(2, 4, 4, 2, 1),
            ConvGeom::new(3, 2, 4, 1, 1),
            ConvGeom::new(3, 2, 1, 1, 0),
        ] {
            let x = Tensor::from_vec([2, g.in_ch, 7, 6], (0..2 * g.in_ch * 42).map(|i| (i as f64 * 0.71).sin()).collect()).unwrap();
            let w: Vec<f64> = (0..g.weight_len()).map(|i| (i as f64 * 0.3).cos()).collect();
            let fast = conv2d_forward(&x, &w, None, &g);
            let slow = direct_conv(&x, &w, &g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{g:?}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), dy> == <x, conv_backward(dy)> and == <w, dW>
        let g = ConvGeom::new(2, 3, 4, 2, 1);
        let x = Tensor::from_vec([2, 2, 8, 8], (0..256).map(|i| (i as f64 * 0.17).sin()).collect()).unwrap();
        let w: Vec<f64> = (0..g.weight_len()).map(|i| (i as f64 * 0.23).cos()).collect();
        let y = conv2d_forward(&x, &w, None, &g);
        let dy = y.map(|v| v * 0.5 + 0.1);
        let mut dw = vec![0.0; w.len()];
        let dx = conv2d_backward(&x, &w, &dy, &g, Some(&mut dw), None, true).unwrap();
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs_x: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - rhs_w).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
