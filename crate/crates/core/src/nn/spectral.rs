//! Spectral normalization of weight matrices with persistent power-iteration
//! vectors.

use crate::scalar::Real;

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn normalize_in_place<T: Real>(v: &mut [T]) {
    let n = norm(v);
    if n.to_f64() > 1e-30 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `W v` for a row-major `rows × cols` matrix.
fn mat_vec<T: Real>(w: &[T], rows: usize, cols: usize, v: &[T]) -> Vec<T> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect()
}

/// `Wᵀ u`.
fn mat_t_vec<T: Real>(w: &[T], rows: usize, cols: usize, u: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        let ur = u[r];
        for (o, &x) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += ur * x;
        }
    }
    out
}

/// Deterministic, well-spread starting vector.
fn start_vector<T: Real>(len: usize) -> Vec<T> {
    let mut v: Vec<T> = (0..len)
        .map(|i| T::from_f64(1.0 + 0.5 * ((i as f64 + 1.0) * 0.754_877_666).fract()))
        .collect();
    normalize_in_place(&mut v);
    v
}

/// Power-iteration state for one weight matrix viewed as `rows × cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNorm<T> {
    pub rows: usize,
    pub cols: usize,
    pub u: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> SpectralNorm<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            u: start_vector(rows),
            v: start_vector(cols),
        }
    }

    /// One power-iteration step, refining the singular vector estimates.
    pub fn power_iterate(&mut self, w: &[T]) {
        let mut v = mat_t_vec(w, self.rows, self.cols, &self.u);
        normalize_in_place(&mut v);
        let mut u = mat_vec(w, self.rows, self.cols, &v);
        normalize_in_place(&mut u);
        if norm(&u).to_f64() > 0.0 && norm(&v).to_f64() > 0.0 {
            self.u = u;
            self.v = v;
        }
    }

    /// `σ ≈ uᵀ W v` with the current vectors held fixed.
    pub fn sigma(&self, w: &[T]) -> T {
        mat_vec(w, self.rows, self.cols, &self.v)
            .iter()
            .zip(&self.u)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    /// Returns `(W / σ, σ)`; a zero `σ` leaves the weight unchanged.
    pub fn normalize(&self, w: &[T]) -> (Vec<T>, T) {
        let s = self.sigma(w);
        if s.to_f64().abs() < 1e-30 {
            return (w.to_vec(), T::one());
        }
        (w.iter().map(|&x| x / s).collect(), s)
    }

    /// Maps `∂L/∂(W/σ)` to `∂L/∂W` with `u`, `v` treated as constants:
    /// `G/σ − (⟨G, W⟩/σ²) u vᵀ`.
    pub fn backward(&self, w: &[T], sigma: T, g: &[T]) -> Vec<T> {
        if sigma == T::one() && self.sigma(w).to_f64().abs() < 1e-30 {
            return g.to_vec();
        }
        let dot: T = g.iter().zip(w).map(|(&a, &b)| a * b).sum();
        let k = dot / (sigma * sigma);
        let mut out: Vec<T> = g.iter().map(|&x| x / sigma).collect();
        for r in 0..self.rows {
            let ku = k * self.u[r];
            for c in 0..self.cols {
                out[r * self.cols + c] -= ku * self.v[c];
            }
        }
        out
    }

    pub fn map_scalar<U: Real>(&self, f: impl Fn(T) -> U + Copy) -> SpectralNorm<U> {
        SpectralNorm {
            rows: self.rows,
            cols: self.cols,
            u: self.u.iter().map(|&x| f(x)).collect(),
            v: self.v.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Divides a `rows × cols` weight by its top singular value estimated with
/// `iters` power-iteration steps. A zero weight passes through unchanged.
pub fn spectral_normalize<T: Real>(w: &[T], rows: usize, cols: usize, iters: usize) -> Vec<T> {
    assert_eq!(w.len(), rows * cols, "weight is not {rows}x{cols}");
    if w.iter().all(|x| x.to_f64() == 0.0) {
        return w.to_vec();
    }
    let mut sn = SpectralNorm::new(rows, cols);
    for _ in 0..iters.max(1) {
        sn.power_iterate(w);
    }
    sn.normalize(w).0
}

/// Top singular value by power iteration, used by tests and diagnostics.
pub fn top_singular_value<T: Real>(w: &[T], rows: usize, cols: usize, iters: usize) -> f64 {
    let mut sn = SpectralNorm::new(rows, cols);
    for _ in 0..iters {
        sn.power_iterate(w);
    }
    sn.sigma(w).to_f64().abs()
}
