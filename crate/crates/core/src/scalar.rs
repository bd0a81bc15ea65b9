//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Networks, losses and optimizers are written once against [`Real`] and
//! instantiated with `f32` (training), `f64` (gradient checks) or
//! [`Dual`] (forward-mode directional derivatives, used to differentiate
//! through a gradient for the gradient penalty).

use num_traits::{One, Zero};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Real-valued scalar used by tensors and networks.
pub trait Real:
    Copy
    + Debug
    + Display
    + Default
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Zero
    + One
    + Sum
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    /// Name written into checkpoint manifests.
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    /// Primal value (the real part for dual numbers).
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn powf(self, p: f64) -> Self;

    fn is_finite(self) -> bool {
        self.to_f64().is_finite()
    }

    fn max(self, other: Self) -> Self {
        if self.to_f64() >= other.to_f64() {
            self
        } else {
            other
        }
    }

    fn min(self, other: Self) -> Self {
        if self.to_f64() <= other.to_f64() {
            self
        } else {
            other
        }
    }

    /// `c = a · b`, or `c += a · b` when `accumulate` is set.
    ///
    /// `a` is `m × k`, `b` is `k × n`, `c` is `m × n`; every operand is
    /// described by explicit row/column strides so transposes are free.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        c_strides: (isize, isize),
        accumulate: bool,
    ) {
        naive_gemm(m, k, n, a, a_strides, b, b_strides, c, c_strides, accumulate)
    }
}

#[allow(clippy::too_many_arguments)]
fn naive_gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    c: &mut [T],
    (rsc, csc): (isize, isize),
    accumulate: bool,
) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc += a[(i as isize * rsa + p as isize * csa) as usize]
                    * b[(p as isize * rsb + j as isize * csb) as usize];
            }
            let ci = (i as isize * rsc + j as isize * csc) as usize;
            if accumulate {
                c[ci] += acc;
            } else {
                c[ci] = acc;
            }
        }
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!((last as usize) < len, "matrix extent exceeds buffer");
}

macro_rules! float_real {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn powf(self, p: f64) -> Self {
                <$t>::powf(self, p as $t)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                if self >= other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn min(self, other: Self) -> Self {
                if self <= other {
                    self
                } else {
                    other
                }
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                c: &mut [Self],
                c_strides: (isize, isize),
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        for i in 0..m {
                            for j in 0..n {
                                c[(i as isize * c_strides.0 + j as isize * c_strides.1) as usize] =
                                    0.0;
                            }
                        }
                    }
                    return;
                }
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: extents of all three operands were checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

float_real!(f32, "f32", matrixmultiply::sgemm);
float_real!(f64, "f64", matrixmultiply::dgemm);

/// First-order dual number `re + eps·ε` with `ε² = 0`.
///
/// Seeding the `eps` part of an input with a direction `v` makes every
/// downstream `eps` the directional derivative along `v`, including the
/// outputs of a reverse-mode backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
pub struct Dual<T> {
    pub re: T,
    pub eps: T,
}

impl<T: Real> Dual<T> {
    pub fn new(re: T, eps: T) -> Self {
        Self { re, eps }
    }

    pub fn constant(re: T) -> Self {
        Self { re, eps: T::zero() }
    }

    #[inline]
    fn chain(self, f: T, df: T) -> Self {
        Self {
            re: f,
            eps: df * self.eps,
        }
    }
}

impl<T: Real> Display for Dual<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}+{}ε", self.re, self.eps)
    }
}

impl<T: Real> Zero for Dual<T> {
    fn zero() -> Self {
        Self::constant(T::zero())
    }
    fn is_zero(&self) -> bool {
        self.re.is_zero() && self.eps.is_zero()
    }
}

impl<T: Real> One for Dual<T> {
    fn one() -> Self {
        Self::constant(T::one())
    }
}

impl<T: Real> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.eps + o.eps)
    }
}

impl<T: Real> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.eps - o.eps)
    }
}

impl<T: Real> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl<T: Real> Div for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let q = self.re / o.re;
        Self::new(q, (self.eps - q * o.eps) / o.re)
    }
}

impl<T: Real> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.re, -self.eps)
    }
}

impl<T: Real> AddAssign for Dual<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> SubAssign for Dual<T> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<T: Real> MulAssign for Dual<T> {
    #[inline]
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<T: Real> DivAssign for Dual<T> {
    #[inline]
    fn div_assign(&mut self, o: Self) {
        *self = *self / o;
    }
}

impl<T: Real> Sum for Dual<T> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), |a, b| a + b)
    }
}

impl<T: Real> Real for Dual<T> {
    const NAME: &'static str = "dual";

    fn from_f64(v: f64) -> Self {
        Self::constant(T::from_f64(v))
    }
    fn to_f64(self) -> f64 {
        self.re.to_f64()
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), T::one() / self.re)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, T::one() - t * t)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, T::from_f64(0.5) / s)
    }
    fn abs(self) -> Self {
        if self.re.to_f64() < 0.0 {
            -self
        } else {
            self
        }
    }
    fn powf(self, p: f64) -> Self {
        let v = self.re.powf(p);
        self.chain(v, T::from_f64(p) * self.re.powf(p - 1.0))
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.eps.is_finite()
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        c_strides: (isize, isize),
        accumulate: bool,
    ) {
        // (A + εA')(B + εB') = AB + ε(AB' + A'B): three real products on
        // densely repacked operands.
        let pack = |src: &[Self], rows: usize, cols: usize, (rs, cs): (isize, isize)| {
            let mut re = Vec::with_capacity(rows * cols);
            let mut eps = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    let v = src[(i as isize * rs + j as isize * cs) as usize];
                    re.push(v.re);
                    eps.push(v.eps);
                }
            }
            (re, eps)
        };
        let (a_re, a_eps) = pack(a, m, k, a_strides);
        let (b_re, b_eps) = pack(b, k, n, b_strides);
        let dense_a = (k as isize, 1);
        let dense_b = (n as isize, 1);
        let dense_c = (n as isize, 1);
        let mut c_re = vec![T::zero(); m * n];
        let mut c_eps = vec![T::zero(); m * n];
        T::gemm(m, k, n, &a_re, dense_a, &b_re, dense_b, &mut c_re, dense_c, false);
        T::gemm(m, k, n, &a_re, dense_a, &b_eps, dense_b, &mut c_eps, dense_c, false);
        T::gemm(m, k, n, &a_eps, dense_a, &b_re, dense_b, &mut c_eps, dense_c, true);
        for i in 0..m {
            for j in 0..n {
                let ci = (i as isize * c_strides.0 + j as isize * c_strides.1) as usize;
                let v = Self::new(c_re[i * n + j], c_eps[i * n + j]);
                if accumulate {
                    c[ci] += v;
                } else {
                    c[ci] = v;
                }
            }
        }
    }
}

/// Converts a slice between scalar types through the primal value.
pub fn cast_slice<A: Real, B: Real>(src: &[A]) -> Vec<B> {
    src.iter().map(|v| B::from_f64(v.to_f64())).collect()
}
