use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type of tensors: `f32` for regular runs, `f64` for verification
/// (gradient checks need the extra headroom).
pub trait Scalar:
    num_traits::Float + Sum + Send + Sync + Debug + Display + Default + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
    /// Gauss error function, used by the exact GELU.
    fn erf(self) -> Self;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Standard normal CDF, the Phi in GELU(x) = x * Phi(x).
pub fn norm_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (T::one() + (x * inv_sqrt2).erf())
}

/// Standard normal PDF, used in the GELU derivative.
pub fn norm_pdf<T: Scalar>(x: T) -> T {
    let c = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    c * (-(x * x) * T::from_f64(0.5)).exp()
}
