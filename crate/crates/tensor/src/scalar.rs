use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

/// Scalar element type of the engine: `f32` for compute, `f64` for the
/// gradient-check shadow mode.
pub trait Scalar:
    Float + NumAssign + Sum + Send + Sync + Debug + Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// exp() on the hot softmax path. The f32 compute path uses a
    /// polynomial within ~2 ulp; the f64 shadow mode keeps libm precision
    /// for the finite-difference harness.
    fn exp_fast(self) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn exp_fast(self) -> Self {
        exp_poly_f32(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn exp_fast(self) -> Self {
        self.exp()
    }
}

/// exp(x) = 2^n * exp(t) with n = round(x*log2(e)), t = x - n*ln(2),
/// |t| <= ln(2)/2; degree-6 Taylor keeps the relative error near 1e-7.
#[inline]
fn exp_poly_f32(x: f32) -> f32 {
    if x < -87.0 {
        return 0.0;
    }
    if x > 88.0 {
        return f32::INFINITY;
    }
    const LOG2_E: f32 = std::f32::consts::LOG2_E;
    // Two-part ln(2) keeps the range reduction exact for |n| < 2^11.
    const LN2_HI: f32 = 6.931_457_5e-1;
    const LN2_LO: f32 = 1.428_606_8e-6;
    // Round to nearest via the 1.5*2^23 shift; branchless and inlinable,
    // exact for the clamped |x*log2(e)| < 128.
    const MAGIC: f32 = 12_582_912.0;
    let n = (x * LOG2_E + MAGIC) - MAGIC;
    let t = (x - n * LN2_HI) - n * LN2_LO;
    let p = 1.0
        + t * (1.0
            + t * (0.5
                + t * (1.0 / 6.0
                    + t * (1.0 / 24.0 + t * (1.0 / 120.0 + t * (1.0 / 720.0))))));
    let scale = f32::from_bits((((n as i32) + 127) << 23) as u32);
    scale * p
}
