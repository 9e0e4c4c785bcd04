//! Scalar traits shared by the numeric kernels.
//!
//! Two levels are used. [`Coefficient`] is enough to evaluate the mixture
//! polynomial and its symbolic derivatives, so it admits exact rationals.
//! [`Real`] adds the floating point operations (square roots, eigen
//! decompositions, Gaussian sampling) needed everywhere else.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, Num, NumAssign, ToPrimitive};

/// Ring element with the operations required by polynomial bookkeeping.
pub trait Coefficient: Num + NumAssign + Copy + PartialOrd + Debug + Send + Sync + 'static {
    /// Embeds a small nonnegative integer (a multinomial count or an exponent).
    fn from_count(n: usize) -> Self {
        let mut acc = Self::zero();
        for _ in 0..n {
            acc += Self::one();
        }
        acc
    }

    /// Equality used when validating inputs: exact for rationals, relative 1e-9 for floats.
    fn approx_eq(self, other: Self) -> bool {
        self == other
    }
}

impl Coefficient for f32 {
    fn from_count(n: usize) -> Self {
        n as f32
    }

    fn approx_eq(self, other: Self) -> bool {
        (self - other).abs() <= 1e-6 * (1.0 + self.abs().max(other.abs()))
    }
}

impl Coefficient for f64 {
    fn from_count(n: usize) -> Self {
        n as f64
    }

    fn approx_eq(self, other: Self) -> bool {
        (self - other).abs() <= 1e-9 * (1.0 + self.abs().max(other.abs()))
    }
}

impl Coefficient for num_rational::Ratio<i128> {}

/// f32 or f64.
pub trait Real:
    Coefficient + Float + FromPrimitive + ToPrimitive + Display + Sum + Default
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}
