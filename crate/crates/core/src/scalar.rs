//! Floating point abstraction shared by every numeric routine in the crate.
//!
//! Training runs in `f32`; the finite-difference harness and the loss oracles
//! run the same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; used for literals and configuration values.
    fn of(v: f64) -> Self;

    fn of_usize(v: usize) -> Self {
        Self::of(v as f64)
    }

    fn to_f64_lossy(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

/// `out += scale * a`
#[inline]
pub fn axpy<T: Scalar>(scale: T, a: &[T], out: &mut [T]) {
    for (o, x) in out.iter_mut().zip(a) {
        *o += scale * *x;
    }
}

/// `out += scale * a ⊙ b`
#[inline]
pub fn axpy_hadamard<T: Scalar>(scale: T, a: &[T], b: &[T], out: &mut [T]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += scale * *x * *y;
    }
}
