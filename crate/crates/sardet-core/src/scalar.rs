//! Scalar abstraction over the two supported float precisions.
//!
//! Training and benchmarks run at 32 bits; finite-difference gradient checks
//! run at 64 bits, where central differences are actually trustworthy. The
//! precision is fixed when a tape or parameter store is constructed.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Clone
    + Debug
    + Display
    + PartialOrd
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Dtype code used in the checkpoint format: 0 = f32, 1 = f64.
    const DTYPE_CODE: u8;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_bytes_slice(b: &[u8]) -> Self;
    /// Width of one scalar in bytes.
    const BYTES: usize;
}

macro_rules! impl_scalar {
    ($t:ty, $code:expr, $bytes:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE_CODE: u8 = $code;
            const BYTES: usize = $bytes;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn to_le_bytes_vec(self) -> Vec<u8> {
                self.to_le_bytes().to_vec()
            }
            #[inline]
            fn from_le_bytes_slice(b: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(b);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, 0, 4);
impl_scalar!(f64, 1, 8);
