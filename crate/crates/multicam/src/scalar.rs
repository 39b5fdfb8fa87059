//! Number abstraction shared by plain floats and Taylor jets.
//!
//! Dynamics and risk formulas are written once against [`Number`] and run
//! either on `f32`/`f64` or on [`crate::dajet::Jet`].

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_traits::Float;

pub trait Number:
    Clone
    + Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    type Scalar: Float + Debug + Send + Sync + 'static;

    /// Value at zero perturbation.
    fn value(&self) -> Self::Scalar;
    /// A constant living in the same space as `self`.
    fn lift(&self, c: Self::Scalar) -> Self;
    fn scale(self, k: Self::Scalar) -> Self;
    fn shift(self, k: Self::Scalar) -> Self;
    fn sqrt(self) -> Self;
    fn recip(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn powf(self, p: Self::Scalar) -> Self;

    fn lit(&self, c: f64) -> Self {
        self.lift(<Self::Scalar as num_traits::NumCast>::from(c).expect("literal fits scalar"))
    }
    fn square(self) -> Self {
        self.clone() * self
    }
}

macro_rules! float_number {
    ($t:ty) => {
        impl Number for $t {
            type Scalar = $t;
            #[inline]
            fn value(&self) -> $t {
                *self
            }
            #[inline]
            fn lift(&self, c: $t) -> $t {
                c
            }
            #[inline]
            fn scale(self, k: $t) -> $t {
                self * k
            }
            #[inline]
            fn shift(self, k: $t) -> $t {
                self + k
            }
            #[inline]
            fn sqrt(self) -> $t {
                <$t>::sqrt(self)
            }
            #[inline]
            fn recip(self) -> $t {
                <$t>::recip(self)
            }
            #[inline]
            fn exp(self) -> $t {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> $t {
                <$t>::ln(self)
            }
            #[inline]
            fn sin(self) -> $t {
                <$t>::sin(self)
            }
            #[inline]
            fn cos(self) -> $t {
                <$t>::cos(self)
            }
            #[inline]
            fn powf(self, p: $t) -> $t {
                <$t>::powf(self, p)
            }
        }
    };
}

float_number!(f32);
float_number!(f64);

/// Converts an `f64` literal into a generic float.
#[inline]
pub fn c<T: Float>(x: f64) -> T {
    T::from(x).expect("literal fits scalar")
}
