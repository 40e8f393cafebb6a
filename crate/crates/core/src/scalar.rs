//! Scalar abstraction for the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type usable by the fusion, conflict, routing and metric
/// kernels: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal, panicking only if the target type cannot
    /// represent it (never the case for `f32`/`f64`).
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Clamps into `[lo, hi]`.
    fn clamp_to(self, lo: Self, hi: Self) -> Self {
        if self < lo {
            lo
        } else if self > hi {
            hi
        } else {
            self
        }
    }

    fn in_unit_interval(self) -> bool {
        self >= Self::zero() && self <= Self::one()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Renders a value with exactly three decimals. Ties on the exact binary value
/// round to even, which is what the standard formatter does.
pub fn fmt3(x: f64) -> String {
    format!("{x:.3}")
}

/// Rounds to three decimals (half-even on the exact binary value).
pub fn round3(x: f64) -> f64 {
    fmt3(x).parse().unwrap_or(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_decimal_rendering_is_half_even() {
        assert_eq!(fmt3(0.0625), "0.062");
        assert_eq!(fmt3(0.1875), "0.188");
        assert_eq!(fmt3(0.698_275_862), "0.698");
        assert_eq!(fmt3(1.0), "1.000");
    }

    #[test]
    fn clamp_and_lit() {
        assert_eq!(1.5f64.clamp_to(0.0, 1.0), 1.0);
        assert_eq!((-0.5f32).clamp_to(0.0, 1.0), 0.0);
        assert_eq!(<f32 as Scalar>::lit(0.25), 0.25f32);
        assert!(0.3f64.in_unit_interval());
        assert!(!1.01f64.in_unit_interval());
    }
}
