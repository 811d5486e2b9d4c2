//! Scalar abstraction for the floating-point side of the simulator.
//!
//! Time, rate, and power arithmetic is generic over [`Scalar`] so the same
//! kernels run at `f32` or `f64`. Byte and count accounting stays on `u64`
//! (with `u128` intermediates) and is not part of this trait. The crate root
//! exports `f64` instantiations used by the CLI and service layers.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts a finite `f64` constant (defaults, config values).
    fn from_config(v: f64) -> Self {
        Self::from_f64(v).expect("finite config value")
    }

    /// Converts a count; rounds when the mantissa cannot hold it.
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count converts to float")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + Debug
        + Display
        + Default
        + Serialize
        + DeserializeOwned
        + Send
        + Sync
        + 'static
{
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_float_widths_implement_scalar() {
        fn takes_scalar<S: Scalar>(v: S) -> f64 {
            v.as_f64()
        }
        assert_eq!(takes_scalar(1.5f32), 1.5);
        assert_eq!(takes_scalar(1.5f64), 1.5);
        assert_eq!(f32::from_count(28), 28.0);
        assert_eq!(f64::from_config(2.8e-3), 2.8e-3);
    }
}
