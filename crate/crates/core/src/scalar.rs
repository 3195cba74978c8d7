//! Real-valued scalar abstraction.
//!
//! Quantization scales and the approximate nonlinear units are written
//! against [`Real`] so they can run in either `f32` or `f64`. Integer
//! datapaths (int8 operands, int32 accumulators) are fixed-width and not
//! generic.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-or-nearest conversion from `f64`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real always converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
