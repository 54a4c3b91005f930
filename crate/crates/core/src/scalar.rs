use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Real scalar the numeric kernels are generic over (`f32` or `f64`).
pub trait Scalar: Float + FromPrimitive + Debug + Display + Sum + Send + Sync + 'static {
    /// Lossy conversion used for constants; panics only for values no float can hold.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }
}

impl<T> Scalar for T where T: Float + FromPrimitive + Debug + Display + Sum + Send + Sync + 'static {}
