use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Element type of all tensors. Implemented for `f32` and `f64`; every
/// numeric routine in this crate is written against this trait and the
/// crate-root aliases pick the concrete width.
pub trait Scalar: Float + Sum + Debug + Display + Default + 'static {
    /// Lossless-enough conversion from an `f64` literal or computed constant.
    fn from_f64(v: f64) -> Self {
        Self::from(v).expect("constant not representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
