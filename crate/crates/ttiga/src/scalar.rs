use num_traits::{Float, FromPrimitive, NumAssign};

/// Scalar type the whole crate is generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + std::iter::Sum + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Shorthand for lossy conversion from `f64` literals.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
