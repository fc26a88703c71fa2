use core::fmt;

/// Floating-point element type for tensors.
///
/// The whole pipeline is generic over this so that training runs in `f32`
/// (matching the on-disk container dtype) while gradient verification runs
/// at double precision.
pub trait Scalar:
    num_traits::Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}
