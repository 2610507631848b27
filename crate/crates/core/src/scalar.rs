use std::fmt::Debug;

use nalgebra::ComplexField;
use num_complex::Complex64;

/// Scalar field of a kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarKind {
    Real,
    Complex,
}

/// Field the whole pipeline is generic over: `f64` or `Complex64`.
pub trait Scalar: ComplexField<RealField = f64> + Copy + Default + Send + Sync + Debug {
    const KIND: ScalarKind;

    /// Storage width in bytes, used by the memory accounting.
    const BYTES: usize = std::mem::size_of::<Self>();

    fn is_finite_value(self) -> bool;
}

impl Scalar for f64 {
    const KIND: ScalarKind = ScalarKind::Real;

    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for Complex64 {
    const KIND: ScalarKind = ScalarKind::Complex;

    fn is_finite_value(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}
