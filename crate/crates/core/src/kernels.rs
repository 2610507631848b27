//! Kernel functions and dense M2L assembly.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::interp::{AffineMap, ChebyshevGrid};
use crate::octree::TransferVector;
use crate::scalar::{Scalar, ScalarKind};
use crate::Point;

const FOUR_PI: f64 = 4.0 * PI;

#[inline]
fn distance(x: &Point, y: &Point) -> f64 {
    let d = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// A translation-invariant, radially symmetric interaction kernel.
pub trait Kernel: Send + Sync {
    type Scalar: Scalar;

    /// Raw evaluation. Undefined (non-finite) at `x == y`.
    fn evaluate(&self, x: &Point, y: &Point) -> Self::Scalar;

    /// Degree `n` with `K(a x, a y) = a^n K(x, y)`, if the kernel is homogeneous.
    fn homogeneity_degree(&self) -> Option<f64>;

    fn name(&self) -> &'static str;

    fn scalar_kind(&self) -> ScalarKind {
        Self::Scalar::KIND
    }

    fn try_evaluate(&self, x: &Point, y: &Point) -> Result<Self::Scalar> {
        if x == y {
            return Err(Error::SingularEvaluation);
        }
        Ok(self.evaluate(x, y))
    }
}

/// `1 / (4 pi |x - y|)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Laplace;

impl Kernel for Laplace {
    type Scalar = f64;

    #[inline]
    fn evaluate(&self, x: &Point, y: &Point) -> f64 {
        1.0 / (FOUR_PI * distance(x, y))
    }

    fn homogeneity_degree(&self) -> Option<f64> {
        Some(-1.0)
    }

    fn name(&self) -> &'static str {
        "laplace"
    }
}

/// `exp(i k |x - y|) / (4 pi |x - y|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Helmholtz {
    pub wavenumber: f64,
}

impl Helmholtz {
    pub fn new(wavenumber: f64) -> Self {
        Self { wavenumber }
    }
}

impl Default for Helmholtz {
    fn default() -> Self {
        Self { wavenumber: 1.0 }
    }
}

impl Kernel for Helmholtz {
    type Scalar = Complex64;

    #[inline]
    fn evaluate(&self, x: &Point, y: &Point) -> Complex64 {
        let r = distance(x, y);
        let (s, c) = (self.wavenumber * r).sin_cos();
        Complex64::new(c, s) / (FOUR_PI * r)
    }

    fn homogeneity_degree(&self) -> Option<f64> {
        None
    }

    fn name(&self) -> &'static str {
        "helmholtz"
    }
}

pub fn laplace_eval(x: &Point, y: &Point) -> Result<f64> {
    Laplace.try_evaluate(x, y)
}

pub fn helmholtz_eval(x: &Point, y: &Point, wavenumber: f64) -> Result<Complex64> {
    Helmholtz::new(wavenumber).try_evaluate(x, y)
}

/// Dense M2L operator tagged with the geometry it was assembled for.
#[derive(Debug, Clone, PartialEq)]
pub struct M2lMatrix<T: Scalar> {
    pub matrix: DMatrix<T>,
    pub transfer: TransferVector,
    /// Cell width on the level the operator belongs to.
    pub width: f64,
}

/// `K[m(alpha), n(beta)] = K(x_alpha, y_beta)` for target nodes in `target`
/// and source nodes in `source`.
pub fn assemble_m2l<K: Kernel>(
    kernel: &K,
    target: &AffineMap,
    source: &AffineMap,
    grid: &ChebyshevGrid,
) -> Result<DMatrix<K::Scalar>> {
    let reach = target.half_width + source.half_width;
    let gap = (0..3)
        .map(|d| (target.center[d] - source.center[d]).abs() - reach)
        .fold(f64::NEG_INFINITY, f64::max);
    if gap <= 1e-12 * reach {
        return Err(Error::NotAdmissible);
    }
    // Evaluate on displacements so that t and -t give exact transposes.
    let dc: Point = std::array::from_fn(|d| target.center[d] - source.center[d]);
    let xs: Vec<Point> = (0..grid.len())
        .map(|i| grid.reference_node(i).map(|r| target.half_width * r))
        .collect();
    let ys: Vec<Point> = (0..grid.len())
        .map(|j| grid.reference_node(j).map(|r| source.half_width * r))
        .collect();
    let origin = [0.0; 3];
    Ok(DMatrix::from_fn(xs.len(), ys.len(), |i, j| {
        let d = std::array::from_fn(|k| dc[k] + (xs[i][k] - ys[j][k]));
        kernel.evaluate(&d, &origin)
    }))
}

/// Operator for the cell pair with transfer vector `t` on a level of cell
/// width `width`; the source cell sits at the origin.
pub fn assemble_transfer<K: Kernel>(
    kernel: &K,
    t: TransferVector,
    width: f64,
    grid: &ChebyshevGrid,
) -> Result<M2lMatrix<K::Scalar>> {
    let half = 0.5 * width;
    let source = AffineMap::new([0.0; 3], half)?;
    let c = t.0.map(|v| v as f64 * width);
    let target = AffineMap::new(c, half)?;
    Ok(M2lMatrix {
        matrix: assemble_m2l(kernel, &target, &source, grid)?,
        transfer: t,
        width,
    })
}

/// Rescales an operator of a homogeneous kernel to another level width.
pub fn scale_homogeneous<T: Scalar>(
    op: &M2lMatrix<T>,
    to_width: f64,
    degree: Option<f64>,
) -> Result<M2lMatrix<T>> {
    let n = degree.ok_or(Error::UnsupportedScaling)?;
    if !(to_width > 0.0) {
        return Err(Error::InvalidInput(format!(
            "width must be positive, got {to_width}"
        )));
    }
    let factor = (to_width / op.width).powf(n);
    Ok(M2lMatrix {
        matrix: op.matrix.map(|v| v.scale(factor)),
        transfer: op.transfer,
        width: to_width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::MultiIndex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut ChaCha8Rng) -> Point {
        [
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        ]
    }

    #[test]
    fn laplace_values() {
        let v = laplace_eval(&[0.0; 3], &[1.0, 0.0, 0.0]).unwrap();
        assert!((v - 0.0795774715459).abs() < 1e-12);
        let v2 = laplace_eval(&[0.0; 3], &[0.0, 2.0, 0.0]).unwrap();
        assert!((v2 - v / 2.0).abs() < 1e-17);
        assert_eq!(
            laplace_eval(&[1.0; 3], &[1.0; 3]),
            Err(Error::SingularEvaluation)
        );
    }

    #[test]
    fn helmholtz_values() {
        let v = helmholtz_eval(&[0.0; 3], &[PI, 0.0, 0.0], 1.0).unwrap();
        let want = -1.0 / (4.0 * PI * PI);
        assert!((v.re - want).abs() < 1e-16);
        assert!(v.im.abs() < 1e-16);
        assert!(helmholtz_eval(&[0.5; 3], &[0.5; 3], 1.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (x, y) = (random_point(&mut rng), random_point(&mut rng));
            let l = laplace_eval(&x, &y).unwrap();
            let h0 = helmholtz_eval(&x, &y, 0.0).unwrap();
            assert!((h0.re - l).abs() <= 1e-15 * l && h0.im == 0.0);
            let h1 = helmholtz_eval(&x, &y, 1.0).unwrap();
            assert!((h1.norm() - l).abs() <= 1e-14 * l);
        }
    }

    #[test]
    fn laplace_homogeneity_on_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Laplace.homogeneity_degree().unwrap();
        for _ in 0..20 {
            let (x, y) = (random_point(&mut rng), random_point(&mut rng));
            let a: f64 = rng.random_range(0.1..10.0);
            let lhs = Laplace.evaluate(&x.map(|v| a * v), &y.map(|v| a * v));
            let rhs = a.powf(n) * Laplace.evaluate(&x, &y);
            assert!((lhs - rhs).abs() <= 1e-14 * rhs.abs());
        }
        assert!(Helmholtz::default().homogeneity_degree().is_none());
    }

    #[test]
    fn assembled_entry_matches_direct_call() {
        let grid = ChebyshevGrid::new(2).unwrap();
        let op = assemble_transfer(&Laplace, TransferVector([2, 0, 0]), 1.0, &grid).unwrap();
        let target = AffineMap::new([2.0, 0.0, 0.0], 0.5).unwrap();
        let source = AffineMap::new([0.0; 3], 0.5).unwrap();
        let m = MultiIndex::new(1, 1, 1).flat(2).unwrap();
        let x = target.forward(&grid.reference_node(m));
        let y = source.forward(&grid.reference_node(m));
        let direct = laplace_eval(&x, &y).unwrap();
        assert!((op.matrix[(m, m)] - direct).abs() <= 1e-15 * direct);
        assert!(op.matrix.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn touching_cells_rejected() {
        let grid = ChebyshevGrid::new(3).unwrap();
        for t in [[1, 0, 0], [1, 1, 1], [0, 0, 0]] {
            assert_eq!(
                assemble_transfer(&Laplace, TransferVector(t), 1.0, &grid).unwrap_err(),
                Error::NotAdmissible
            );
        }
    }

    fn max_rel_dev<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (*x - *y).modulus() / y.modulus())
            .fold(0.0, f64::max)
    }

    #[test]
    fn reversed_transfer_is_transpose() {
        for order in 2..=4 {
            let grid = ChebyshevGrid::new(order).unwrap();
            for t in [[2, 0, 0], [3, -1, 2], [-2, 2, -3]] {
                let t = TransferVector(t);
                let a = assemble_transfer(&Laplace, t, 1.0, &grid).unwrap().matrix;
                let b = assemble_transfer(&Laplace, -t, 1.0, &grid).unwrap().matrix;
                assert!(max_rel_dev(&a, &b.transpose()) <= 1e-15);
                let h = Helmholtz::default();
                let a = assemble_transfer(&h, t, 1.0, &grid).unwrap().matrix;
                let b = assemble_transfer(&h, -t, 1.0, &grid).unwrap().matrix;
                assert!(max_rel_dev(&a, &b.transpose()) <= 1e-15);
            }
        }
    }

    #[test]
    fn homogeneous_scaling_matches_reassembly() {
        let grid = ChebyshevGrid::new(3).unwrap();
        let op2 = assemble_transfer(&Laplace, TransferVector([2, 0, 0]), 2.0, &grid).unwrap();
        let scaled = scale_homogeneous(&op2, 1.0, Laplace.homogeneity_degree()).unwrap();
        for (s, o) in scaled.matrix.iter().zip(op2.matrix.iter()) {
            assert!((s - 2.0 * o).abs() <= 1e-15 * s);
        }
        let direct = assemble_transfer(&Laplace, TransferVector([2, 0, 0]), 1.0, &grid).unwrap();
        assert!(max_rel_dev(&scaled.matrix, &direct.matrix) <= 1e-14);

        let same = scale_homogeneous(&op2, 2.0, Some(-1.0)).unwrap();
        assert_eq!(same.matrix, op2.matrix);

        let h = assemble_transfer(&Helmholtz::default(), TransferVector([2, 0, 0]), 1.0, &grid)
            .unwrap();
        assert_eq!(
            scale_homogeneous(&h, 2.0, Helmholtz::default().homogeneity_degree()).unwrap_err(),
            Error::UnsupportedScaling
        );
    }

    #[test]
    fn homogeneous_scaling_random_transfers() {
        let grid = ChebyshevGrid::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut done = 0;
        while done < 5 {
            let t = TransferVector([
                rng.random_range(-3..=3),
                rng.random_range(-3..=3),
                rng.random_range(-3..=3),
            ]);
            if t.0.iter().all(|v| v.abs() <= 1) {
                continue;
            }
            done += 1;
            for (w, w2) in [(1.0, 2.0), (1.0, 0.5)] {
                let from = assemble_transfer(&Laplace, t, w2, &grid).unwrap();
                let scaled = scale_homogeneous(&from, w, Some(-1.0)).unwrap();
                let direct = assemble_transfer(&Laplace, t, w, &grid).unwrap();
                assert!(max_rel_dev(&scaled.matrix, &direct.matrix) <= 1e-14);
            }
        }
    }
}
