//! Chebyshev interpolation on tensor grids.
//!
//! Roots are stored in descending order: `roots[0]` is the largest root
//! `cos(pi / 2l)`. Multi-indices are zero-based and flatten as
//! `a1 + a2 * l + a3 * l^2`. The symmetry module relies on both conventions,
//! so neither may change.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::Point;

/// Zero-based tensor index `(a1, a2, a3)` of an interpolation node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(pub [usize; 3]);

impl MultiIndex {
    pub fn new(a1: usize, a2: usize, a3: usize) -> Self {
        Self([a1, a2, a3])
    }

    /// Flat position of this node, `a1 + a2 l + a3 l^2`.
    pub fn flat(&self, order: usize) -> Result<usize> {
        if self.0.iter().any(|&a| a >= order) {
            return Err(Error::InvalidIndex {
                index: self.0,
                order,
            });
        }
        Ok(self.flat_unchecked(order))
    }

    #[inline]
    pub fn flat_unchecked(&self, order: usize) -> usize {
        self.0[0] + order * (self.0[1] + order * self.0[2])
    }

    /// Inverse of [`MultiIndex::flat`].
    pub fn from_flat(index: usize, order: usize) -> Result<Self> {
        if index >= order * order * order {
            return Err(Error::InvalidIndex {
                index: [index, 0, 0],
                order,
            });
        }
        Ok(Self::from_flat_unchecked(index, order))
    }

    #[inline]
    pub fn from_flat_unchecked(index: usize, order: usize) -> Self {
        Self([
            index % order,
            (index / order) % order,
            index / (order * order),
        ])
    }
}

/// Roots of the degree-`order` Chebyshev polynomial of the first kind,
/// descending. The lower half is the exact negation of the upper half and
/// the middle root of an odd order is exactly zero.
pub fn cheb_roots(order: usize) -> Result<Vec<f64>> {
    if order < 2 {
        return Err(Error::InvalidOrder(order));
    }
    let mut roots = vec![0.0; order];
    for i in 0..order / 2 {
        let x = ((2 * i + 1) as f64 * PI / (2 * order) as f64).cos();
        roots[i] = x;
        roots[order - 1 - i] = -x;
    }
    Ok(roots)
}

/// `T_k(x)` for `k = 0..n` by the three-term recurrence.
fn chebyshev_values(x: f64, n: usize, out: &mut [f64]) {
    debug_assert!(out.len() >= n);
    if n == 0 {
        return;
    }
    out[0] = 1.0;
    if n == 1 {
        return;
    }
    out[1] = x;
    for k in 2..n {
        out[k] = 2.0 * x * out[k - 1] - out[k - 2];
    }
}

/// Tensor Chebyshev interpolation grid of a fixed order.
#[derive(Debug, Clone)]
pub struct ChebyshevGrid {
    order: usize,
    roots: Vec<f64>,
    /// `T_k(root_i)` stored row-major as `[i * order + k]`.
    cheb_at_roots: Vec<f64>,
}

impl ChebyshevGrid {
    pub fn new(order: usize) -> Result<Self> {
        let roots = cheb_roots(order)?;
        let mut cheb_at_roots = vec![0.0; order * order];
        for (i, &r) in roots.iter().enumerate() {
            chebyshev_values(r, order, &mut cheb_at_roots[i * order..(i + 1) * order]);
        }
        Ok(Self {
            order,
            roots,
            cheb_at_roots,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of tensor nodes, `order^3`.
    pub fn len(&self) -> usize {
        self.order * self.order * self.order
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn roots(&self) -> &[f64] {
        &self.roots
    }

    /// Reference coordinates of the node with flat index `index`.
    pub fn reference_node(&self, index: usize) -> Point {
        let a = MultiIndex::from_flat_unchecked(index, self.order).0;
        [self.roots[a[0]], self.roots[a[1]], self.roots[a[2]]]
    }

    /// All nodes mapped into `cell`, ordered by flat index.
    pub fn nodes(&self, cell: &AffineMap) -> Vec<Point> {
        (0..self.len())
            .map(|m| cell.forward(&self.reference_node(m)))
            .collect()
    }

    /// `S_l(x, root_node)` for a single node.
    pub fn weight_1d(&self, x: f64, node: usize) -> f64 {
        let mut t = vec![0.0; self.order];
        chebyshev_values(x, self.order, &mut t);
        self.weight_from_values(&t, node)
    }

    fn weight_from_values(&self, t: &[f64], node: usize) -> f64 {
        let l = self.order as f64;
        let row = &self.cheb_at_roots[node * self.order..(node + 1) * self.order];
        let s: f64 = t[1..].iter().zip(&row[1..]).map(|(a, b)| a * b).sum();
        1.0 / l + 2.0 / l * s
    }

    /// `S_l(x, root_i)` for every node `i`.
    pub fn weights_1d(&self, x: f64, out: &mut [f64]) {
        let mut t = [0.0; 64];
        let t = if self.order <= 64 {
            &mut t[..self.order]
        } else {
            return self.weights_1d_alloc(x, out);
        };
        chebyshev_values(x, self.order, t);
        for (i, o) in out.iter_mut().enumerate().take(self.order) {
            *o = self.weight_from_values(t, i);
        }
    }

    fn weights_1d_alloc(&self, x: f64, out: &mut [f64]) {
        let mut t = vec![0.0; self.order];
        chebyshev_values(x, self.order, &mut t);
        for (i, o) in out.iter_mut().enumerate().take(self.order) {
            *o = self.weight_from_values(&t, i);
        }
    }

    /// Product of the three 1-D weights for node `alpha`.
    pub fn weight_3d(&self, x: &Point, alpha: MultiIndex) -> f64 {
        (0..3).map(|d| self.weight_1d(x[d], alpha.0[d])).product()
    }

    /// All `order^3` tensor weights of a reference point, by flat index.
    pub fn weights_3d(&self, x: &Point, out: &mut [f64]) {
        let l = self.order;
        let mut w = vec![0.0; 3 * l];
        for d in 0..3 {
            self.weights_1d(x[d], &mut w[d * l..(d + 1) * l]);
        }
        let (wx, rest) = w.split_at(l);
        let (wy, wz) = rest.split_at(l);
        for (a3, &z) in wz.iter().enumerate() {
            for (a2, &y) in wy.iter().enumerate() {
                let yz = y * z;
                let base = l * (a2 + l * a3);
                for (a1, &x) in wx.iter().enumerate() {
                    out[base + a1] = x * yz;
                }
            }
        }
    }
}

/// `S_l(x, root_{node})` for a one-off evaluation.
pub fn s_weight_1d(x: f64, node: usize, order: usize) -> Result<f64> {
    if node >= order {
        return Err(Error::InvalidIndex {
            index: [node, 0, 0],
            order,
        });
    }
    Ok(ChebyshevGrid::new(order)?.weight_1d(x, node))
}

/// Tensor weight `S_l(x, root_alpha)`.
pub fn s_weight_3d(x: &Point, alpha: MultiIndex, order: usize) -> Result<f64> {
    alpha.flat(order)?;
    Ok(ChebyshevGrid::new(order)?.weight_3d(x, alpha))
}

/// Axis-aligned cube `center +- half_width`, the image of `[-1, 1]^3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    pub center: Point,
    pub half_width: f64,
}

impl AffineMap {
    pub fn new(center: Point, half_width: f64) -> Result<Self> {
        if !(half_width > 0.0) || !half_width.is_finite() {
            return Err(Error::InvalidInput(format!(
                "half width must be positive, got {half_width}"
            )));
        }
        Ok(Self { center, half_width })
    }

    pub fn width(&self) -> f64 {
        2.0 * self.half_width
    }

    pub fn forward(&self, r: &Point) -> Point {
        [
            self.center[0] + self.half_width * r[0],
            self.center[1] + self.half_width * r[1],
            self.center[2] + self.half_width * r[2],
        ]
    }

    /// Pulls a point back into `[-1, 1]^3`. Points within `half_width * 1e-12`
    /// of the cell are clamped onto it.
    pub fn inverse(&self, p: &Point) -> Result<Point> {
        let slack = 1e-12;
        let mut r = [0.0; 3];
        for d in 0..3 {
            let v = (p[d] - self.center[d]) / self.half_width;
            if !(v.abs() <= 1.0 + slack) {
                return Err(Error::OutsideCell { point: *p });
            }
            r[d] = v.clamp(-1.0, 1.0);
        }
        Ok(r)
    }

    /// Like [`AffineMap::inverse`] but clamps instead of failing.
    pub fn inverse_clamped(&self, p: &Point) -> Point {
        let mut r = [0.0; 3];
        for d in 0..3 {
            r[d] = ((p[d] - self.center[d]) / self.half_width).clamp(-1.0, 1.0);
        }
        r
    }
}
