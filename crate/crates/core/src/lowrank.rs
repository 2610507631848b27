//! Truncated SVD and adaptive cross approximation (ACA) with SVD
//! recompression.
//!
//! Truncation keeps every singular value with `sigma_i > eps * sigma_1`.
//! Singular values are folded into the left factor, so a factorization reads
//! `A ~ left * right^H` with `right` orthonormal.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors<T: Scalar> {
    /// `rows x r`
    pub left: DMatrix<T>,
    /// `cols x r`
    pub right: DMatrix<T>,
}

impl<T: Scalar> LowRankFactors<T> {
    pub fn rank(&self) -> usize {
        self.left.ncols()
    }

    pub fn rows(&self) -> usize {
        self.left.nrows()
    }

    pub fn cols(&self) -> usize {
        self.right.nrows()
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        &self.left * self.right.adjoint()
    }

    /// Scalars held by both factors.
    pub fn stored_scalars(&self) -> usize {
        self.left.len() + self.right.len()
    }

    /// Flops of one matrix-vector application, `2 (rows + cols) r`.
    pub fn apply_flops(&self) -> u64 {
        2 * ((self.rows() + self.cols()) * self.rank()) as u64
    }

    /// `out += left * (right^H * x)`.
    pub fn apply_add(&self, x: &[T], out: &mut [T]) {
        let r = self.rank();
        if r == 0 {
            return;
        }
        let mut tmp = vec![T::zero(); r];
        for (k, t) in tmp.iter_mut().enumerate() {
            let col = self.right.column(k);
            *t = col
                .iter()
                .zip(x)
                .fold(T::zero(), |acc, (v, xi)| acc + v.conjugate() * *xi);
        }
        for (k, &t) in tmp.iter().enumerate() {
            let col = self.left.column(k);
            for (o, l) in out.iter_mut().zip(col.iter()) {
                *o += *l * t;
            }
        }
    }
}

/// Relative spread below which neighbouring singular values count as one cluster.
pub const CLUSTER_TOLERANCE: f64 = 1e-6;

/// Number of singular values kept by the truncation rule: every
/// `sigma_i > eps * sigma_1`, extended so that a cluster of numerically equal
/// singular values is never split. Without the extension the truncated
/// matrix would depend on an arbitrary basis of a degenerate subspace.
pub fn truncation_rank(sorted_singular_values: &[f64], eps: f64) -> usize {
    let s = sorted_singular_values;
    let Some(&s1) = s.first().filter(|&&v| v > 0.0) else {
        return 0;
    };
    let mut r = s.iter().take_while(|&&v| v > eps * s1).count();
    while r > 0 && r < s.len() && s[r - 1] - s[r] <= CLUSTER_TOLERANCE * s[r - 1] {
        r += 1;
    }
    r
}

/// Thin SVD with singular values sorted descending: `(U, sigma, V)` with
/// `A = U diag(sigma) V^H`, `U` of size `m x k`, `V` of size `n x k`,
/// `k = min(m, n)`.
///
/// One-sided Jacobi on `R^H`, where `R` comes from a QR factorization of `A`
/// with columns sorted by decreasing norm. Slower than bidiagonalization but
/// accurate to working precision on the clustered spectra of M2L operators.
pub fn sorted_svd<T: Scalar>(a: &DMatrix<T>) -> (DMatrix<T>, Vec<f64>, DMatrix<T>) {
    let (m, n) = a.shape();
    if m < n {
        let (u, s, v) = sorted_svd(&a.adjoint());
        return (v, s, u);
    }
    if n == 0 {
        return (DMatrix::zeros(m, 0), Vec::new(), DMatrix::zeros(0, 0));
    }
    let norms: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let ap = DMatrix::from_fn(m, n, |r, c| a[(r, perm[c])]);
    let (q, r) = ap.qr().unpack();
    // R^H = X = U_x S V_x^H, so A P = (Q V_x) S U_x^H
    let (ux, sigma, vx) = jacobi_svd(r.adjoint());
    let u = q * vx;
    let mut v = DMatrix::zeros(n, n);
    for (i, &pi) in perm.iter().enumerate() {
        v.row_mut(pi).copy_from(&ux.row(i));
    }
    (u, sigma, v)
}

/// One-sided Jacobi SVD of a square or tall matrix, sorted descending.
fn jacobi_svd<T: Scalar>(mut u: DMatrix<T>) -> (DMatrix<T>, Vec<f64>, DMatrix<T>) {
    let (m, n) = u.shape();
    let mut v = DMatrix::<T>::identity(n, n);
    let mut norms: Vec<f64> = (0..n).map(|j| u.column(j).norm_squared()).collect();
    // Rotations below this only move entries far under the rounding level of
    // the largest singular value.
    let floor = JACOBI_TOLERANCE * norms.iter().fold(0.0f64, |a, &b| a.max(b)) * 1e-3;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = u.column(p).dotc(&u.column(q));
                let g = gamma.modulus();
                if g <= JACOBI_TOLERANCE * (alpha * beta).sqrt() || g <= floor {
                    continue;
                }
                rotated = true;
                let phase = gamma.scale(1.0 / g);
                let zeta = (beta - alpha) / (2.0 * g);
                let t = if zeta >= 0.0 { 1.0 } else { -1.0 }
                    / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, phase, c, s, m);
                rotate(&mut v, p, q, phase, c, s, n);
                norms[p] = u.column(p).norm_squared();
                norms[q] = u.column(q).norm_squared();
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Vec<f64> = (0..n).map(|j| u.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let sorted: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();
    let u = DMatrix::from_fn(m, n, |r, c| {
        let s = sigma[order[c]];
        if s > 0.0 {
            u[(r, order[c])].scale(1.0 / s)
        } else {
            T::zero()
        }
    });
    let v = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (u, sorted, v)
}

const JACOBI_MAX_SWEEPS: usize = 60;
const JACOBI_TOLERANCE: f64 = 1e-15;

/// Columns `p`, `q` of `a` become `c a_p - s e a_q` and `s a_p + c e a_q`
/// with `e = conj(phase)`.
fn rotate<T: Scalar>(
    a: &mut DMatrix<T>,
    p: usize,
    q: usize,
    phase: T,
    c: f64,
    s: f64,
    rows: usize,
) {
    let e = phase.conjugate();
    let data = a.as_mut_slice();
    let (lo, hi) = data.split_at_mut(q * rows);
    let cp = &mut lo[p * rows..(p + 1) * rows];
    let cq = &mut hi[..rows];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let yq = *y * e;
        let xp = *x;
        *x = xp.scale(c) - yq.scale(s);
        *y = xp.scale(s) + yq.scale(c);
    }
}

pub fn singular_values<T: Scalar>(a: &DMatrix<T>) -> Vec<f64> {
    sorted_svd(a).1
}

fn check_finite<T: Scalar>(a: &DMatrix<T>) -> Result<()> {
    if a.iter().all(|v| v.is_finite_value()) {
        Ok(())
    } else {
        Err(Error::InvalidMatrix)
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "accuracy must be positive, got {eps}"
        )))
    }
}

pub fn truncated_svd<T: Scalar>(a: &DMatrix<T>, eps: f64) -> Result<LowRankFactors<T>> {
    check_eps(eps)?;
    check_finite(a)?;
    if a.is_empty() {
        return Ok(LowRankFactors {
            left: DMatrix::zeros(a.nrows(), 0),
            right: DMatrix::zeros(a.ncols(), 0),
        });
    }
    let (u, sigma, v) = sorted_svd(a);
    let r = truncation_rank(&sigma, eps);
    let mut left = u.columns(0, r).into_owned();
    for (k, mut col) in left.column_iter_mut().enumerate() {
        col *= T::from_real(sigma[k]);
    }
    Ok(LowRankFactors {
        left,
        right: v.columns(0, r).into_owned(),
    })
}

/// Result of [`aca_plus_svd`].
#[derive(Debug, Clone)]
pub struct AcaOutcome<T: Scalar> {
    pub factors: LowRankFactors<T>,
    /// Number of crosses before recompression.
    pub cross_rank: usize,
    /// ACA found nothing to pivot on and the matrix was assembled densely.
    pub fell_back: bool,
}

/// Consecutive zero residual rows after which the approximation is taken
/// as exact.
const ZERO_ROW_RETRIES: usize = 8;

/// Consecutive crosses that must satisfy the stopping test. A single small
/// cross can come from a row that misses a cluster of singular values just
/// above the threshold.
const CONVERGED_CROSSES: usize = 3;

/// Partially pivoted ACA to accuracy `eps`, followed by QR of both factors
/// and a truncated SVD of the small core.
pub fn aca_plus_svd<T, F>(eval: F, rows: usize, cols: usize, eps: f64) -> Result<AcaOutcome<T>>
where
    T: Scalar,
    F: Fn(usize, usize) -> T,
{
    check_eps(eps)?;
    let max_rank = rows.min(cols);
    let mut us: Vec<DVector<T>> = Vec::new();
    let mut vs: Vec<DVector<T>> = Vec::new();
    let mut used = vec![false; rows];
    let mut norm2 = 0.0f64;
    let mut row = 0usize;
    let mut zero_rows = 0usize;
    let mut converged = 0usize;

    while us.len() < max_rank {
        used[row] = true;
        let mut r = DVector::<T>::from_fn(cols, |j, _| eval(row, j));
        if !r.iter().all(|v| v.is_finite_value()) {
            return Err(Error::InvalidMatrix);
        }
        for (u, v) in us.iter().zip(&vs) {
            let ui = u[row];
            for (rj, vj) in r.iter_mut().zip(v.iter()) {
                *rj -= ui * vj.conjugate();
            }
        }
        let (pivot_col, pivot_abs) =
            r.iter()
                .enumerate()
                .map(|(j, v)| (j, v.modulus()))
                .fold(
                    (0, 0.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );

        if pivot_abs == 0.0 {
            zero_rows += 1;
            match used.iter().position(|u| !u) {
                Some(next) if zero_rows < ZERO_ROW_RETRIES => {
                    row = next;
                    continue;
                }
                _ => break,
            }
        }
        zero_rows = 0;

        let delta = r[pivot_col];
        let v = r.map(|x| (x / delta).conjugate());
        let mut u = DVector::<T>::from_fn(rows, |i, _| eval(i, pivot_col));
        for (ul, vl) in us.iter().zip(&vs) {
            let c = vl[pivot_col].conjugate();
            for (ui, uli) in u.iter_mut().zip(ul.iter()) {
                *ui -= *uli * c;
            }
        }

        let (un, vn) = (u.norm(), v.norm());
        let mut cross = 0.0;
        for (ul, vl) in us.iter().zip(&vs) {
            cross += (ul.dotc(&u) * v.dotc(vl)).real();
        }
        norm2 += 2.0 * cross + un * un * vn * vn;

        us.push(u);
        vs.push(v);

        if un * vn <= eps * norm2.max(0.0).sqrt() {
            converged += 1;
            if converged >= CONVERGED_CROSSES {
                break;
            }
        } else {
            converged = 0;
        }
        let last = us.last().expect("just pushed");
        match (0..rows)
            .filter(|&i| !used[i])
            .map(|i| (i, last[i].modulus()))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            }) {
            Some((i, _)) => row = i,
            None => break,
        }
    }

    if us.is_empty() {
        let dense = DMatrix::from_fn(rows, cols, eval);
        return Ok(AcaOutcome {
            factors: truncated_svd(&dense, eps)?,
            cross_rank: 0,
            fell_back: true,
        });
    }

    let cross_rank = us.len();
    let u = DMatrix::from_columns(&us);
    let v = DMatrix::from_columns(&vs);
    Ok(AcaOutcome {
        factors: recompress(&u, &v, eps)?,
        cross_rank,
        fell_back: false,
    })
}

/// Truncates `u * v^H` to accuracy `eps` without forming it.
pub fn recompress<T: Scalar>(
    u: &DMatrix<T>,
    v: &DMatrix<T>,
    eps: f64,
) -> Result<LowRankFactors<T>> {
    let qr_u = u.clone().qr();
    let qr_v = v.clone().qr();
    let core = qr_u.r() * qr_v.r().adjoint();
    let small = truncated_svd(&core, eps)?;
    Ok(LowRankFactors {
        left: qr_u.q() * small.left,
        right: qr_v.q() * small.right,
    })
}

/// Upper-triangular factor `R` of the vertical stack of `blocks`, all with
/// the same column count. Blocks are reduced in chunks, so the stack is
/// never held in memory at once. Only `R^H R = A^H A` is determined, which
/// fixes the singular values and right singular vectors of the stack.
pub fn stacked_r_factor<T, F>(count: usize, cols: usize, block: F) -> DMatrix<T>
where
    T: Scalar,
    F: Fn(usize) -> DMatrix<T> + Sync,
{
    let rows_per_chunk = 8 * cols.max(1);
    let first = if count > 0 {
        block(0).nrows().max(1)
    } else {
        1
    };
    let per_chunk = (rows_per_chunk / first).max(1);
    let chunks: Vec<usize> = (0..count).step_by(per_chunk).collect();
    let partial: Vec<DMatrix<T>> = chunks
        .par_iter()
        .map(|&start| {
            let end = (start + per_chunk).min(count);
            let blocks: Vec<DMatrix<T>> = (start..end).map(&block).collect();
            r_of(&vstack(&blocks, cols))
        })
        .collect();
    reduce_r(partial, cols)
}

fn reduce_r<T: Scalar>(mut parts: Vec<DMatrix<T>>, cols: usize) -> DMatrix<T> {
    if parts.is_empty() {
        return DMatrix::zeros(0, cols);
    }
    while parts.len() > 1 {
        parts = parts
            .par_chunks(8)
            .map(|group| r_of(&vstack(group, cols)))
            .collect();
    }
    parts.pop().expect("one part left")
}

fn r_of<T: Scalar>(a: &DMatrix<T>) -> DMatrix<T> {
    if a.nrows() == 0 {
        return DMatrix::zeros(0, a.ncols());
    }
    a.clone().qr().r()
}

fn vstack<T: Scalar>(blocks: &[DMatrix<T>], cols: usize) -> DMatrix<T> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        out.view_mut((at, 0), (b.nrows(), cols)).copy_from(b);
        at += b.nrows();
    }
    out
}

/// `||a - b||_F / ||b||_F`.
pub fn relative_frobenius<T: Scalar>(approx: &DMatrix<T>, exact: &DMatrix<T>) -> f64 {
    (approx - exact).norm() / exact.norm()
}
