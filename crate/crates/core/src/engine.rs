//! Multilevel pipeline: P2M, M2M, M2L, L2L, L2P and P2P over a uniform octree.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interp::{AffineMap, ChebyshevGrid};
use crate::kernels::Kernel;
use crate::m2l::{FlopRecord, LevelTransfers, M2lConfig, M2lHandler, Variant};
use crate::octree::{InteractionLists, Octree};
use crate::scalar::Scalar;
use crate::Point;

/// Highest level of the upward and downward passes; levels 0 and 1 carry
/// no far pairs.
pub const TOP_LEVEL: usize = 2;

/// Potentials `f_i = sum_j K(x_i, y_j) w_j`, skipping coincident points.
pub fn direct_sum<K: Kernel>(
    kernel: &K,
    targets: &[Point],
    sources: &[Point],
    weights: &[K::Scalar],
) -> Result<Vec<K::Scalar>> {
    if sources.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "{} sources but {} weights",
            sources.len(),
            weights.len()
        )));
    }
    Ok(targets
        .par_iter()
        .map(|x| {
            let mut acc = nalgebra::zero::<K::Scalar>();
            for (y, &w) in sources.iter().zip(weights) {
                if x != y {
                    acc += kernel.evaluate(x, y) * w;
                }
            }
            acc
        })
        .collect())
}

/// Child-to-parent interpolation matrices, one per octant.
///
/// `M[o][beta, alpha] = S(child node alpha in parent frame, parent node beta)`.
/// The octant bit `d` set means the upper half along axis `d`.
pub fn m2m_operators(grid: &ChebyshevGrid) -> [DMatrix<f64>; 8] {
    let n = grid.len();
    std::array::from_fn(|o| {
        let child = AffineMap {
            center: std::array::from_fn(|d| if o >> d & 1 == 1 { 0.5 } else { -0.5 }),
            half_width: 0.5,
        };
        let nodes = grid.nodes(&child);
        let mut m = DMatrix::zeros(n, n);
        let mut w = vec![0.0; n];
        for (alpha, x) in nodes.iter().enumerate() {
            grid.weights_3d(x, &mut w);
            for (beta, &v) in w.iter().enumerate() {
                m[(beta, alpha)] = v;
            }
        }
        m
    })
}

/// Parent-to-child interpolation matrices: the transposes of [`m2m_operators`].
pub fn l2l_operators(grid: &ChebyshevGrid) -> [DMatrix<f64>; 8] {
    let mut ops = m2m_operators(grid);
    for m in ops.iter_mut() {
        m.transpose_mut();
    }
    ops
}

/// Multipole expansion of a set of particles in `cell`: `W_beta = sum_j S(y_j, y_beta) w_j`.
pub fn p2m<T: Scalar>(
    grid: &ChebyshevGrid,
    cell: &AffineMap,
    points: &[Point],
    weights: &[T],
    out: &mut [T],
) {
    let mut s = vec![0.0; grid.len()];
    for (p, &w) in points.iter().zip(weights) {
        grid.weights_3d(&cell.inverse_clamped(p), &mut s);
        for (o, &v) in out.iter_mut().zip(&s) {
            *o += w.scale(v);
        }
    }
}

/// Evaluates a local expansion at `points`, adding into `out`.
pub fn l2p<T: Scalar>(
    grid: &ChebyshevGrid,
    cell: &AffineMap,
    local: &[T],
    points: &[Point],
    out: &mut [T],
) {
    let mut s = vec![0.0; grid.len()];
    for (p, o) in points.iter().zip(out.iter_mut()) {
        grid.weights_3d(&cell.inverse_clamped(p), &mut s);
        for (&f, &v) in local.iter().zip(&s) {
            *o += f.scale(v);
        }
    }
}

/// `y += a * x` for a real matrix acting on scalar vectors.
fn real_gemv_add<T: Scalar>(a: &DMatrix<f64>, x: &[T], y: &mut [T]) {
    for (j, &xj) in x.iter().enumerate() {
        for (yi, &v) in y.iter_mut().zip(a.column(j).iter()) {
            *yi += xj.scale(v);
        }
    }
}

/// A precomputed FMM for one particle set, kernel and interpolation order.
#[derive(Debug)]
pub struct FmmPlan<K: Kernel> {
    kernel: K,
    tree: Octree,
    lists: InteractionLists,
    grid: ChebyshevGrid,
    m2m: [DMatrix<f64>; 8],
    l2l: [DMatrix<f64>; 8],
    handler: M2lHandler<K::Scalar>,
}

impl<K: Kernel> FmmPlan<K> {
    pub fn new(
        particles: &[Point],
        bbox: AffineMap,
        depth: usize,
        kernel: K,
        order: usize,
        config: M2lConfig,
    ) -> Result<Self> {
        let grid = ChebyshevGrid::new(order)?;
        let tree = Octree::build(particles, bbox, depth)?;
        let lists = InteractionLists::build(&tree);
        let handler = build_handler(&kernel, &tree, &lists, &grid, config)?;
        Ok(Self {
            m2m: m2m_operators(&grid),
            l2l: l2l_operators(&grid),
            kernel,
            tree,
            lists,
            grid,
            handler,
        })
    }

    /// A plan with the tree and interaction lists but no M2L operators; call
    /// [`FmmPlan::rebuild_handler`] before [`FmmPlan::run`].
    pub fn unprepared(
        particles: &[Point],
        bbox: AffineMap,
        depth: usize,
        kernel: K,
        order: usize,
    ) -> Result<Self> {
        let grid = ChebyshevGrid::new(order)?;
        let tree = Octree::build(particles, bbox, depth)?;
        let lists = InteractionLists::build(&tree);
        let handler =
            M2lHandler::precompute(&kernel, &grid, &[], M2lConfig::new(Variant::Na, 0.5))?;
        Ok(Self {
            m2m: m2m_operators(&grid),
            l2l: l2l_operators(&grid),
            kernel,
            tree,
            lists,
            grid,
            handler,
        })
    }

    /// Replaces the M2L operators, keeping the tree and lists.
    pub fn rebuild_handler(&mut self, config: M2lConfig) -> Result<()> {
        self.handler = build_handler(&self.kernel, &self.tree, &self.lists, &self.grid, config)?;
        Ok(())
    }

    pub fn kernel(&self) -> &K {
        &self.kernel
    }

    pub fn tree(&self) -> &Octree {
        &self.tree
    }

    pub fn lists(&self) -> &InteractionLists {
        &self.lists
    }

    pub fn grid(&self) -> &ChebyshevGrid {
        &self.grid
    }

    pub fn handler(&self) -> &M2lHandler<K::Scalar> {
        &self.handler
    }

    pub fn order(&self) -> usize {
        self.grid.order()
    }

    pub fn flop_report(&self) -> Vec<FlopRecord> {
        self.handler.flop_report()
    }

    /// Potentials at every particle, in input order.
    pub fn run(&self, weights: &[K::Scalar]) -> Result<Vec<K::Scalar>> {
        let particles = self.tree.particles();
        if weights.len() != particles.len() {
            return Err(Error::InvalidInput(format!(
                "{} particles but {} weights",
                particles.len(),
                weights.len()
            )));
        }
        let mut potentials = vec![nalgebra::zero::<K::Scalar>(); particles.len()];
        let depth = self.tree.depth();
        let n = self.grid.len();

        if depth >= TOP_LEVEL {
            let mut multipoles: Vec<DMatrix<K::Scalar>> = (0..=depth)
                .map(|l| {
                    let cells = if l >= TOP_LEVEL {
                        self.tree.level(l).len()
                    } else {
                        0
                    };
                    DMatrix::zeros(n, cells)
                })
                .collect();
            self.upward(weights, &mut multipoles);

            let mut locals: Vec<DMatrix<K::Scalar>> = multipoles
                .iter()
                .map(|m| DMatrix::zeros(n, m.ncols()))
                .collect();
            for l in TOP_LEVEL..=depth {
                let far = &self.lists.far[l];
                self.handler
                    .apply_level(l, far, &multipoles[l], &mut locals[l])?;
            }
            self.downward(&mut locals);
            self.evaluate_locals(&locals[depth], &mut potentials);
        }
        self.near_field(weights, &mut potentials);
        Ok(potentials)
    }

    fn upward(&self, weights: &[K::Scalar], multipoles: &mut [DMatrix<K::Scalar>]) {
        let depth = self.tree.depth();
        let n = self.grid.len();
        let particles = self.tree.particles();
        let leaves = self.tree.leaf_particles();
        multipoles[depth]
            .as_mut_slice()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(c, out)| {
                let idx = &leaves[c];
                let pts: Vec<Point> = idx.iter().map(|&i| particles[i]).collect();
                let w: Vec<K::Scalar> = idx.iter().map(|&i| weights[i]).collect();
                p2m(&self.grid, &self.tree.cell_map(depth, c), &pts, &w, out);
            });
        for l in (TOP_LEVEL..depth).rev() {
            let (upper, lower) = multipoles.split_at_mut(l + 1);
            let children = &lower[0];
            let level = self.tree.level(l);
            upper[l]
                .as_mut_slice()
                .par_chunks_mut(n)
                .enumerate()
                .for_each(|(p, out)| {
                    for &(o, c) in &level.children[p] {
                        real_gemv_add(&self.m2m[o], children.column(c).as_slice(), out);
                    }
                });
        }
    }

    fn downward(&self, locals: &mut [DMatrix<K::Scalar>]) {
        let depth = self.tree.depth();
        let n = self.grid.len();
        for l in TOP_LEVEL..depth {
            let (upper, lower) = locals.split_at_mut(l + 1);
            let parents = &upper[l];
            let level = self.tree.level(l + 1);
            let octants: Vec<usize> = (0..level.len())
                .map(|c| self.tree.cell_id(l + 1, c).octant())
                .collect();
            lower[0]
                .as_mut_slice()
                .par_chunks_mut(n)
                .enumerate()
                .for_each(|(c, out)| {
                    let p = level.parent[c];
                    real_gemv_add(&self.l2l[octants[c]], parents.column(p).as_slice(), out);
                });
        }
    }

    fn evaluate_locals(&self, locals: &DMatrix<K::Scalar>, potentials: &mut [K::Scalar]) {
        let depth = self.tree.depth();
        let particles = self.tree.particles();
        let leaves = self.tree.leaf_particles();
        let per_leaf: Vec<Vec<K::Scalar>> = (0..leaves.len())
            .into_par_iter()
            .map(|c| {
                let pts: Vec<Point> = leaves[c].iter().map(|&i| particles[i]).collect();
                let mut out = vec![nalgebra::zero::<K::Scalar>(); pts.len()];
                l2p(
                    &self.grid,
                    &self.tree.cell_map(depth, c),
                    locals.column(c).as_slice(),
                    &pts,
                    &mut out,
                );
                out
            })
            .collect();
        for (idx, vals) in leaves.iter().zip(per_leaf) {
            for (&i, v) in idx.iter().zip(vals) {
                potentials[i] += v;
            }
        }
    }

    fn near_field(&self, weights: &[K::Scalar], potentials: &mut [K::Scalar]) {
        let particles = self.tree.particles();
        let leaves = self.tree.leaf_particles();
        let per_leaf: Vec<Vec<K::Scalar>> = (0..leaves.len())
            .into_par_iter()
            .map(|c| {
                leaves[c]
                    .iter()
                    .map(|&i| {
                        let x = &particles[i];
                        let mut acc = nalgebra::zero::<K::Scalar>();
                        for &s in &self.lists.near[c] {
                            for &j in &leaves[s] {
                                let y = &particles[j];
                                if x != y {
                                    acc += self.kernel.evaluate(x, y) * weights[j];
                                }
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        for (idx, vals) in leaves.iter().zip(per_leaf) {
            for (&i, v) in idx.iter().zip(vals) {
                potentials[i] += v;
            }
        }
    }
}

fn build_handler<K: Kernel>(
    kernel: &K,
    tree: &Octree,
    lists: &InteractionLists,
    grid: &ChebyshevGrid,
    config: M2lConfig,
) -> Result<M2lHandler<K::Scalar>> {
    let levels: Vec<LevelTransfers> = lists
        .active_levels()
        .into_iter()
        .map(|l| LevelTransfers {
            level: l,
            width: tree.width(l),
            transfers: lists.unique_transfer_vectors(l),
        })
        .collect();
    M2lHandler::precompute(kernel, grid, &levels, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::s_weight_3d;
    use crate::interp::MultiIndex;
    use crate::kernels::{Helmholtz, Laplace};
    use num_complex::Complex64;
    use std::f64::consts::PI;

    fn unit_box() -> AffineMap {
        AffineMap::new([0.5; 3], 0.5).unwrap()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    fn cloud(n: usize, seed: u64) -> (Vec<Point>, Vec<f64>) {
        // small deterministic LCG; good enough for fixtures
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let mut next = || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let pts = (0..n).map(|_| [next(), next(), next()]).collect();
        let w = (0..n).map(|_| next()).collect();
        (pts, w)
    }

    #[test]
    fn p2m_cardinal_and_zero() {
        let grid = ChebyshevGrid::new(3).unwrap();
        let cell = AffineMap::new([1.0, 2.0, 3.0], 0.25).unwrap();
        let nodes = grid.nodes(&cell);
        let mut w = vec![0.0; 27];
        p2m(&grid, &cell, &[nodes[13]], &[1.0], &mut w);
        for (i, v) in w.iter().enumerate() {
            let e = if i == 13 { 1.0 } else { 0.0 };
            assert!((v - e).abs() < 1e-14);
        }
        let mut z = vec![0.0; 27];
        p2m(&grid, &cell, &nodes[..2], &[0.0, 0.0], &mut z);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn p2m_matches_formula() {
        let grid = ChebyshevGrid::new(3).unwrap();
        let cell = AffineMap::new([0.0; 3], 0.5).unwrap();
        let pts = [[0.1, -0.2, 0.3], [-0.4, 0.25, 0.05]];
        let ws = [0.7, -1.3];
        let mut w = vec![0.0; 27];
        p2m(&grid, &cell, &pts, &ws, &mut w);
        for m in 0..27 {
            let alpha = MultiIndex::from_flat(m, 3).unwrap();
            let mut e = 0.0;
            for (p, wj) in pts.iter().zip(ws) {
                e += s_weight_3d(&cell.inverse(p).unwrap(), alpha, 3).unwrap() * wj;
            }
            assert!((w[m] - e).abs() < 1e-14);
        }
        let mut f = vec![0.0; 2];
        l2p(&grid, &cell, &w, &pts, &mut f);
        for (i, p) in pts.iter().enumerate() {
            let r = cell.inverse(p).unwrap();
            let e: f64 = (0..27)
                .map(|m| s_weight_3d(&r, MultiIndex::from_flat(m, 3).unwrap(), 3).unwrap() * w[m])
                .sum();
            assert!((f[i] - e).abs() < 1e-14);
        }
    }

    #[test]
    fn l2l_is_m2m_transposed() {
        for order in 2..=5 {
            let grid = ChebyshevGrid::new(order).unwrap();
            let up = m2m_operators(&grid);
            let down = l2l_operators(&grid);
            for o in 0..8 {
                assert!((&up[o].transpose() - &down[o]).amax() <= 1e-15);
            }
        }
    }

    #[test]
    fn m2m_reproduces_far_potential() {
        let grid = ChebyshevGrid::new(5).unwrap();
        let parent = AffineMap::new([0.0; 3], 1.0).unwrap();
        let child = AffineMap::new([0.5, -0.5, 0.5], 0.5).unwrap();
        let pts = [[0.6, -0.3, 0.4], [0.2, -0.8, 0.9]];
        let ws = [1.0, 0.5];
        let mut wc = vec![0.0; grid.len()];
        p2m(&grid, &child, &pts, &ws, &mut wc);
        let mut wp = vec![0.0; grid.len()];
        real_gemv_add(&m2m_operators(&grid)[0b101], &wc, &mut wp);
        let far = [6.0, 1.0, -2.0];
        let direct = direct_sum(&Laplace, &[far], &pts, &ws).unwrap()[0];
        let via: f64 = grid
            .nodes(&parent)
            .iter()
            .zip(&wp)
            .map(|(y, w)| Laplace.evaluate(&far, y) * w)
            .sum();
        assert!((via - direct).abs() <= 1e-4 * direct.abs());
    }

    #[test]
    fn p2p_unit_distance() {
        let v = direct_sum(&Laplace, &[[0.0; 3]], &[[1.0, 0.0, 0.0]], &[1.0]).unwrap();
        assert!((v[0] - 1.0 / (4.0 * PI)).abs() < 1e-16);
        let s = direct_sum(&Laplace, &[[0.3; 3]], &[[0.3; 3]], &[1.0]).unwrap();
        assert_eq!(s[0], 0.0);
    }

    #[test]
    fn well_separated_pair() {
        let pts = vec![[0.05, 0.05, 0.05], [0.95, 0.9, 0.92]];
        let plan = FmmPlan::new(
            &pts,
            unit_box(),
            3,
            Laplace,
            5,
            M2lConfig::new(Variant::Na, 1e-5),
        )
        .unwrap();
        assert!(plan.lists().far_pairs(3) + plan.lists().far_pairs(2) > 0);
        let w = [1.0, 2.0];
        let f = plan.run(&w).unwrap();
        let d = direct_sum(&Laplace, &pts, &pts, &w).unwrap();
        assert!(rel(&f, &d) <= 1e-4);
    }

    #[test]
    fn zero_weights_and_superposition() {
        let (pts, w1) = cloud(300, 1);
        let (_, w2) = cloud(300, 2);
        let plan = FmmPlan::new(
            &pts,
            unit_box(),
            3,
            Laplace,
            3,
            M2lConfig::new(Variant::Ia, 1e-3),
        )
        .unwrap();
        assert!(plan.run(&vec![0.0; 300]).unwrap().iter().all(|&v| v == 0.0));
        let a = plan.run(&w1).unwrap();
        let b = plan.run(&w2).unwrap();
        let sum: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| x + y).collect();
        let c = plan.run(&sum).unwrap();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert!(rel(&c, &ab) <= 1e-13);
    }

    #[test]
    fn depth_one_is_direct() {
        let (pts, w) = cloud(40, 3);
        let plan = FmmPlan::new(
            &pts,
            unit_box(),
            1,
            Laplace,
            3,
            M2lConfig::new(Variant::Na, 1e-3),
        )
        .unwrap();
        let f = plan.run(&w).unwrap();
        let d = direct_sum(&Laplace, &pts, &pts, &w).unwrap();
        assert!(rel(&f, &d) <= 1e-14);
    }

    #[test]
    fn uniform_cloud_accuracy_improves_with_order() {
        let (pts, w) = cloud(1500, 4);
        let d = direct_sum(&Laplace, &pts, &pts, &w).unwrap();
        let mut errors = Vec::new();
        for order in [3, 5] {
            let eps = 10f64.powi(-(order as i32));
            let plan = FmmPlan::new(
                &pts,
                unit_box(),
                3,
                Laplace,
                order,
                M2lConfig::new(Variant::Na, eps),
            )
            .unwrap();
            errors.push(rel(&plan.run(&w).unwrap(), &d));
        }
        assert!(errors[0] < 1e-2, "{errors:?}");
        assert!(errors[1] < errors[0] / 5.0, "{errors:?}");
    }

    #[test]
    fn helmholtz_pipeline() {
        let (pts, w) = cloud(500, 5);
        let wc: Vec<Complex64> = w.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let k = Helmholtz::new(1.0);
        let plan = FmmPlan::new(
            &pts,
            unit_box(),
            3,
            k,
            4,
            M2lConfig::new(Variant::IaSym, 1e-4),
        )
        .unwrap();
        let f = plan.run(&wc).unwrap();
        let d = direct_sum(&k, &pts, &pts, &wc).unwrap();
        let num: f64 = f.iter().zip(&d).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = d.iter().map(|b| b.norm_sqr()).sum();
        assert!((num / den).sqrt() <= 1e-3);
    }

    #[test]
    fn unprepared_plan_needs_operators() {
        let (pts, w) = cloud(200, 7);
        let mut plan = FmmPlan::unprepared(&pts, unit_box(), 3, Laplace, 3).unwrap();
        assert!(matches!(
            plan.run(&w),
            Err(Error::PrecomputeIncomplete { .. })
        ));
        plan.rebuild_handler(M2lConfig::new(Variant::NaSym, 1e-3))
            .unwrap();
        let f = plan.run(&w).unwrap();
        let d = direct_sum(&Laplace, &pts, &pts, &w).unwrap();
        assert!(rel(&f, &d) < 1e-2);
    }

    #[test]
    fn weight_length_checked() {
        let (pts, _) = cloud(10, 6);
        let plan = FmmPlan::new(
            &pts,
            unit_box(),
            2,
            Laplace,
            2,
            M2lConfig::new(Variant::Na, 1e-2),
        )
        .unwrap();
        assert!(plan.run(&[1.0]).is_err());
    }
}
