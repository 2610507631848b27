//! Uniform octree over a bounding cube with per-level interaction lists.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Neg;

use crate::error::{Error, Result};
use crate::interp::AffineMap;
use crate::Point;

/// Relative position `(c_x - c_y) / w` of a target and source cell on one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TransferVector(pub [i32; 3]);

impl TransferVector {
    pub fn new(t1: i32, t2: i32, t3: i32) -> Self {
        Self([t1, t2, t3])
    }

    pub fn norm_squared(&self) -> i32 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> i32 {
        self.0.iter().map(|v| v.abs()).max().unwrap_or(0)
    }

    /// `|t| > sqrt(3)`, i.e. the cells do not touch.
    pub fn is_far(&self) -> bool {
        self.norm_squared() > 3
    }
}

impl Neg for TransferVector {
    type Output = Self;

    fn neg(self) -> Self {
        Self(self.0.map(|v| -v))
    }
}

impl fmt::Display for TransferVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId {
    pub level: usize,
    pub ijk: [u32; 3],
}

impl CellId {
    pub fn root() -> Self {
        Self {
            level: 0,
            ijk: [0; 3],
        }
    }

    pub fn parent(&self) -> Option<Self> {
        (self.level > 0).then(|| Self {
            level: self.level - 1,
            ijk: self.ijk.map(|v| v / 2),
        })
    }

    /// Position of this cell within its parent, `0..8`.
    pub fn octant(&self) -> usize {
        (self.ijk[0] & 1) as usize
            | ((self.ijk[1] & 1) as usize) << 1
            | ((self.ijk[2] & 1) as usize) << 2
    }
}

/// Transfer vector from `source` to `target` on a common level.
pub fn transfer_vector(target: CellId, source: CellId) -> Result<TransferVector> {
    if target.level != source.level {
        return Err(Error::LevelMismatch {
            target: target.level,
            source_level: source.level,
        });
    }
    Ok(TransferVector(std::array::from_fn(|d| {
        target.ijk[d] as i32 - source.ijk[d] as i32
    })))
}

/// Occupied cells of one level, sorted lexicographically by `ijk`.
#[derive(Debug, Clone, Default)]
pub struct Level {
    pub cells: Vec<[u32; 3]>,
    index: HashMap<[u32; 3], usize>,
    /// Index of each cell's parent in the level above (0 for the root level).
    pub parent: Vec<usize>,
    /// `(octant, index)` of the occupied children in the level below.
    pub children: Vec<Vec<(usize, usize)>>,
}

impl Level {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn find(&self, ijk: [u32; 3]) -> Option<usize> {
        self.index.get(&ijk).copied()
    }
}

#[derive(Debug, Clone)]
pub struct Octree {
    bbox: AffineMap,
    depth: usize,
    levels: Vec<Level>,
    /// Particle indices per occupied leaf, aligned with the leaf level.
    leaf_particles: Vec<Vec<usize>>,
    particles: Vec<Point>,
}

impl Octree {
    /// Bins `particles` into a uniform octree of `depth` levels below the root.
    ///
    /// Cells are half-open `[low, high)` along every axis; the last cell of an
    /// axis is closed.
    pub fn build(particles: &[Point], bbox: AffineMap, depth: usize) -> Result<Self> {
        if depth < 1 {
            return Err(Error::InvalidInput(
                "octree depth must be at least 1".into(),
            ));
        }
        if depth > 20 {
            return Err(Error::InvalidInput(format!(
                "octree depth {depth} is too large"
            )));
        }
        let n = 1u32 << depth;
        let leaf_width = bbox.width() / n as f64;
        let slack = bbox.half_width * 1e-12;
        let mut bins: std::collections::BTreeMap<[u32; 3], Vec<usize>> = Default::default();
        for (i, p) in particles.iter().enumerate() {
            let mut ijk = [0u32; 3];
            for d in 0..3 {
                let low = bbox.center[d] - bbox.half_width;
                let off = p[d] - low;
                if !(off >= -slack && off <= bbox.width() + slack) {
                    return Err(Error::OutOfBounds { index: i });
                }
                let k = (off.max(0.0) / leaf_width).floor() as i64;
                ijk[d] = k.clamp(0, n as i64 - 1) as u32;
            }
            bins.entry(ijk).or_default().push(i);
        }

        let mut levels = vec![Level::default(); depth + 1];
        let (leaf_cells, leaf_particles): (Vec<_>, Vec<_>) = bins.into_iter().unzip();
        levels[depth].cells = leaf_cells;
        for l in (0..depth).rev() {
            let set: BTreeSet<[u32; 3]> = levels[l + 1]
                .cells
                .iter()
                .map(|c| c.map(|v| v / 2))
                .collect();
            levels[l].cells = set.into_iter().collect();
        }
        for level in levels.iter_mut() {
            level.index = level
                .cells
                .iter()
                .enumerate()
                .map(|(i, c)| (*c, i))
                .collect();
            level.children = vec![Vec::new(); level.cells.len()];
        }
        for l in 1..=depth {
            let (upper, lower) = levels.split_at_mut(l);
            let parent_level = &mut upper[l - 1];
            let level = &mut lower[0];
            level.parent = level
                .cells
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let p = parent_level.index[&c.map(|v| v / 2)];
                    let id = CellId { level: l, ijk: *c };
                    parent_level.children[p].push((id.octant(), i));
                    p
                })
                .collect();
        }
        levels[0].parent = vec![0; levels[0].len()];

        Ok(Self {
            bbox,
            depth,
            levels,
            leaf_particles,
            particles: particles.to_vec(),
        })
    }

    pub fn bbox(&self) -> &AffineMap {
        &self.bbox
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn particles(&self) -> &[Point] {
        &self.particles
    }

    pub fn level(&self, l: usize) -> &Level {
        &self.levels[l]
    }

    pub fn leaf_particles(&self) -> &[Vec<usize>] {
        &self.leaf_particles
    }

    /// Cell width on level `l`.
    pub fn width(&self, l: usize) -> f64 {
        self.bbox.width() / (1u64 << l) as f64
    }

    /// Affine map of cell `index` on level `l`.
    pub fn cell_map(&self, l: usize, index: usize) -> AffineMap {
        let w = self.width(l);
        let ijk = self.levels[l].cells[index];
        let low = self.bbox.center.map(|c| c - self.bbox.half_width);
        AffineMap {
            center: std::array::from_fn(|d| low[d] + (ijk[d] as f64 + 0.5) * w),
            half_width: 0.5 * w,
        }
    }

    pub fn cell_id(&self, l: usize, index: usize) -> CellId {
        CellId {
            level: l,
            ijk: self.levels[l].cells[index],
        }
    }

    /// Indices of occupied cells on level `l` within `max_abs` of `ijk`.
    fn neighbours(&self, l: usize, ijk: [u32; 3], max_abs: i32) -> Vec<usize> {
        let n = 1i64 << l;
        let mut out = Vec::new();
        for dz in -max_abs..=max_abs {
            for dy in -max_abs..=max_abs {
                for dx in -max_abs..=max_abs {
                    let c = [
                        ijk[0] as i64 + dx as i64,
                        ijk[1] as i64 + dy as i64,
                        ijk[2] as i64 + dz as i64,
                    ];
                    if c.iter().any(|&v| v < 0 || v >= n) {
                        continue;
                    }
                    if let Some(i) = self.levels[l].find(c.map(|v| v as u32)) {
                        out.push(i);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Far-field pairs of one level: for every occupied cell, its sources and the
/// transfer vectors that key the M2L operators.
pub type FarList = Vec<Vec<(usize, TransferVector)>>;

#[derive(Debug, Clone)]
pub struct InteractionLists {
    /// `far[l][target]`; empty for levels 0 and 1.
    pub far: Vec<FarList>,
    /// Adjacent occupied leaves (self included) per leaf.
    pub near: Vec<Vec<usize>>,
}

impl InteractionLists {
    pub fn build(tree: &Octree) -> Self {
        let depth = tree.depth();
        let mut far = vec![FarList::new(); depth + 1];
        for (l, far_l) in far.iter_mut().enumerate().skip(2) {
            let level = tree.level(l);
            let parents = tree.level(l - 1);
            *far_l = (0..level.len())
                .map(|x| {
                    let ijk = level.cells[x];
                    let p = level.parent[x];
                    let mut list = Vec::new();
                    for q in tree.neighbours(l - 1, parents.cells[p], 1) {
                        for &(_, y) in &parents.children[q] {
                            let t = transfer_vector(
                                CellId { level: l, ijk },
                                CellId {
                                    level: l,
                                    ijk: level.cells[y],
                                },
                            )
                            .expect("same level");
                            if t.is_far() {
                                list.push((y, t));
                            }
                        }
                    }
                    list.sort_unstable_by_key(|&(y, _)| y);
                    list
                })
                .collect();
        }
        let near = (0..tree.level(depth).len())
            .map(|x| tree.neighbours(depth, tree.level(depth).cells[x], 1))
            .collect();
        Self { far, near }
    }

    pub fn far_pairs(&self, level: usize) -> usize {
        self.far
            .get(level)
            .map_or(0, |f| f.iter().map(Vec::len).sum())
    }

    /// Sorted, deduplicated far transfer vectors of `level`.
    pub fn unique_transfer_vectors(&self, level: usize) -> BTreeSet<TransferVector> {
        self.far
            .get(level)
            .into_iter()
            .flatten()
            .flat_map(|list| list.iter().map(|&(_, t)| t))
            .collect()
    }

    /// Levels that carry at least one far pair.
    pub fn active_levels(&self) -> Vec<usize> {
        (0..self.far.len())
            .filter(|&l| self.far_pairs(l) > 0)
            .collect()
    }
}

/// Every far transfer vector a uniform octree can produce: `|t|_inf <= 3`
/// with `|t| > sqrt(3)`. There are `7^3 - 3^3 = 316` of them.
pub fn full_far_list() -> BTreeSet<TransferVector> {
    let mut out = BTreeSet::new();
    for a in -3..=3 {
        for b in -3..=3 {
            for c in -3..=3 {
                let t = TransferVector([a, b, c]);
                if t.is_far() {
                    out.insert(t);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> AffineMap {
        AffineMap::new([0.0; 3], 1.0).unwrap()
    }

    /// One particle at the centre of every leaf.
    fn full_grid(depth: usize) -> Octree {
        let n = 1u32 << depth;
        let w = 2.0 / n as f64;
        let mut pts = Vec::new();
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    pts.push([i, j, k].map(|v| -1.0 + (v as f64 + 0.5) * w));
                }
            }
        }
        Octree::build(&pts, unit_box(), depth).unwrap()
    }

    #[test]
    fn single_particle_single_leaf() {
        let tree = Octree::build(&[[0.0; 3]], unit_box(), 2).unwrap();
        assert_eq!(tree.level(2).len(), 1);
        // the centre is on a boundary on every axis; ties go to the larger index
        assert_eq!(tree.level(2).cells[0], [2, 2, 2]);
        let lists = InteractionLists::build(&tree);
        assert_eq!(lists.near[0], vec![0]);
        assert!(lists.active_levels().is_empty());
    }

    #[test]
    fn octant_centres_depth_one() {
        let pts: Vec<Point> = (0..8)
            .map(|o| [o & 1, (o >> 1) & 1, (o >> 2) & 1].map(|b| if b == 1 { 0.5 } else { -0.5 }))
            .collect();
        let tree = Octree::build(&pts, unit_box(), 1).unwrap();
        assert_eq!(tree.level(1).len(), 8);
        assert!(tree.leaf_particles().iter().all(|p| p.len() == 1));
    }

    #[test]
    fn conservation_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Point> = (0..1000)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..=1.0)))
            .collect();
        let tree = Octree::build(&pts, unit_box(), 3).unwrap();
        let total: usize = tree.leaf_particles().iter().map(Vec::len).sum();
        assert_eq!(total, 1000);
        let mut seen = vec![0; 1000];
        for leaf in tree.leaf_particles() {
            for &i in leaf {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));

        let err = Octree::build(&[[0.0; 3], [1.5, 0.0, 0.0]], unit_box(), 2).unwrap_err();
        assert_eq!(err, Error::OutOfBounds { index: 1 });
        // upper faces are closed
        assert!(Octree::build(&[[1.0, 1.0, 1.0]], unit_box(), 2).is_ok());
    }

    #[test]
    fn transfer_vector_examples() {
        // centres (3,1,1) and (1,1,1) at width 1 are cells 3 and 1 apart by 2
        let x = CellId {
            level: 3,
            ijk: [3, 1, 1],
        };
        let y = CellId {
            level: 3,
            ijk: [1, 1, 1],
        };
        assert_eq!(transfer_vector(x, y).unwrap(), TransferVector([2, 0, 0]));
        assert_eq!(transfer_vector(x, x).unwrap(), TransferVector([0, 0, 0]));
        let z = CellId {
            level: 2,
            ijk: [1, 1, 1],
        };
        assert!(matches!(
            transfer_vector(x, z),
            Err(Error::LevelMismatch { .. })
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = CellId {
                level: 4,
                ijk: std::array::from_fn(|_| rng.random_range(0..16)),
            };
            let b = CellId {
                level: 4,
                ijk: std::array::from_fn(|_| rng.random_range(0..16)),
            };
            assert_eq!(
                transfer_vector(a, b).unwrap(),
                -transfer_vector(b, a).unwrap()
            );
        }
    }

    #[test]
    fn full_list_has_316_vectors() {
        let full = full_far_list();
        assert_eq!(full.len(), 316);
        assert!(full.iter().all(|t| t.max_abs() <= 3 && t.is_far()));
    }

    #[test]
    fn fully_occupied_counts() {
        let tree = full_grid(3);
        let lists = InteractionLists::build(&tree);
        // level 2: interior cell of the 4^3 grid sees every cell at |t|_inf >= 2 ... within 6^3
        let l2 = tree.level(2);
        let interior = l2.find([1, 1, 1]).unwrap();
        assert_eq!(lists.far[2][interior].len(), 64 - 27);
        for list in lists.far[3].iter() {
            assert!(list.len() <= 189);
        }
        let l3 = tree.level(3);
        let deep = l3.find([3, 3, 3]).unwrap();
        assert_eq!(lists.far[3][deep].len(), 189);
        assert_eq!(lists.unique_transfer_vectors(3).len(), 316);
        assert!(lists.near.iter().all(|n| n.len() <= 27));
    }

    #[test]
    fn level_two_unique_vectors_match_enumeration() {
        let tree = full_grid(2);
        let lists = InteractionLists::build(&tree);
        let mut brute = BTreeSet::new();
        for a in 0..64u32 {
            for b in 0..64u32 {
                let ca = CellId {
                    level: 2,
                    ijk: [a % 4, (a / 4) % 4, a / 16],
                };
                let cb = CellId {
                    level: 2,
                    ijk: [b % 4, (b / 4) % 4, b / 16],
                };
                let t = transfer_vector(ca, cb).unwrap();
                if t.is_far() {
                    brute.insert(t);
                }
            }
        }
        assert_eq!(lists.unique_transfer_vectors(2), brute);
    }

    fn ancestor(tree: &Octree, leaf: usize, l: usize) -> usize {
        let mut idx = leaf;
        for lev in (l + 1..=tree.depth()).rev() {
            idx = tree.level(lev).parent[idx];
        }
        idx
    }

    /// Every pair of occupied leaves is covered exactly once by either the
    /// leaf near list or the far list of exactly one ancestor level.
    fn check_cover(tree: &Octree) {
        let lists = InteractionLists::build(tree);
        let depth = tree.depth();
        let nleaf = tree.level(depth).len();
        for x in 0..nleaf {
            for y in 0..nleaf {
                let mut hits = usize::from(lists.near[x].contains(&y));
                for l in 2..=depth {
                    let (ax, ay) = (ancestor(tree, x, l), ancestor(tree, y, l));
                    hits += lists.far[l][ax].iter().filter(|&&(s, _)| s == ay).count();
                }
                assert_eq!(hits, 1, "leaf pair {x},{y}");
            }
        }
        for l in 2..=depth {
            for (x, list) in lists.far[l].iter().enumerate() {
                for &(y, t) in list {
                    assert!(t.is_far() && t.max_abs() <= 3);
                    let (px, py) = (tree.level(l).parent[x], tree.level(l).parent[y]);
                    let pt =
                        transfer_vector(tree.cell_id(l - 1, px), tree.cell_id(l - 1, py)).unwrap();
                    assert!(!pt.is_far(), "parents must be neighbours");
                }
            }
        }
    }

    #[test]
    fn near_far_cover_every_pair_once() {
        check_cover(&full_grid(3));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Point> = (0..300)
            .map(|_| {
                let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                v.map(|c| 0.99 * c / r)
            })
            .collect();
        let tree = Octree::build(&pts, unit_box(), 3).unwrap();
        check_cover(&tree);
        // a flat surface cloud misses every vector with |t3| > 1
        let flat: Vec<Point> = pts.iter().map(|p| [p[0], p[1], 0.1 * p[2]]).collect();
        let tree = Octree::build(&flat, unit_box(), 3).unwrap();
        check_cover(&tree);
        let unique = InteractionLists::build(&tree).unique_transfer_vectors(3);
        assert!(!unique.is_empty() && unique.len() < 316);
        assert!(unique.iter().all(|t| t.0[2].abs() <= 1));
    }
}
