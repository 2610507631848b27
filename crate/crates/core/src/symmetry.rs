//! Reduction of transfer vectors to the cone `t1 >= t2 >= t3 >= 0` and the
//! index permutations that turn a cone operator into any other one.
//!
//! For a transfer vector `t` with cone representative `p(t)`:
//!
//! `K_t[i, j] = K_p(t)[table[i], table[j]]`
//!
//! where `table` is [`PermutationSpec::index_table`]. Axial flips come first,
//! then the axis reordering; the two do not commute.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::interp::MultiIndex;
use crate::octree::TransferVector;

/// Axial flips followed by an axis reordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PermutationSpec {
    /// Invert component `i` when `t_i < 0`.
    pub flips: [bool; 3],
    /// Component `k` of the permuted index is component `axis_order[k]` of
    /// the flipped one.
    pub axis_order: [usize; 3],
}

impl Default for PermutationSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl PermutationSpec {
    pub fn identity() -> Self {
        Self {
            flips: [false; 3],
            axis_order: [0, 1, 2],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Applies the reflections to a transfer vector.
    pub fn reflect(&self, t: TransferVector) -> TransferVector {
        let f: [i32; 3] = std::array::from_fn(|i| if self.flips[i] { -t.0[i] } else { t.0[i] });
        TransferVector(self.axis_order.map(|a| f[a]))
    }

    pub fn permute_index(&self, alpha: MultiIndex, order: usize) -> MultiIndex {
        let f: [usize; 3] = std::array::from_fn(|i| {
            if self.flips[i] {
                order - 1 - alpha.0[i]
            } else {
                alpha.0[i]
            }
        });
        MultiIndex(self.axis_order.map(|a| f[a]))
    }

    /// `table[j] = m(pi(m^-1(j)))` over all `order^3` flat indices.
    pub fn index_table(&self, order: usize) -> Vec<usize> {
        (0..order * order * order)
            .map(|j| {
                self.permute_index(MultiIndex::from_flat_unchecked(j, order), order)
                    .flat_unchecked(order)
            })
            .collect()
    }
}

/// Cone representative of `t` and the reflections that map `t` onto it.
/// Ties in `|t_i|` keep the original axis order.
pub fn canonicalize(t: TransferVector) -> (TransferVector, PermutationSpec) {
    let flips = t.0.map(|v| v < 0);
    let abs = t.0.map(i32::abs);
    let mut axis_order = [0usize, 1, 2];
    axis_order.sort_by(|&a, &b| abs[b].cmp(&abs[a]));
    let spec = PermutationSpec { flips, axis_order };
    (spec.reflect(t), spec)
}

pub fn in_cone(t: TransferVector) -> bool {
    t.0[0] >= t.0[1] && t.0[1] >= t.0[2] && t.0[2] >= 0
}

/// A set of transfer vectors reduced to its cone members.
#[derive(Debug, Clone, Default)]
pub struct SymmetryMap {
    cone: Vec<TransferVector>,
    assignment: BTreeMap<TransferVector, (usize, PermutationSpec)>,
}

impl SymmetryMap {
    /// Cone representatives, sorted.
    pub fn cone(&self) -> &[TransferVector] {
        &self.cone
    }

    /// Index into [`SymmetryMap::cone`] and the reflections for `t`.
    pub fn get(&self, t: TransferVector) -> Option<(usize, PermutationSpec)> {
        self.assignment.get(&t).copied()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TransferVector, &(usize, PermutationSpec))> {
        self.assignment.iter()
    }
}

pub fn reduce_interaction_list<I>(list: I) -> SymmetryMap
where
    I: IntoIterator<Item = TransferVector>,
{
    let canon: Vec<(TransferVector, TransferVector, PermutationSpec)> = list
        .into_iter()
        .map(|t| {
            let (c, s) = canonicalize(t);
            (t, c, s)
        })
        .collect();
    let cone: Vec<TransferVector> = canon
        .iter()
        .map(|&(_, c, _)| c)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let position: HashMap<TransferVector, usize> =
        cone.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let assignment = canon
        .into_iter()
        .map(|(t, c, s)| (t, (position[&c], s)))
        .collect();
    SymmetryMap { cone, assignment }
}

/// Index tables shared per `(spec, order)`; at most 48 per order.
#[derive(Debug, Default)]
pub struct TableCache {
    tables: HashMap<(PermutationSpec, usize), Arc<[usize]>>,
}

impl TableCache {
    pub fn get(&mut self, spec: PermutationSpec, order: usize) -> Arc<[usize]> {
        self.tables
            .entry((spec, order))
            .or_insert_with(|| spec.index_table(order).into())
            .clone()
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::octree::full_far_list;
    use proptest::prelude::*;

    #[test]
    fn canonicalize_examples() {
        let (c, s) = canonicalize(TransferVector([-2, 1, 0]));
        assert_eq!(c, TransferVector([2, 1, 0]));
        assert_eq!(s.flips, [true, false, false]);
        assert_eq!(s.axis_order, [0, 1, 2]);

        let (c, s) = canonicalize(TransferVector([1, 2, 0]));
        assert_eq!(c, TransferVector([2, 1, 0]));
        assert_eq!(s.flips, [false; 3]);
        assert_eq!(s.axis_order, [1, 0, 2]);

        let (c, s) = canonicalize(TransferVector([-1, 2, 0]));
        assert_eq!(c, TransferVector([2, 1, 0]));
        assert_eq!(s.flips, [true, false, false]);
        assert_eq!(s.axis_order, [1, 0, 2]);

        let (c, s) = canonicalize(TransferVector([3, 2, 1]));
        assert_eq!(c, TransferVector([3, 2, 1]));
        assert!(s.is_identity());
    }

    #[test]
    fn permute_index_examples() {
        let a = MultiIndex::new(0, 1, 2);
        assert_eq!(PermutationSpec::identity().permute_index(a, 3), a);
        let flip = PermutationSpec {
            flips: [true, false, false],
            axis_order: [0, 1, 2],
        };
        // one-based (1,2,3) -> (3,2,3)
        assert_eq!(flip.permute_index(a, 3), MultiIndex::new(2, 1, 2));
        let swap = PermutationSpec {
            flips: [false; 3],
            axis_order: [1, 0, 2],
        };
        assert_eq!(swap.permute_index(a, 3), MultiIndex::new(1, 0, 2));
    }

    #[test]
    fn identity_table() {
        let t = PermutationSpec::identity().index_table(3);
        assert_eq!(t, (0..27).collect::<Vec<_>>());
    }

    #[test]
    fn axial_flip_is_involution() {
        for flips in [
            [true, false, false],
            [false, true, true],
            [true, true, true],
        ] {
            let spec = PermutationSpec {
                flips,
                axis_order: [0, 1, 2],
            };
            let t = spec.index_table(4);
            for j in 0..64 {
                assert_eq!(t[t[j]], j);
            }
        }
    }

    #[test]
    fn full_list_reduces_to_sixteen() {
        let map = reduce_interaction_list(full_far_list());
        assert_eq!(map.len(), 316);
        assert_eq!(map.cone().len(), 16);
        assert!(map.cone().iter().all(|&t| in_cone(t)));
        for (&t, &(p, spec)) in map.iter() {
            assert_eq!(spec.reflect(t), map.cone()[p]);
            assert_eq!(spec.is_identity(), in_cone(t) && t == map.cone()[p]);
        }
    }

    #[test]
    fn singleton_list() {
        let map = reduce_interaction_list([TransferVector([2, 0, 0])]);
        assert_eq!(map.cone(), &[TransferVector([2, 0, 0])]);
    }

    #[test]
    fn table_cache_shares_tables() {
        let mut cache = TableCache::default();
        for t in full_far_list() {
            cache.get(canonicalize(t).1, 3);
        }
        assert!(cache.len() <= 48);
    }

    fn spec_strategy() -> impl Strategy<Value = PermutationSpec> {
        (
            proptest::array::uniform3(any::<bool>()),
            Just([0usize, 1, 2]).prop_shuffle(),
        )
            .prop_map(|(flips, order)| PermutationSpec {
                flips,
                axis_order: [order[0], order[1], order[2]],
            })
    }

    proptest! {
        #[test]
        fn index_table_is_a_permutation(spec in spec_strategy(), order in 2usize..7) {
            let mut t = spec.index_table(order);
            t.sort_unstable();
            prop_assert_eq!(t, (0..order * order * order).collect::<Vec<_>>());
        }

        #[test]
        fn subset_maps_onto_its_representatives(picks in proptest::collection::btree_set(0usize..316, 1..50)) {
            let all: Vec<_> = full_far_list().into_iter().collect();
            let subset: Vec<_> = picks.into_iter().map(|i| all[i]).collect();
            let map = reduce_interaction_list(subset.iter().copied());
            prop_assert!(map.cone().len() <= subset.len());
            for t in subset {
                let (p, spec) = map.get(t).unwrap();
                prop_assert_eq!(spec.reflect(t), map.cone()[p]);
            }
        }
    }
}
