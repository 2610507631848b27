//! The eight M2L operator representations behind one handler.
//!
//! | variant | operators stored      | form                         |
//! |---------|-----------------------|------------------------------|
//! | NA      | every `t` in `T`      | dense                        |
//! | NAsym   | cone of `T`           | dense, permuted application  |
//! | NAblk   | cone of `T`           | dense, blocked application   |
//! | SA      | every `t` in `T`      | `U C_t B^H`, shared `U`, `B` |
//! | SArcmp  | every `t` in `T`      | SA with `C_t` recompressed   |
//! | IA      | every `t` in `T`      | individual low rank          |
//! | IAsym   | cone of `T`           | low rank, permuted           |
//! | IAblk   | cone of `T`           | low rank, blocked            |
//!
//! Flops are counted from an accounting model, not measured: `2 m n` per
//! `m x n` matrix-vector product and `2 m n k` per matrix-matrix product.
//! Index permutations and homogeneous rescaling are free.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interp::{AffineMap, ChebyshevGrid};
use crate::kernels::{assemble_transfer, Kernel};
use crate::lowrank::{self, aca_plus_svd, truncated_svd, LowRankFactors};
use crate::octree::TransferVector;
use crate::scalar::Scalar;
use crate::symmetry::{reduce_interaction_list, SymmetryMap, TableCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Na,
    NaSym,
    NaBlk,
    Sa,
    SaRcmp,
    Ia,
    IaSym,
    IaBlk,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Na,
        Variant::NaSym,
        Variant::NaBlk,
        Variant::Sa,
        Variant::SaRcmp,
        Variant::Ia,
        Variant::IaSym,
        Variant::IaBlk,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Na => "NA",
            Variant::NaSym => "NAsym",
            Variant::NaBlk => "NAblk",
            Variant::Sa => "SA",
            Variant::SaRcmp => "SArcmp",
            Variant::Ia => "IA",
            Variant::IaSym => "IAsym",
            Variant::IaBlk => "IAblk",
        }
    }

    /// Stores only cone representatives.
    pub fn uses_symmetry(&self) -> bool {
        matches!(
            self,
            Variant::NaSym | Variant::NaBlk | Variant::IaSym | Variant::IaBlk
        )
    }

    pub fn is_blocked(&self) -> bool {
        matches!(self, Variant::NaBlk | Variant::IaBlk)
    }

    /// Uses low-rank approximations.
    pub fn is_approximate(&self) -> bool {
        !matches!(self, Variant::Na | Variant::NaSym | Variant::NaBlk)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown variant '{s}'")))
    }
}

/// Low-rank approximation scheme for SA and IA variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Compression {
    #[default]
    Svd,
    Aca,
}

impl FromStr for Compression {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "svd" => Ok(Compression::Svd),
            "aca" => Ok(Compression::Aca),
            _ => Err(Error::InvalidInput(format!("unknown compression '{s}'"))),
        }
    }
}

impl fmt::Display for Compression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Compression::Svd => "svd",
            Compression::Aca => "aca",
        })
    }
}

pub const DEFAULT_BLOCK_SIZE: usize = 128;
pub const DEFAULT_MEMORY_BUDGET: u64 = 2 << 30;

#[derive(Debug, Clone, PartialEq)]
pub struct M2lConfig {
    pub variant: Variant,
    pub compression: Compression,
    pub epsilon: f64,
    /// Column capacity of each blocking buffer.
    pub block_size: usize,
    /// Targets per blocking batch; 0 blocks a whole level at once.
    pub batch_targets: usize,
    /// Refuse to precompute when the estimated operator storage exceeds this.
    pub memory_budget: u64,
}

impl M2lConfig {
    pub fn new(variant: Variant, epsilon: f64) -> Self {
        Self {
            variant,
            compression: Compression::Svd,
            epsilon,
            block_size: DEFAULT_BLOCK_SIZE,
            batch_targets: 0,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }

    pub fn with_compression(mut self, compression: Compression) -> Self {
        self.compression = compression;
        self
    }
}

/// Far-field transfer vectors of one level and its cell width.
#[derive(Debug, Clone)]
pub struct LevelTransfers {
    pub level: usize,
    pub width: f64,
    pub transfers: BTreeSet<TransferVector>,
}

/// `C_t` of the shared-basis representation.
#[derive(Debug, Clone)]
pub enum CoreOperator<T: Scalar> {
    Dense(DMatrix<T>),
    Recompressed(LowRankFactors<T>),
}

impl<T: Scalar> CoreOperator<T> {
    /// Rank of the action on the `r`-dimensional core space.
    pub fn effective_rank(&self) -> usize {
        match self {
            CoreOperator::Dense(c) => c.nrows(),
            CoreOperator::Recompressed(f) => f.rank(),
        }
    }

    fn stored_scalars(&self) -> usize {
        match self {
            CoreOperator::Dense(c) => c.len(),
            CoreOperator::Recompressed(f) => f.stored_scalars(),
        }
    }

    fn flops(&self) -> u64 {
        match self {
            CoreOperator::Dense(c) => 2 * c.len() as u64,
            CoreOperator::Recompressed(f) => f.apply_flops(),
        }
    }

    fn apply_add(&self, x: &[T], out: &mut [T]) {
        match self {
            CoreOperator::Dense(c) => gemv_add(c, x, out),
            CoreOperator::Recompressed(f) => f.apply_add(x, out),
        }
    }
}

/// Shared bases `U`, `B` and the per-vector cores: `K_t ~ U C_t B^H`.
#[derive(Debug, Clone)]
pub struct SaCore<T: Scalar> {
    pub u: DMatrix<T>,
    pub b: DMatrix<T>,
    pub cores: BTreeMap<TransferVector, CoreOperator<T>>,
}

impl<T: Scalar> SaCore<T> {
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn reconstruct(&self, t: TransferVector) -> Option<DMatrix<T>> {
        let c = match self.cores.get(&t)? {
            CoreOperator::Dense(c) => c.clone(),
            CoreOperator::Recompressed(f) => f.to_dense(),
        };
        Some(&self.u * c * self.b.adjoint())
    }
}

#[derive(Debug, Clone)]
enum Operators<T: Scalar> {
    Dense(BTreeMap<TransferVector, DMatrix<T>>),
    DenseCone(Vec<DMatrix<T>>),
    Shared(SaCore<T>),
    LowRank(BTreeMap<TransferVector, LowRankFactors<T>>),
    LowRankCone(Vec<LowRankFactors<T>>),
}

/// Operators for one group of levels.
#[derive(Debug, Clone)]
struct OperatorSet<T: Scalar> {
    ops: Operators<T>,
    transfers: BTreeSet<TransferVector>,
    symmetry: Option<SymmetryMap>,
    /// Cone slot and index table per transfer vector (symmetric variants).
    tables: BTreeMap<TransferVector, (usize, Arc<[usize]>)>,
}

#[derive(Debug, Clone, Copy)]
struct LevelSlot {
    set: usize,
    /// Factor applied to the reference operators on this level.
    scale: f64,
}

/// Accumulated work of one level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LevelCounters {
    pub flops: u64,
    /// Target-source pairs handled.
    pub interactions: u64,
    /// Blocked path: expansion columns gathered into buffers.
    pub gathered_columns: u64,
    /// Blocked path: matrix-matrix products issued.
    pub products: u64,
    /// Blocked path: largest number of products in one end-of-batch flush.
    pub max_products_per_flush: u64,
    /// Blocked path: distinct cone operators used.
    pub distinct_operators: u64,
}

impl LevelCounters {
    fn merge(&mut self, other: &LevelCounters) {
        self.flops += other.flops;
        self.interactions += other.interactions;
        self.gathered_columns += other.gathered_columns;
        self.products += other.products;
        self.max_products_per_flush = self
            .max_products_per_flush
            .max(other.max_products_per_flush);
        self.distinct_operators = self.distinct_operators.max(other.distinct_operators);
    }
}

/// One row of [`M2lHandler::flop_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlopRecord {
    pub variant: Variant,
    pub level: usize,
    pub flops: u64,
    /// Bytes of operator storage serving this level.
    pub bytes: u64,
}

/// Precomputed M2L operators and the strategy to apply them.
#[derive(Debug)]
pub struct M2lHandler<T: Scalar> {
    config: M2lConfig,
    order: usize,
    sets: Vec<OperatorSet<T>>,
    levels: BTreeMap<usize, LevelSlot>,
    factorizations: usize,
    aca_fallbacks: usize,
    counters: Mutex<BTreeMap<usize, LevelCounters>>,
}

/// Storage bound used by the budget guard: dense-equivalent size of every
/// stored operator.
pub fn estimate_bytes<T: Scalar>(
    variant: Variant,
    order: usize,
    sets: &[BTreeSet<TransferVector>],
) -> u64 {
    let n3 = (order * order * order) as u64;
    sets.iter()
        .map(|t| {
            let count = if variant.uses_symmetry() {
                reduce_interaction_list(t.iter().copied()).cone().len()
            } else {
                t.len()
            } as u64;
            count * n3 * n3 * T::BYTES as u64
        })
        .sum()
}

impl<T: Scalar> M2lHandler<T> {
    /// Builds the operators for every level in `levels`.
    ///
    /// Homogeneous kernels get one operator set, built at the width of the
    /// first level over the union of all transfer vectors, and rescaled per
    /// level. Other kernels get one set per level.
    pub fn precompute<K>(
        kernel: &K,
        grid: &ChebyshevGrid,
        levels: &[LevelTransfers],
        config: M2lConfig,
    ) -> Result<Self>
    where
        K: Kernel<Scalar = T>,
    {
        if !(config.epsilon > 0.0 && config.epsilon < 1.0) {
            return Err(Error::InvalidInput(format!(
                "epsilon must lie in (0, 1), got {}",
                config.epsilon
            )));
        }
        if config.block_size == 0 {
            return Err(Error::InvalidInput("block size must be positive".into()));
        }
        let levels: Vec<&LevelTransfers> =
            levels.iter().filter(|l| !l.transfers.is_empty()).collect();
        let mut groups: Vec<(f64, BTreeSet<TransferVector>, Vec<(usize, f64)>)> = Vec::new();
        match kernel.homogeneity_degree() {
            Some(n) if !levels.is_empty() => {
                let reference = levels[0].width;
                let union = levels
                    .iter()
                    .flat_map(|l| l.transfers.iter().copied())
                    .collect();
                let slots = levels
                    .iter()
                    .map(|l| (l.level, (l.width / reference).powf(n)))
                    .collect();
                groups.push((reference, union, slots));
            }
            _ => {
                for l in &levels {
                    groups.push((l.width, l.transfers.clone(), vec![(l.level, 1.0)]));
                }
            }
        }

        let all: Vec<BTreeSet<TransferVector>> = groups.iter().map(|g| g.1.clone()).collect();
        let required = estimate_bytes::<T>(config.variant, grid.order(), &all);
        if required > config.memory_budget {
            return Err(Error::BudgetExceeded {
                variant: config.variant.name().to_string(),
                required,
                budget: config.memory_budget,
            });
        }

        let mut handler = Self {
            order: grid.order(),
            sets: Vec::new(),
            levels: BTreeMap::new(),
            factorizations: 0,
            aca_fallbacks: 0,
            counters: Mutex::new(BTreeMap::new()),
            config,
        };
        let mut tables = TableCache::default();
        for (width, transfers, slots) in groups {
            let set = handler.build_set(kernel, grid, width, transfers, &mut tables)?;
            let index = handler.sets.len();
            handler.sets.push(set);
            for (level, scale) in slots {
                handler
                    .levels
                    .insert(level, LevelSlot { set: index, scale });
            }
        }
        Ok(handler)
    }

    fn factorize<K: Kernel<Scalar = T>>(
        &self,
        kernel: &K,
        grid: &ChebyshevGrid,
        width: f64,
        t: TransferVector,
    ) -> Result<(LowRankFactors<T>, bool)> {
        let eps = self.config.epsilon;
        match self.config.compression {
            Compression::Svd => {
                let k = assemble_transfer(kernel, t, width, grid)?.matrix;
                Ok((truncated_svd(&k, eps)?, false))
            }
            Compression::Aca => {
                let (xs, ys) = transfer_nodes(grid, t, width)?;
                let out = aca_plus_svd(
                    |i, j| kernel.evaluate(&xs[i], &ys[j]),
                    xs.len(),
                    ys.len(),
                    eps,
                )?;
                Ok((out.factors, out.fell_back))
            }
        }
    }

    fn build_set<K: Kernel<Scalar = T>>(
        &mut self,
        kernel: &K,
        grid: &ChebyshevGrid,
        width: f64,
        transfers: BTreeSet<TransferVector>,
        cache: &mut TableCache,
    ) -> Result<OperatorSet<T>> {
        let variant = self.config.variant;
        let list: Vec<TransferVector> = transfers.iter().copied().collect();
        let (symmetry, tables) = if variant.uses_symmetry() {
            let map = reduce_interaction_list(list.iter().copied());
            let tables = map
                .iter()
                .map(|(&t, &(p, spec))| (t, (p, cache.get(spec, self.order))))
                .collect();
            (Some(map), tables)
        } else {
            (None, BTreeMap::new())
        };

        let ops = match variant {
            Variant::Na => Operators::Dense(
                list.par_iter()
                    .map(|&t| Ok((t, assemble_transfer(kernel, t, width, grid)?.matrix)))
                    .collect::<Result<_>>()?,
            ),
            Variant::NaSym | Variant::NaBlk => {
                let cone = symmetry.as_ref().expect("symmetric variant").cone();
                Operators::DenseCone(
                    cone.par_iter()
                        .map(|&t| Ok(assemble_transfer(kernel, t, width, grid)?.matrix))
                        .collect::<Result<_>>()?,
                )
            }
            Variant::Ia | Variant::IaSym | Variant::IaBlk => {
                let targets: Vec<TransferVector> = match &symmetry {
                    Some(map) => map.cone().to_vec(),
                    None => list.clone(),
                };
                let this = &*self;
                let factors: Vec<(LowRankFactors<T>, bool)> = targets
                    .par_iter()
                    .map(|&t| this.factorize(kernel, grid, width, t))
                    .collect::<Result<_>>()?;
                self.factorizations += factors.len();
                self.aca_fallbacks += factors.iter().filter(|f| f.1).count();
                let factors = factors.into_iter().map(|f| f.0);
                if variant == Variant::Ia {
                    Operators::LowRank(targets.into_iter().zip(factors).collect())
                } else {
                    Operators::LowRankCone(factors.collect())
                }
            }
            Variant::Sa | Variant::SaRcmp => {
                Operators::Shared(self.build_shared(kernel, grid, width, &list)?)
            }
        };
        Ok(OperatorSet {
            ops,
            transfers,
            symmetry,
            tables,
        })
    }

    fn build_shared<K: Kernel<Scalar = T>>(
        &mut self,
        kernel: &K,
        grid: &ChebyshevGrid,
        width: f64,
        list: &[TransferVector],
    ) -> Result<SaCore<T>> {
        let eps = self.config.epsilon;
        let (u, b) = match self.config.compression {
            Compression::Svd => {
                let (u, b) = shared_bases_svd(kernel, grid, width, list, eps)?;
                self.factorizations += 2;
                (u, b)
            }
            Compression::Aca => {
                let n = grid.len();
                let nodes: Vec<(Vec<_>, Vec<_>)> = list
                    .iter()
                    .map(|&t| transfer_nodes(grid, t, width))
                    .collect::<Result<_>>()?;
                // K_row = [K_1, ..., K_|T|]
                let row = aca_plus_svd(
                    |i, j| {
                        let (xs, ys) = &nodes[j / n];
                        kernel.evaluate(&xs[i], &ys[j % n])
                    },
                    n,
                    n * list.len(),
                    eps,
                )?;
                // K_col = [K_1; ...; K_|T|]
                let col = aca_plus_svd(
                    |i, j| {
                        let (xs, ys) = &nodes[i / n];
                        kernel.evaluate(&xs[i % n], &ys[j])
                    },
                    n * list.len(),
                    n,
                    eps,
                )?;
                self.factorizations += 2;
                self.aca_fallbacks += usize::from(row.fell_back) + usize::from(col.fell_back);
                let mut u = row.factors.left;
                for mut c in u.column_iter_mut() {
                    let norm = c.norm();
                    if norm > 0.0 {
                        c /= T::from_real(norm);
                    }
                }
                (u, col.factors.right)
            }
        };
        let recompress = self.config.variant == Variant::SaRcmp;
        let r = u.ncols();
        let cores = list
            .par_iter()
            .map(|&t| {
                let k = assemble_transfer(kernel, t, width, grid)?.matrix;
                let c = u.adjoint() * k * &b;
                let core = if recompress {
                    let f = truncated_svd(&c, eps)?;
                    if 2 * f.rank() < r {
                        CoreOperator::Recompressed(f)
                    } else {
                        CoreOperator::Dense(c)
                    }
                } else {
                    CoreOperator::Dense(c)
                };
                Ok((t, core))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        if recompress {
            self.factorizations += list.len();
        }
        Ok(SaCore { u, b, cores })
    }

    pub fn config(&self) -> &M2lConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Levels with operators.
    pub fn levels(&self) -> Vec<usize> {
        self.levels.keys().copied().collect()
    }

    /// Low-rank factorizations performed during precomputation.
    pub fn factorization_calls(&self) -> usize {
        self.factorizations
    }

    /// ACA runs that fell back to dense assembly.
    pub fn aca_fallbacks(&self) -> usize {
        self.aca_fallbacks
    }

    fn set(&self, level: usize) -> Option<(&OperatorSet<T>, f64)> {
        self.levels
            .get(&level)
            .map(|s| (&self.sets[s.set], s.scale))
    }

    /// Transfer vectors the operators of `level` cover.
    pub fn transfers(&self, level: usize) -> Option<&BTreeSet<TransferVector>> {
        self.set(level).map(|(s, _)| &s.transfers)
    }

    pub fn symmetry(&self, level: usize) -> Option<&SymmetryMap> {
        self.set(level).and_then(|(s, _)| s.symmetry.as_ref())
    }

    /// Number of operators stored for `level`: `|T|` or `|T_sym|`.
    pub fn stored_operator_count(&self, level: usize) -> usize {
        match self.set(level) {
            None => 0,
            Some((s, _)) => match &s.ops {
                Operators::Dense(m) => m.len(),
                Operators::DenseCone(v) => v.len(),
                Operators::Shared(c) => c.cores.len(),
                Operators::LowRank(m) => m.len(),
                Operators::LowRankCone(v) => v.len(),
            },
        }
    }

    pub fn sa_core(&self, level: usize) -> Option<&SaCore<T>> {
        match self.set(level)?.0 {
            OperatorSet {
                ops: Operators::Shared(c),
                ..
            } => Some(c),
            _ => None,
        }
    }

    /// Rank used when applying the operator of each transfer vector.
    pub fn ranks(&self, level: usize) -> BTreeMap<TransferVector, usize> {
        let n3 = self.order.pow(3);
        let Some((set, _)) = self.set(level) else {
            return BTreeMap::new();
        };
        set.transfers
            .iter()
            .map(|&t| {
                let r = match &set.ops {
                    Operators::Dense(_) | Operators::DenseCone(_) => n3,
                    Operators::Shared(c) => match &c.cores[&t] {
                        CoreOperator::Dense(_) => c.rank(),
                        CoreOperator::Recompressed(f) => f.rank(),
                    },
                    Operators::LowRank(m) => m[&t].rank(),
                    Operators::LowRankCone(v) => v[set.tables[&t].0].rank(),
                };
                (t, r)
            })
            .collect()
    }

    /// Scalars stored by the operator set serving `level`.
    pub fn stored_bytes(&self, level: usize) -> u64 {
        let Some((set, _)) = self.set(level) else {
            return 0;
        };
        let scalars: usize = match &set.ops {
            Operators::Dense(m) => m.values().map(|k| k.len()).sum(),
            Operators::DenseCone(v) => v.iter().map(|k| k.len()).sum(),
            Operators::Shared(c) => {
                c.u.len() + c.b.len() + c.cores.values().map(|k| k.stored_scalars()).sum::<usize>()
            }
            Operators::LowRank(m) => m.values().map(|f| f.stored_scalars()).sum(),
            Operators::LowRankCone(v) => v.iter().map(|f| f.stored_scalars()).sum(),
        };
        (scalars * T::BYTES) as u64
    }

    /// Counted work per level since construction or the last reset.
    pub fn flop_report(&self) -> Vec<FlopRecord> {
        let counters = self.counters.lock().expect("counter lock");
        counters
            .iter()
            .map(|(&level, c)| FlopRecord {
                variant: self.config.variant,
                level,
                flops: c.flops,
                bytes: self.stored_bytes(level),
            })
            .collect()
    }

    pub fn counters(&self, level: usize) -> LevelCounters {
        self.counters
            .lock()
            .expect("counter lock")
            .get(&level)
            .copied()
            .unwrap_or_default()
    }

    pub fn reset_counters(&self) {
        self.counters.lock().expect("counter lock").clear();
    }

    fn record(&self, level: usize, c: LevelCounters) {
        self.counters
            .lock()
            .expect("counter lock")
            .entry(level)
            .or_default()
            .merge(&c);
    }

    fn checked_set(
        &self,
        level: usize,
        far: &[Vec<(usize, TransferVector)>],
    ) -> Result<Option<(&OperatorSet<T>, f64)>> {
        let first = far.iter().flatten().next();
        let Some(&(_, t0)) = first else {
            return Ok(None);
        };
        let (set, scale) = self.set(level).ok_or(Error::PrecomputeIncomplete {
            level,
            transfer: t0,
        })?;
        for &(_, t) in far.iter().flatten() {
            if !set.transfers.contains(&t) {
                return Err(Error::PrecomputeIncomplete { level, transfer: t });
            }
        }
        Ok(Some((set, scale)))
    }

    /// M2L for every target of a level: `locals[:, x] += sum_y K_t(x,y) multipoles[:, y]`.
    ///
    /// `far[x]` lists `(source column, transfer vector)` pairs of target
    /// column `x`. Expansions are stored one cell per column.
    pub fn apply_level(
        &self,
        level: usize,
        far: &[Vec<(usize, TransferVector)>],
        multipoles: &DMatrix<T>,
        locals: &mut DMatrix<T>,
    ) -> Result<()> {
        let Some((set, scale)) = self.checked_set(level, far)? else {
            return Ok(());
        };
        let n = self.order.pow(3);
        check_shape(multipoles, n)?;
        check_shape(locals, n)?;
        if locals.ncols() != far.len() {
            return Err(Error::InvalidInput(
                "one far list per target column expected".into(),
            ));
        }
        let scaled;
        let w = if scale != 1.0 {
            scaled = multipoles.map(|v| v.scale(scale));
            &scaled
        } else {
            multipoles
        };

        let counters = if self.config.variant.is_blocked() {
            self.blocked_apply(set, far, w, locals)
        } else if let Operators::Shared(core) = &set.ops {
            shared_apply(core, far, w, locals)
        } else {
            let per_target = |(f, list): (&mut [T], &Vec<(usize, TransferVector)>)| {
                let mut c = LevelCounters::default();
                let mut scratch = vec![T::zero(); 2 * n];
                for &(y, t) in list {
                    c.flops += apply_one(set, t, w.column(y).as_slice(), f, &mut scratch);
                    c.interactions += 1;
                }
                c
            };
            locals
                .as_mut_slice()
                .par_chunks_mut(n)
                .zip(far.par_iter())
                .map(per_target)
                .reduce(LevelCounters::default, |mut a, b| {
                    a.merge(&b);
                    a
                })
        };
        self.record(level, counters);
        Ok(())
    }

    /// M2L for a single target cell: `local += sum K_t multipoles[:, y]`.
    ///
    /// The shared-basis variants project each source on the fly here, so
    /// their per-pair cost includes both basis products.
    pub fn apply(
        &self,
        level: usize,
        far: &[(usize, TransferVector)],
        multipoles: &DMatrix<T>,
        local: &mut [T],
    ) -> Result<()> {
        let n = self.order.pow(3);
        check_shape(multipoles, n)?;
        if local.len() != n {
            return Err(Error::InvalidInput(format!(
                "local expansion must have {n} entries"
            )));
        }
        let lists = [far.to_vec()];
        let Some((set, scale)) = self.checked_set(level, &lists)? else {
            return Ok(());
        };
        if self.config.variant.is_blocked() {
            let mut locals = DMatrix::from_column_slice(n, 1, local);
            self.apply_level(level, &lists, multipoles, &mut locals)?;
            local.copy_from_slice(locals.as_slice());
            return Ok(());
        }
        let mut c = LevelCounters::default();
        let mut scratch = vec![T::zero(); 2 * n];
        for &(y, t) in far {
            let w: Vec<T> = multipoles
                .column(y)
                .iter()
                .map(|v| v.scale(scale))
                .collect();
            c.flops += match &set.ops {
                Operators::Shared(core) => {
                    let r = core.rank();
                    let hat = core.b.adjoint() * DVector::from_column_slice(&w);
                    let mut g = vec![T::zero(); r];
                    core.cores[&t].apply_add(hat.as_slice(), &mut g);
                    gemv_add(&core.u, &g, local);
                    4 * (n * r) as u64 + core.cores[&t].flops()
                }
                _ => apply_one(set, t, &w, local, &mut scratch),
            };
            c.interactions += 1;
        }
        self.record(level, c);
        Ok(())
    }

    /// Gathers permuted multipoles into per-representative buffers of
    /// `block_size` columns, multiplies each full buffer with its cone
    /// operator, and scatters the permuted results back.
    fn blocked_apply(
        &self,
        set: &OperatorSet<T>,
        far: &[Vec<(usize, TransferVector)>],
        w: &DMatrix<T>,
        locals: &mut DMatrix<T>,
    ) -> LevelCounters {
        let n = self.order.pow(3);
        let cone_len = set.symmetry.as_ref().map_or(0, |s| s.cone().len());
        let batch = if self.config.batch_targets == 0 {
            far.len().max(1)
        } else {
            self.config.batch_targets
        };
        let capacity = self.config.block_size;
        locals
            .as_mut_slice()
            .par_chunks_mut(n * batch)
            .zip(far.par_chunks(batch))
            .map(|(f, lists)| {
                let mut buffers: Vec<BlockBuffer<T>> = (0..cone_len)
                    .map(|_| BlockBuffer::new(n, capacity))
                    .collect();
                let mut c = LevelCounters::default();
                let mut used = vec![false; cone_len];
                for (x, list) in lists.iter().enumerate() {
                    for &(y, t) in list {
                        let (p, table) = &set.tables[&t];
                        let buf = &mut buffers[*p];
                        buf.push(w.column(y).as_slice(), x, table.clone());
                        used[*p] = true;
                        c.gathered_columns += 1;
                        c.interactions += 1;
                        if buf.is_full() {
                            c.flops += buf.flush(&set.ops, *p, f);
                            c.products += 1;
                        }
                    }
                }
                let mut flushed = 0;
                for (p, buf) in buffers.iter_mut().enumerate() {
                    if !buf.is_empty() {
                        c.flops += buf.flush(&set.ops, p, f);
                        c.products += 1;
                        flushed += 1;
                    }
                }
                c.max_products_per_flush = flushed;
                c.distinct_operators = used.iter().filter(|&&u| u).count() as u64;
                c
            })
            .reduce(LevelCounters::default, |mut a, b| {
                a.merge(&b);
                a
            })
    }
}

/// Permuted multipoles sharing one cone operator, and where their results go.
#[derive(Debug)]
pub struct BlockBuffer<T: Scalar> {
    w: DMatrix<T>,
    /// Target column (within the batch) and index table of each filled column.
    owners: Vec<(usize, Arc<[usize]>)>,
}

impl<T: Scalar> BlockBuffer<T> {
    fn new(n: usize, capacity: usize) -> Self {
        Self {
            w: DMatrix::zeros(n, capacity),
            owners: Vec::with_capacity(capacity),
        }
    }

    fn is_full(&self) -> bool {
        self.owners.len() == self.w.ncols()
    }

    fn is_empty(&self) -> bool {
        self.owners.is_empty()
    }

    fn push(&mut self, w: &[T], target: usize, table: Arc<[usize]>) {
        let c = self.owners.len();
        let mut col = self.w.column_mut(c);
        for (j, &v) in w.iter().enumerate() {
            col[table[j]] = v;
        }
        self.owners.push((target, table));
    }

    /// Product with the cone operator and scatter into `locals`; returns flops.
    fn flush(&mut self, ops: &Operators<T>, p: usize, locals: &mut [T]) -> u64 {
        let n = self.w.nrows();
        let cols = self.owners.len();
        let wp = self.w.columns(0, cols);
        let (fp, flops) = match ops {
            Operators::DenseCone(k) => (&k[p] * wp, 2 * (n * n * cols) as u64),
            Operators::LowRankCone(f) => {
                let f = &f[p];
                let tmp = f.right.adjoint() * wp;
                (
                    &f.left * tmp,
                    2 * ((f.rows() + f.cols()) * f.rank() * cols) as u64,
                )
            }
            _ => unreachable!("blocked variants store cone operators"),
        };
        for (k, (x, table)) in self.owners.drain(..).enumerate() {
            let out = &mut locals[x * n..(x + 1) * n];
            let col = fp.column(k);
            for (i, o) in out.iter_mut().enumerate() {
                *o += col[table[i]];
            }
        }
        flops
    }
}

fn check_shape<T: Scalar>(m: &DMatrix<T>, n: usize) -> Result<()> {
    if m.nrows() != n {
        return Err(Error::InvalidInput(format!(
            "expansions must have {n} rows, got {}",
            m.nrows()
        )));
    }
    Ok(())
}

/// `out += a * x`.
fn gemv_add<T: Scalar>(a: &DMatrix<T>, x: &[T], out: &mut [T]) {
    for (j, &xj) in x.iter().enumerate() {
        if xj == T::zero() {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(a.column(j).iter()) {
            *o += v * xj;
        }
    }
}

/// One unblocked, non-shared application; returns its flops.
fn apply_one<T: Scalar>(
    set: &OperatorSet<T>,
    t: TransferVector,
    w: &[T],
    out: &mut [T],
    scratch: &mut [T],
) -> u64 {
    let n = w.len();
    match &set.ops {
        Operators::Dense(m) => {
            let k = &m[&t];
            gemv_add(k, w, out);
            2 * (n * n) as u64
        }
        Operators::LowRank(m) => {
            let f = &m[&t];
            f.apply_add(w, out);
            f.apply_flops()
        }
        Operators::DenseCone(_) | Operators::LowRankCone(_) => {
            let (p, table) = &set.tables[&t];
            let (wp, fp) = scratch.split_at_mut(n);
            for (j, &v) in w.iter().enumerate() {
                wp[table[j]] = v;
            }
            fp.fill(T::zero());
            let flops = match &set.ops {
                Operators::DenseCone(v) => {
                    gemv_add(&v[*p], wp, fp);
                    2 * (n * n) as u64
                }
                Operators::LowRankCone(v) => {
                    v[*p].apply_add(wp, fp);
                    v[*p].apply_flops()
                }
                _ => unreachable!(),
            };
            for (i, o) in out.iter_mut().enumerate() {
                *o += fp[table[i]];
            }
            flops
        }
        Operators::Shared(_) => unreachable!("shared operators use shared_apply"),
    }
}

/// SA application for a level: every source is projected once onto `B`,
/// cores act in the `r`-dimensional space, and each target expands once
/// through `U`.
fn shared_apply<T: Scalar>(
    core: &SaCore<T>,
    far: &[Vec<(usize, TransferVector)>],
    w: &DMatrix<T>,
    locals: &mut DMatrix<T>,
) -> LevelCounters {
    let n = w.nrows();
    let r = core.rank();
    let mut c = LevelCounters::default();
    let mut sources: Vec<usize> = far.iter().flatten().map(|&(y, _)| y).collect();
    sources.sort_unstable();
    sources.dedup();
    let mut projected = DMatrix::<T>::zeros(r, w.ncols());
    let bh = core.b.adjoint();
    for &y in &sources {
        let hat = &bh * w.column(y);
        projected.column_mut(y).copy_from(&hat);
    }
    c.flops += 2 * (n * r * sources.len()) as u64;

    let per_target = |(f, list): (&mut [T], &Vec<(usize, TransferVector)>)| {
        let mut c = LevelCounters::default();
        if list.is_empty() {
            return c;
        }
        let mut g = vec![T::zero(); r];
        for &(y, t) in list {
            let op = &core.cores[&t];
            op.apply_add(projected.column(y).as_slice(), &mut g);
            c.flops += op.flops();
            c.interactions += 1;
        }
        gemv_add(&core.u, &g, f);
        c.flops += 2 * (n * r) as u64;
        c
    };
    let per = locals
        .as_mut_slice()
        .par_chunks_mut(n)
        .zip(far.par_iter())
        .map(per_target)
        .reduce(LevelCounters::default, |mut a, b| {
            a.merge(&b);
            a
        });
    c.merge(&per);
    c
}

/// Node coordinates of the target and source cells of `t`.
fn transfer_nodes(
    grid: &ChebyshevGrid,
    t: TransferVector,
    width: f64,
) -> Result<(Vec<crate::Point>, Vec<crate::Point>)> {
    let half = 0.5 * width;
    let source = AffineMap::new([0.0; 3], half)?;
    let target = AffineMap::new(t.0.map(|v| v as f64 * width), half)?;
    Ok((grid.nodes(&target), grid.nodes(&source)))
}

/// Shared bases from truncated SVDs of the row and column concatenations.
///
/// Only the Gram factors are needed: the left singular vectors of
/// `[K_1, ..., K_n]` are the right singular vectors of the `R` factor of
/// `[K_1^H; ...; K_n^H]`, and the right singular vectors of
/// `[K_1; ...; K_n]` are those of its own `R` factor.
fn shared_bases_svd<K: Kernel>(
    kernel: &K,
    grid: &ChebyshevGrid,
    width: f64,
    list: &[TransferVector],
    eps: f64,
) -> Result<(DMatrix<K::Scalar>, DMatrix<K::Scalar>)> {
    let n = grid.len();
    let assemble = |i: usize| {
        assemble_transfer(kernel, list[i], width, grid)
            .map(|m| m.matrix)
            .expect("far-field transfer vectors are admissible")
    };
    for &t in list {
        if !t.is_far() {
            return Err(Error::NotAdmissible);
        }
    }
    let r_row = lowrank::stacked_r_factor(list.len(), n, |i| assemble(i).adjoint());
    let r_col = lowrank::stacked_r_factor(list.len(), n, assemble);
    let basis = |r: &DMatrix<K::Scalar>| -> Result<DMatrix<K::Scalar>> {
        let f = truncated_svd(r, eps)?;
        Ok(f.right)
    };
    Ok((basis(&r_row)?, basis(&r_col)?))
}
