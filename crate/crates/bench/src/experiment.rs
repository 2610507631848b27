//! One experiment: geometry, plan, every requested variant, error against a
//! direct sum.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use chebfmm::engine::direct_sum;
use chebfmm::m2l::DEFAULT_BLOCK_SIZE;
use chebfmm::m2l::DEFAULT_MEMORY_BUDGET;
use chebfmm::symmetry::reduce_interaction_list;
use chebfmm::{Compression, FmmPlan, Helmholtz, Kernel, Laplace, M2lConfig, Point, Variant};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BenchError, Result};
use crate::geometry::{gen_geometry, GeometryKind, DEFAULT_BOX_SIZE};
use crate::metrics::{measure_error, ErrorMetric};
use crate::report::{
    LevelResult, LevelSummary, RankStats, RunReport, Timing, VariantOutcome, VariantResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Laplace,
    Helmholtz,
}

impl FromStr for KernelKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "laplace" => Ok(KernelKind::Laplace),
            "helmholtz" => Ok(KernelKind::Helmholtz),
            _ => Err(BenchError::Usage(format!("unknown kernel '{s}'"))),
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Laplace => "laplace",
            KernelKind::Helmholtz => "helmholtz",
        })
    }
}

/// Particles the error is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReferenceSet {
    /// The particles of one occupied leaf, picked from the seed.
    #[default]
    Leaf,
    /// Every particle: a full O(N^2) direct sum.
    All,
}

impl FromStr for ReferenceSet {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "leaf" => Ok(ReferenceSet::Leaf),
            "all" => Ok(ReferenceSet::All),
            _ => Err(BenchError::Usage(format!("unknown reference set '{s}'"))),
        }
    }
}

impl fmt::Display for ReferenceSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReferenceSet::Leaf => "leaf",
            ReferenceSet::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub geometry: GeometryKind,
    pub n: usize,
    pub depth: usize,
    pub kernel: KernelKind,
    pub wavenumber: f64,
    pub order: usize,
    pub epsilon: f64,
    pub variants: Vec<Variant>,
    pub compression: Compression,
    pub block_size: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    pub error_metric: ErrorMetric,
    pub reference: ReferenceSet,
    /// Edge of the bounding cube of generated geometries.
    pub box_size: f64,
    /// Timing repetitions.
    pub repeats: usize,
    pub memory_budget: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            geometry: GeometryKind::Sphere,
            n: 2000,
            depth: 3,
            kernel: KernelKind::Laplace,
            wavenumber: 1.0,
            order: 4,
            epsilon: 1e-4,
            variants: vec![Variant::IaSym],
            compression: Compression::Svd,
            block_size: DEFAULT_BLOCK_SIZE,
            seed: 0,
            threads: None,
            error_metric: ErrorMetric::L2,
            reference: ReferenceSet::Leaf,
            box_size: DEFAULT_BOX_SIZE,
            repeats: 3,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

impl ExperimentConfig {
    /// `(l, eps) = (acc, 10^-acc)`.
    pub fn with_acc(mut self, acc: usize) -> Self {
        self.order = acc;
        self.epsilon = 10f64.powi(-(acc as i32));
        self
    }

    fn m2l(&self, variant: Variant) -> M2lConfig {
        let mut c = M2lConfig::new(variant, self.epsilon).with_compression(self.compression);
        c.block_size = self.block_size;
        c.memory_budget = self.memory_budget;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(BenchError::Usage("no variant selected".into()));
        }
        if self.repeats == 0 {
            return Err(BenchError::Usage("repeats must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(BenchError::Usage("threads must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(BenchError::Usage(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.kernel == KernelKind::Helmholtz
            && !(self.wavenumber.is_finite() && self.wavenumber >= 0.0)
        {
            return Err(BenchError::Usage(format!(
                "invalid wavenumber {}",
                self.wavenumber
            )));
        }
        Ok(())
    }
}

/// Runs every configured variant. A variant whose operators exceed the
/// memory budget is recorded as out of memory and the run continues.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| BenchError::Usage(format!("thread pool: {e}")))?
            .install(|| run_in_pool(config)),
        None => run_in_pool(config),
    }
}

fn run_in_pool(config: &ExperimentConfig) -> Result<RunReport> {
    let geometry = gen_geometry(&config.geometry, config.n, config.seed, config.box_size)?;
    let mut config = config.clone();
    config.n = geometry.points.len();
    match config.kernel {
        KernelKind::Laplace => run_kernel(
            &config,
            &geometry.points,
            geometry.bbox,
            Laplace,
            geometry.weights,
        ),
        KernelKind::Helmholtz => {
            let w = geometry
                .weights
                .iter()
                .map(|&w| Complex64::new(w, 0.0))
                .collect();
            run_kernel(
                &config,
                &geometry.points,
                geometry.bbox,
                Helmholtz::new(config.wavenumber),
                w,
            )
        }
    }
}

fn run_kernel<K: Kernel + Clone>(
    config: &ExperimentConfig,
    points: &[Point],
    bbox: chebfmm::AffineMap,
    kernel: K,
    weights: Vec<K::Scalar>,
) -> Result<RunReport> {
    let mut plan = FmmPlan::unprepared(points, bbox, config.depth, kernel.clone(), config.order)?;
    let lists = plan.lists();
    let active = lists.active_levels();
    let level_sets: Vec<(usize, BTreeSet<chebfmm::TransferVector>)> = active
        .iter()
        .map(|&l| (l, lists.unique_transfer_vectors(l)))
        .collect();
    let levels = level_sets
        .iter()
        .map(|(l, t)| LevelSummary {
            level: *l,
            transfers: t.len(),
            cone: reduce_interaction_list(t.iter().copied()).cone().len(),
            far_pairs: lists.far_pairs(*l),
        })
        .collect();

    let sample = reference_indices(&plan, config);
    let targets: Vec<Point> = sample.iter().map(|&i| points[i]).collect();
    let reference = direct_sum(&kernel, &targets, points, &weights)?;

    let mut variants = Vec::new();
    for &variant in &config.variants {
        let mut precompute = Vec::new();
        let mut outcome = None;
        for _ in 0..config.repeats {
            let start = Instant::now();
            match plan.rebuild_handler(config.m2l(variant)) {
                Ok(()) => precompute.push(start.elapsed().as_secs_f64()),
                Err(chebfmm::Error::BudgetExceeded {
                    required, budget, ..
                }) => {
                    outcome = Some(VariantOutcome::OutOfMemory { required, budget });
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        if let Some(o) = outcome {
            variants.push((variant, o));
            continue;
        }
        let mut apply = Vec::new();
        let mut potentials = Vec::new();
        for _ in 0..config.repeats {
            plan.handler().reset_counters();
            let start = Instant::now();
            potentials = plan.run(&weights)?;
            apply.push(start.elapsed().as_secs_f64());
        }
        let approx: Vec<K::Scalar> = sample.iter().map(|&i| potentials[i]).collect();
        let error = measure_error(&approx, &reference, config.error_metric)?;

        let handler = plan.handler();
        let report = handler.flop_report();
        let levels = level_sets
            .iter()
            .map(|(l, ts)| {
                let all = handler.ranks(*l);
                let ranks: Vec<usize> = ts.iter().filter_map(|t| all.get(t).copied()).collect();
                LevelResult {
                    level: *l,
                    stored_operators: handler.stored_operator_count(*l),
                    ranks: RankStats::from_ranks(&ranks).unwrap_or(RankStats {
                        min: 0,
                        mean: 0.0,
                        max: 0,
                    }),
                    flops: report.iter().find(|r| r.level == *l).map_or(0, |r| r.flops),
                    bytes: handler.stored_bytes(*l),
                }
            })
            .collect();
        let shared_rank = active
            .iter()
            .filter_map(|&l| handler.sa_core(l).map(|c| (l, c.rank())))
            .collect();
        variants.push((
            variant,
            VariantOutcome::Done(VariantResult {
                levels,
                shared_rank,
                error,
                factorizations: handler.factorization_calls(),
                aca_fallbacks: handler.aca_fallbacks(),
                precompute: Timing::from_samples(&precompute),
                apply: Timing::from_samples(&apply),
            }),
        ));
    }
    Ok(RunReport {
        config: config.clone(),
        levels,
        reference_size: sample.len(),
        variants,
    })
}

fn reference_indices<K: Kernel>(plan: &FmmPlan<K>, config: &ExperimentConfig) -> Vec<usize> {
    let n = plan.tree().particles().len();
    match config.reference {
        ReferenceSet::All => (0..n).collect(),
        ReferenceSet::Leaf => {
            let leaves = plan.tree().leaf_particles();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
            let pick = rng.random_range(0..leaves.len());
            leaves[pick].clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acc_expands() {
        let c = ExperimentConfig::default().with_acc(5);
        assert_eq!(c.order, 5);
        assert_eq!(c.epsilon, 1e-5);
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::default();
        c.variants.clear();
        assert!(matches!(c.validate(), Err(BenchError::Usage(_))));
        let c = ExperimentConfig {
            repeats: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            epsilon: 2.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [KernelKind::Laplace, KernelKind::Helmholtz] {
            assert_eq!(k.to_string().parse::<KernelKind>().unwrap(), k);
        }
        for r in [ReferenceSet::Leaf, ReferenceSet::All] {
            assert_eq!(r.to_string().parse::<ReferenceSet>().unwrap(), r);
        }
    }
}
