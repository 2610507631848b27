//! Run reports: in-memory form, long-format CSV and a markdown summary.

use std::fmt::Write as _;
use std::path::Path;

use chebfmm::Variant;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::experiment::ExperimentConfig;

/// Marker for entries a variant could not produce within its memory budget.
pub const OOM: &str = "OOM";

/// Level column value for whole-run metrics.
pub const ALL: &str = "all";

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSummary {
    pub level: usize,
    /// `|T|`.
    pub transfers: usize,
    /// `|T_sym|`.
    pub cone: usize,
    pub far_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankStats {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

impl RankStats {
    pub fn from_ranks(ranks: &[usize]) -> Option<Self> {
        if ranks.is_empty() {
            return None;
        }
        Some(Self {
            min: *ranks.iter().min()?,
            mean: ranks.iter().sum::<usize>() as f64 / ranks.len() as f64,
            max: *ranks.iter().max()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelResult {
    pub level: usize,
    pub stored_operators: usize,
    pub ranks: RankStats,
    pub flops: u64,
    pub bytes: u64,
}

/// Mean and spread (max - min) of repeated wall-clock measurements.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Timing {
    pub mean: f64,
    pub spread: f64,
}

impl Timing {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            mean,
            spread: hi - lo,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub levels: Vec<LevelResult>,
    /// Shared basis rank of SA and SArcmp, per level.
    pub shared_rank: Vec<(usize, usize)>,
    pub error: f64,
    pub factorizations: usize,
    pub aca_fallbacks: usize,
    pub precompute: Timing,
    pub apply: Timing,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VariantOutcome {
    Done(VariantResult),
    OutOfMemory { required: u64, budget: u64 },
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub levels: Vec<LevelSummary>,
    /// Number of particles the error is measured on.
    pub reference_size: usize,
    pub variants: Vec<(Variant, VariantOutcome)>,
}

/// One line of `report.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub level: String,
    pub variant: String,
    pub metric: String,
    pub value: String,
}

impl ReportRow {
    fn new(level: impl ToString, variant: &str, metric: &str, value: impl ToString) -> Self {
        Self {
            level: level.to_string(),
            variant: variant.to_string(),
            metric: metric.to_string(),
            value: value.to_string(),
        }
    }

    /// Wall-clock rows; everything else is reproducible from the config.
    pub fn is_timing(&self) -> bool {
        self.metric.ends_with("_seconds") || self.metric.ends_with("_spread")
    }

    pub fn number(&self) -> Option<f64> {
        self.value.parse().ok()
    }
}

const LEVEL_METRICS: [&str; 6] = [
    "stored_operators",
    "rank_min",
    "rank_mean",
    "rank_max",
    "flops",
    "bytes",
];
const RUN_METRICS: [&str; 7] = [
    "error",
    "factorizations",
    "aca_fallbacks",
    "precompute_seconds",
    "precompute_spread",
    "apply_seconds",
    "apply_spread",
];

impl RunReport {
    pub fn has_oom(&self) -> bool {
        self.variants
            .iter()
            .any(|(_, o)| matches!(o, VariantOutcome::OutOfMemory { .. }))
    }

    pub fn result(&self, variant: Variant) -> Option<&VariantResult> {
        self.variants.iter().find_map(|(v, o)| match o {
            VariantOutcome::Done(r) if *v == variant => Some(r),
            _ => None,
        })
    }

    /// Long-format rows `level,variant,metric,value`; every cell is a number
    /// or [`OOM`].
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        for l in &self.levels {
            rows.push(ReportRow::new(l.level, ALL, "transfers", l.transfers));
            rows.push(ReportRow::new(l.level, ALL, "cone", l.cone));
            rows.push(ReportRow::new(l.level, ALL, "far_pairs", l.far_pairs));
        }
        rows.push(ReportRow::new(
            ALL,
            ALL,
            "reference_size",
            self.reference_size,
        ));
        for (variant, outcome) in &self.variants {
            let name = variant.name();
            match outcome {
                VariantOutcome::Done(r) => {
                    for l in &r.levels {
                        rows.push(ReportRow::new(
                            l.level,
                            name,
                            "stored_operators",
                            l.stored_operators,
                        ));
                        rows.push(ReportRow::new(l.level, name, "rank_min", l.ranks.min));
                        rows.push(ReportRow::new(l.level, name, "rank_mean", l.ranks.mean));
                        rows.push(ReportRow::new(l.level, name, "rank_max", l.ranks.max));
                        rows.push(ReportRow::new(l.level, name, "flops", l.flops));
                        rows.push(ReportRow::new(l.level, name, "bytes", l.bytes));
                    }
                    for &(level, r) in &r.shared_rank {
                        rows.push(ReportRow::new(level, name, "shared_rank", r));
                    }
                    rows.push(ReportRow::new(ALL, name, "error", r.error));
                    rows.push(ReportRow::new(
                        ALL,
                        name,
                        "factorizations",
                        r.factorizations,
                    ));
                    rows.push(ReportRow::new(ALL, name, "aca_fallbacks", r.aca_fallbacks));
                    rows.push(ReportRow::new(
                        ALL,
                        name,
                        "precompute_seconds",
                        r.precompute.mean,
                    ));
                    rows.push(ReportRow::new(
                        ALL,
                        name,
                        "precompute_spread",
                        r.precompute.spread,
                    ));
                    rows.push(ReportRow::new(ALL, name, "apply_seconds", r.apply.mean));
                    rows.push(ReportRow::new(ALL, name, "apply_spread", r.apply.spread));
                }
                VariantOutcome::OutOfMemory { .. } => {
                    for l in &self.levels {
                        for m in LEVEL_METRICS {
                            rows.push(ReportRow::new(l.level, name, m, OOM));
                        }
                    }
                    for m in RUN_METRICS {
                        rows.push(ReportRow::new(ALL, name, m, OOM));
                    }
                }
            }
        }
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_markdown(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "# chebfmm run report\n");
        let _ = writeln!(s, "| parameter | value |\n|---|---|");
        let echo = [
            ("geometry", c.geometry.to_string()),
            ("N", c.n.to_string()),
            ("box size", c.box_size.to_string()),
            ("depth", c.depth.to_string()),
            ("kernel", c.kernel.to_string()),
            ("wavenumber", c.wavenumber.to_string()),
            ("order l", c.order.to_string()),
            ("epsilon", format!("{:e}", c.epsilon)),
            ("compression", c.compression.to_string()),
            ("block size", c.block_size.to_string()),
            ("seed", c.seed.to_string()),
            (
                "threads",
                c.threads.map_or("default".into(), |t| t.to_string()),
            ),
            ("error metric", c.error_metric.to_string()),
            (
                "error reference",
                format!("{} ({} particles)", c.reference, self.reference_size),
            ),
            ("repeats", c.repeats.to_string()),
        ];
        for (k, v) in echo {
            let _ = writeln!(s, "| {k} | {v} |");
        }

        let _ = writeln!(s, "\n## Interaction lists\n\n| level | \\|T\\| | \\|T_sym\\| | far pairs |\n|---|---|---|---|");
        for l in &self.levels {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                l.level, l.transfers, l.cone, l.far_pairs
            );
        }

        let header = |s: &mut String, title: &str| {
            let _ = write!(s, "\n## {title}\n\n| variant |");
            for l in &self.levels {
                let _ = write!(s, " level {} |", l.level);
            }
            let _ = write!(s, "\n|---|");
            for _ in &self.levels {
                let _ = write!(s, "---|");
            }
            let _ = writeln!(s);
        };
        type Cell = fn(&LevelResult) -> String;
        let tables: [(&str, Cell); 4] = [
            ("Average rank (min / mean / max)", |l| {
                format!("{} / {:.1} / {}", l.ranks.min, l.ranks.mean, l.ranks.max)
            }),
            ("M2L flops", |l| l.flops.to_string()),
            ("Operator storage (bytes)", |l| l.bytes.to_string()),
            ("Stored operators", |l| l.stored_operators.to_string()),
        ];
        for (title, cell) in tables {
            header(&mut s, title);
            for (v, o) in &self.variants {
                let _ = write!(s, "| {v} |");
                for l in &self.levels {
                    let text = match o {
                        VariantOutcome::Done(r) => r
                            .levels
                            .iter()
                            .find(|x| x.level == l.level)
                            .map_or("-".to_string(), cell),
                        VariantOutcome::OutOfMemory { .. } => OOM.to_string(),
                    };
                    let _ = write!(s, " {text} |");
                }
                let _ = writeln!(s);
            }
        }

        let metric = match c.error_metric {
            crate::ErrorMetric::L2 => "sqrt(sum|f-g|^2 / sum|f|^2)",
            crate::ErrorMetric::Paper => "sqrt(sum|f-g|^2 / sum|f|)",
        };
        let _ = writeln!(
            s,
            "\n## Error and timings\n\nError metric: `{metric}`.\n\n| variant | error | precompute s | apply s |\n|---|---|---|---|"
        );
        for (v, o) in &self.variants {
            match o {
                VariantOutcome::Done(r) => {
                    let _ = writeln!(
                        s,
                        "| {v} | {:.3e} | {:.3} ± {:.3} | {:.3} ± {:.3} |",
                        r.error,
                        r.precompute.mean,
                        r.precompute.spread,
                        r.apply.mean,
                        r.apply.spread
                    );
                }
                VariantOutcome::OutOfMemory { required, budget } => {
                    let _ = writeln!(s, "| {v} | {OOM} | {OOM} | {OOM} |");
                    let _ = writeln!(
                        s,
                        "\n{v}: needs ~{required} bytes of operators, budget {budget}.\n"
                    );
                }
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(&dir.join("report.csv"))?;
        std::fs::write(dir.join("report.md"), self.to_markdown())?;
        Ok(())
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ReportRow>, _>>()?;
    Ok(rows)
}
