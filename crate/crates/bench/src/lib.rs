//! Experiment harness for the chebfmm M2L variants: geometry generation,
//! experiment execution and reports.

pub mod error;
pub mod experiment;
pub mod geometry;
pub mod metrics;
pub mod report;

pub use error::{BenchError, Result};
pub use experiment::{run_experiment, ExperimentConfig, KernelKind, ReferenceSet};
pub use geometry::{gen_geometry, Geometry, GeometryKind};
pub use metrics::{measure_error, ErrorMetric};
pub use report::{read_csv, ReportRow, RunReport, VariantOutcome};
