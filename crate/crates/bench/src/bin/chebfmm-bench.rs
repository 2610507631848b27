use std::path::PathBuf;
use std::process::ExitCode;

use chebfmm::{Compression, Variant};
use chebfmm_bench::{
    run_experiment, BenchError, ErrorMetric, ExperimentConfig, GeometryKind, KernelKind,
    ReferenceSet,
};
use clap::Parser;

/// Runs the Chebyshev-interpolation FMM with a chosen set of M2L variants and
/// writes report.md and report.csv.
#[derive(Debug, Parser)]
#[command(name = "chebfmm-bench", version)]
struct Cli {
    /// sphere, oblate, prolate or file:PATH
    #[arg(long, default_value = "sphere")]
    geometry: String,

    #[arg(long, default_value_t = 2000)]
    n: usize,

    #[arg(long, default_value_t = 3)]
    depth: usize,

    /// laplace or helmholtz
    #[arg(long, default_value = "laplace")]
    kernel: String,

    #[arg(long, default_value_t = 1.0)]
    wavenumber: f64,

    /// Sets order = acc and epsilon = 10^-acc.
    #[arg(long, conflicts_with_all = ["order", "epsilon"])]
    acc: Option<usize>,

    #[arg(long)]
    order: Option<usize>,

    #[arg(long)]
    epsilon: Option<f64>,

    /// na, nasym, nablk, sa, sarcmp, ia, iasym, iablk, all, or a comma list
    #[arg(long, default_value = "iasym")]
    variant: String,

    /// svd or aca
    #[arg(long, default_value = "svd")]
    compression: String,

    #[arg(long, default_value_t = 128)]
    block_size: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long)]
    threads: Option<usize>,

    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// l2 or paper
    #[arg(long, default_value = "l2")]
    error_metric: String,

    /// Particles the error is measured on: leaf or all
    #[arg(long, default_value = "leaf")]
    reference: String,

    /// Edge of the bounding cube of generated geometries
    #[arg(long, default_value_t = 64.0)]
    box_size: f64,

    /// Timing repetitions
    #[arg(long, default_value_t = 3)]
    repeats: usize,

    /// Operator memory budget in bytes
    #[arg(long, default_value_t = chebfmm::m2l::DEFAULT_MEMORY_BUDGET)]
    memory_budget: u64,
}

fn parse_variants(s: &str) -> Result<Vec<Variant>, BenchError> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Variant::ALL.to_vec());
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<Variant>()
                .map_err(|e| BenchError::Usage(e.to_string()))
        })
        .collect()
}

fn config(cli: &Cli) -> Result<ExperimentConfig, BenchError> {
    let mut c = ExperimentConfig {
        geometry: cli.geometry.parse::<GeometryKind>()?,
        n: cli.n,
        depth: cli.depth,
        kernel: cli.kernel.parse::<KernelKind>()?,
        wavenumber: cli.wavenumber,
        variants: parse_variants(&cli.variant)?,
        compression: cli
            .compression
            .parse::<Compression>()
            .map_err(|e| BenchError::Usage(e.to_string()))?,
        block_size: cli.block_size,
        seed: cli.seed,
        threads: cli.threads,
        error_metric: cli.error_metric.parse::<ErrorMetric>()?,
        reference: cli.reference.parse::<ReferenceSet>()?,
        box_size: cli.box_size,
        repeats: cli.repeats,
        memory_budget: cli.memory_budget,
        ..ExperimentConfig::default()
    };
    if let Some(acc) = cli.acc {
        c = c.with_acc(acc);
    }
    if let Some(order) = cli.order {
        c.order = order;
    }
    if let Some(eps) = cli.epsilon {
        c.epsilon = eps;
    }
    Ok(c)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = config(&cli).and_then(|c| {
        let report = run_experiment(&c)?;
        report.write(&cli.out)?;
        Ok(report)
    });
    match result {
        Ok(report) => {
            println!(
                "wrote {} and {}",
                cli.out.join("report.md").display(),
                cli.out.join("report.csv").display()
            );
            if report.has_oom() {
                eprintln!("some variants exceeded the memory budget; marked OOM in the report");
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
