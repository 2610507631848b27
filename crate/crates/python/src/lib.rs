//! Python bindings: fast and direct potential evaluation for both kernels,
//! and the experiment harness.

use pyo3::exceptions::{PyMemoryError, PyValueError};
use pyo3::prelude::*;

use ::chebfmm::{direct_sum, FmmPlan, Helmholtz, Kernel, Laplace, M2lConfig, Point, Variant};
use chebfmm_bench::geometry::bounding_cube;
use chebfmm_bench::{
    run_experiment as run, BenchError, ExperimentConfig, GeometryKind, ReferenceSet,
};
use num_complex::Complex64;

fn core_err(e: ::chebfmm::Error) -> PyErr {
    match e {
        ::chebfmm::Error::BudgetExceeded { .. } => PyMemoryError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn bench_err(e: BenchError) -> PyErr {
    match e {
        BenchError::Core(c) => core_err(c),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_variant(name: &str) -> PyResult<Variant> {
    name.parse()
        .map_err(|e: ::chebfmm::Error| PyValueError::new_err(e.to_string()))
}

fn fmm<K: Kernel>(
    kernel: K,
    points: &[Point],
    weights: &[K::Scalar],
    depth: usize,
    order: usize,
    epsilon: f64,
    variant: &str,
) -> PyResult<Vec<K::Scalar>> {
    if points.len() != weights.len() {
        return Err(PyValueError::new_err("points and weights differ in length"));
    }
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let bbox = bounding_cube(points).map_err(bench_err)?;
    let config = M2lConfig::new(parse_variant(variant)?, epsilon);
    let plan = FmmPlan::new(points, bbox, depth, kernel, order, config).map_err(core_err)?;
    plan.run(weights).map_err(core_err)
}

/// Laplace potentials `sum_j w_j / (4 pi |x_i - x_j|)` by the FMM.
#[pyfunction]
#[pyo3(signature = (points, weights, depth=3, order=4, epsilon=1e-4, variant="iasym"))]
fn laplace(
    py: Python<'_>,
    points: Vec<Point>,
    weights: Vec<f64>,
    depth: usize,
    order: usize,
    epsilon: f64,
    variant: &str,
) -> PyResult<Vec<f64>> {
    py.detach(|| fmm(Laplace, &points, &weights, depth, order, epsilon, variant))
}

/// Helmholtz potentials `sum_j w_j exp(i k r) / (4 pi r)` by the FMM.
#[pyfunction]
#[pyo3(signature = (points, weights, wavenumber, depth=3, order=4, epsilon=1e-4, variant="iasym"))]
#[allow(clippy::too_many_arguments)]
fn helmholtz(
    py: Python<'_>,
    points: Vec<Point>,
    weights: Vec<Complex64>,
    wavenumber: f64,
    depth: usize,
    order: usize,
    epsilon: f64,
    variant: &str,
) -> PyResult<Vec<Complex64>> {
    py.detach(|| {
        fmm(
            Helmholtz::new(wavenumber),
            &points,
            &weights,
            depth,
            order,
            epsilon,
            variant,
        )
    })
}

/// O(N^2) Laplace potentials; coincident points are skipped.
#[pyfunction]
fn direct_laplace(py: Python<'_>, points: Vec<Point>, weights: Vec<f64>) -> PyResult<Vec<f64>> {
    py.detach(|| direct_sum(&Laplace, &points, &points, &weights).map_err(core_err))
}

/// O(N^2) Helmholtz potentials; coincident points are skipped.
#[pyfunction]
fn direct_helmholtz(
    py: Python<'_>,
    points: Vec<Point>,
    weights: Vec<Complex64>,
    wavenumber: f64,
) -> PyResult<Vec<Complex64>> {
    py.detach(|| {
        direct_sum(&Helmholtz::new(wavenumber), &points, &points, &weights).map_err(core_err)
    })
}

/// Names of the M2L variants.
#[pyfunction]
fn variants() -> Vec<&'static str> {
    Variant::ALL.iter().map(|v| v.name()).collect()
}

/// Runs the bench harness and returns its `(level, variant, metric, value)`
/// rows.
#[pyfunction]
#[pyo3(signature = (geometry="sphere", n=2000, depth=3, acc=4, variants="iasym", seed=0, reference="leaf"))]
#[allow(clippy::too_many_arguments)]
fn run_experiment(
    py: Python<'_>,
    geometry: &str,
    n: usize,
    depth: usize,
    acc: usize,
    variants: &str,
    seed: u64,
    reference: &str,
) -> PyResult<Vec<(String, String, String, String)>> {
    let variants = if variants.eq_ignore_ascii_case("all") {
        Variant::ALL.to_vec()
    } else {
        variants
            .split(',')
            .map(|v| parse_variant(v.trim()))
            .collect::<PyResult<_>>()?
    };
    let config = ExperimentConfig {
        geometry: geometry.parse::<GeometryKind>().map_err(bench_err)?,
        n,
        depth,
        variants,
        seed,
        reference: reference.parse::<ReferenceSet>().map_err(bench_err)?,
        repeats: 1,
        ..ExperimentConfig::default()
    }
    .with_acc(acc);
    let report = py.detach(|| run(&config)).map_err(bench_err)?;
    Ok(report
        .rows()
        .into_iter()
        .map(|r| (r.level, r.variant, r.metric, r.value))
        .collect())
}

#[pymodule(name = "chebfmm")]
pub fn chebfmm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(laplace, m)?)?;
    m.add_function(wrap_pyfunction!(helmholtz, m)?)?;
    m.add_function(wrap_pyfunction!(direct_laplace, m)?)?;
    m.add_function(wrap_pyfunction!(direct_helmholtz, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
