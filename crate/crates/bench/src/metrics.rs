//! Relative error of computed potentials against a reference.

use std::fmt;
use std::str::FromStr;

use chebfmm::Scalar;

use crate::error::{BenchError, Result};

/// Normalisation of the relative error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorMetric {
    /// `sqrt(sum |f - g|^2 / sum |f|^2)`.
    #[default]
    L2,
    /// `sqrt(sum |f - g|^2 / sum |f|)`: unsquared denominator.
    Paper,
}

impl FromStr for ErrorMetric {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(ErrorMetric::L2),
            "paper" => Ok(ErrorMetric::Paper),
            _ => Err(BenchError::Usage(format!("unknown error metric '{s}'"))),
        }
    }
}

impl fmt::Display for ErrorMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorMetric::L2 => "l2",
            ErrorMetric::Paper => "paper",
        })
    }
}

/// Error of `approx` against `reference` (`f` in the formulas above).
pub fn measure_error<T: Scalar>(approx: &[T], reference: &[T], metric: ErrorMetric) -> Result<f64> {
    if reference.is_empty() {
        return Err(chebfmm::Error::EmptyReference.into());
    }
    if approx.len() != reference.len() {
        return Err(BenchError::Usage(format!(
            "{} values against {} reference values",
            approx.len(),
            reference.len()
        )));
    }
    let num: f64 = approx
        .iter()
        .zip(reference)
        .map(|(&a, &f)| (f - a).modulus_squared())
        .sum();
    let den: f64 = match metric {
        ErrorMetric::L2 => reference.iter().map(|f| f.modulus_squared()).sum(),
        ErrorMetric::Paper => reference.iter().map(|f| f.modulus()).sum(),
    };
    if den == 0.0 {
        return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((num / den).sqrt())
}
