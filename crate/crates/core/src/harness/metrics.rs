//! Field comparison metrics.

use crate::error::{MeaError, Result};
use crate::fem::compute_flux;
use crate::field::ScalarField;

/// `Σ|pred − truth| / n²`.
pub fn mean_abs_error(pred: &ScalarField, truth: &ScalarField) -> Result<f64> {
    if pred.n() != truth.n() {
        return Err(MeaError::invalid(format!(
            "resolution mismatch: prediction {} vs truth {}",
            pred.n(),
            truth.n()
        )));
    }
    let sum: f64 = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / pred.values().len() as f64)
}

/// Mean absolute error of the flux magnitudes `|k ∇T|` of two temperatures.
pub fn flux_report(pred: &ScalarField, truth: &ScalarField, k: &ScalarField) -> Result<f64> {
    let a = compute_flux(pred, k)?.magnitude()?;
    let b = compute_flux(truth, k)?.magnitude()?;
    mean_abs_error(&a, &b)
}

/// Largest nodal temperature-gradient magnitude.
pub fn max_gradient(field: &ScalarField) -> f64 {
    let (gx, gy) = crate::fem::temperature_gradient(field);
    gx.iter()
        .zip(&gy)
        .map(|(x, y)| x.hypot(*y))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// A horizontal line at fixed row index.
    Row,
    /// A vertical line at fixed column index.
    Column,
}

impl std::str::FromStr for Axis {
    type Err = MeaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" | "x" => Ok(Axis::Row),
            "column" | "col" | "y" => Ok(Axis::Column),
            _ => Err(MeaError::invalid(format!("unknown axis {s:?}"))),
        }
    }
}

pub fn cross_section(field: &ScalarField, axis: Axis, index: usize) -> Result<Vec<f64>> {
    let n = field.n();
    if index >= n {
        return Err(MeaError::invalid(format!(
            "cross-section index {index} outside 0..{n}"
        )));
    }
    Ok(match axis {
        Axis::Row => field.values()[index * n..(index + 1) * n].to_vec(),
        Axis::Column => (0..n).map(|r| field.get(r, index)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        let a = ScalarField::from_fn(5, |x, y| x * y).unwrap();
        assert_eq!(mean_abs_error(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.01).unwrap();
        assert!((mean_abs_error(&b, &a).unwrap() - 0.01).abs() < 1e-15);
        let c = ScalarField::constant(6, 0.0).unwrap();
        assert!(mean_abs_error(&a, &c).is_err());
    }

    #[test]
    fn ramp_cross_sections() {
        let t = ScalarField::from_fn(11, |x, _| 1.0 - x).unwrap();
        let row = cross_section(&t, Axis::Row, 4).unwrap();
        assert_eq!(row.len(), 11);
        for (j, v) in row.iter().enumerate() {
            assert!((v - (1.0 - j as f64 / 10.0)).abs() < 1e-15);
        }
        assert!(cross_section(&t, Axis::Column, 0)
            .unwrap()
            .iter()
            .all(|&v| v == 1.0));
        assert!(cross_section(&t, Axis::Row, 11).is_err());
    }

    #[test]
    fn flux_of_identical_fields_is_zero() {
        let t = ScalarField::from_fn(9, |x, y| (x * 2.0).sin() + y).unwrap();
        let k = ScalarField::constant(9, 0.7).unwrap();
        assert_eq!(flux_report(&t, &t, &k).unwrap(), 0.0);
        assert!(
            (max_gradient(&ScalarField::from_fn(9, |x, _| 1.0 - x).unwrap()) - 1.0).abs() < 1e-12
        );
    }
}
