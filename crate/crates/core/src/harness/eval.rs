//! Evaluation of the upscalers on the fixed test microstructures.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MeaError, Result};
use crate::fem::{self, BoundaryCondition};
use crate::field::{build_stack, MultiResStack, ScalarField};
use crate::fol::CoarseSolver;
use crate::microgen::{generate_test_suite, TEST_CASE_NAMES};
use crate::models::{upscale_interp, Upscaler, UpscalerKind};

use super::bench::{benchmark_predictor, BenchConfig};
use super::metrics::{flux_report, mean_abs_error};

#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub name: String,
    pub k: ScalarField,
    /// Fine finite element temperature.
    pub truth: Option<ScalarField>,
}

/// The six fixed microstructures with their fine FEM solutions.
pub fn test_cases(k_in: f64, k_out: f64, bc: &BoundaryCondition) -> Result<Vec<TestCase>> {
    generate_test_suite(k_in, k_out)?
        .into_par_iter()
        .zip(TEST_CASE_NAMES.par_iter())
        .map(|(s, name)| {
            let truth = fem::solve_steady_heat(&s.k101, bc)?;
            Ok(TestCase {
                name: name.to_string(),
                k: s.k101,
                truth: Some(truth),
            })
        })
        .collect()
}

/// Something that produces the fine temperature of a microstructure.
pub enum Predictor {
    Interp { order: u8 },
    Network(Upscaler<f32>),
}

impl Predictor {
    pub fn kind(&self) -> UpscalerKind {
        match self {
            Predictor::Interp { .. } => UpscalerKind::Interp,
            Predictor::Network(m) => m.kind(),
        }
    }

    pub fn count_params(&self) -> usize {
        match self {
            Predictor::Interp { .. } => 0,
            Predictor::Network(m) => m.count_params(),
        }
    }

    /// Upscales from an already computed coarse solution and stack.
    pub fn predict_from(&self, t11: &ScalarField, stack: &MultiResStack) -> Result<ScalarField> {
        match self {
            Predictor::Interp { order } => upscale_interp(t11, *order),
            Predictor::Network(m) => m.predict_high(t11, stack),
        }
    }

    /// Full pipeline from the fine conductivity: condensation, coarse solve
    /// (skipped when the model ignores it) and upscaling.
    pub fn predict(&self, coarse: &dyn CoarseSolver, k101: &ScalarField) -> Result<ScalarField> {
        let stack = build_stack(k101, "predict")?;
        let t11 = if self.kind().uses_coarse_solution() {
            coarse.solve_coarse(stack.coarsest())?
        } else {
            // only the shape matters to a model that reads the stack alone
            ScalarField::constant(stack.coarsest().n(), 0.0)?
        };
        self.predict_from(&t11, &stack)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub param_count: usize,
    /// Temperature MAE per test case, in report test order.
    pub errors: Vec<f64>,
    /// Flux-magnitude MAE per test case.
    pub flux_errors: Vec<f64>,
    pub average: f64,
    pub eval_seconds: Option<f64>,
    pub eval_seconds_exclusive: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seeds: Vec<u64>,
    pub dataset_hash: String,
    pub coarse_solver: String,
    pub config: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_names: Vec<String>,
    pub models: Vec<ModelReport>,
    pub meta: ReportMeta,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl EvalReport {
    pub fn model(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.name == name)
    }

    /// Recomputes every average from its cells.
    pub fn averages_consistent(&self) -> bool {
        self.models.iter().all(|m| mean(&m.errors) == m.average)
    }

    /// `model,test_case,mae,flux_mae` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,test_case,mae,flux_mae\n");
        for m in &self.models {
            for ((t, e), f) in self.test_names.iter().zip(&m.errors).zip(&m.flux_errors) {
                s.push_str(&format!("{},{t},{e:e},{f:e}\n", m.name));
            }
        }
        s
    }

    /// `model,average_mae,params,eval_seconds,eval_seconds_exclusive` rows;
    /// missing timings are left empty.
    pub fn summary_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut s = String::from("model,average_mae,params,eval_seconds,eval_seconds_exclusive\n");
        for m in &self.models {
            s.push_str(&format!(
                "{},{:e},{},{},{}\n",
                m.name,
                m.average,
                m.param_count,
                opt(m.eval_seconds),
                opt(m.eval_seconds_exclusive)
            ));
        }
        s
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| MeaError::format("report", e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MeaError::format("report", e.to_string()))
    }

    /// Writes `eval_report.csv`, `eval_summary.csv` and `eval_report.toml`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("eval_report.csv"), self.to_csv())?;
        std::fs::write(dir.join("eval_summary.csv"), self.summary_csv())?;
        std::fs::write(dir.join("eval_report.toml"), self.to_toml()?)?;
        Ok(())
    }
}

/// Scores every model on every case against the FEM truth. Cases run in
/// parallel; results are collected in input order. With `timing`, each
/// model is also benchmarked on the first case.
pub fn evaluate_suite(
    models: &[(String, Predictor)],
    coarse: &dyn CoarseSolver,
    cases: &[TestCase],
    timing: Option<BenchConfig>,
    meta: ReportMeta,
) -> Result<EvalReport> {
    if models.is_empty() || cases.is_empty() {
        return Err(MeaError::invalid("evaluation needs models and test cases"));
    }
    for c in cases {
        if c.truth.is_none() {
            return Err(MeaError::Precondition(format!(
                "test case {} has no ground truth",
                c.name
            )));
        }
    }
    // per case: per model (mae, flux mae)
    let cells: Vec<Vec<(f64, f64)>> = cases
        .par_iter()
        .map(|c| {
            let truth = c.truth.as_ref().expect("checked above");
            let stack = build_stack(&c.k, c.name.clone())?;
            let t11 = coarse.solve_coarse(stack.coarsest())?;
            models
                .iter()
                .map(|(_, m)| {
                    let pred = m.predict_from(&t11, &stack)?;
                    Ok((
                        mean_abs_error(&pred, truth)?,
                        flux_report(&pred, truth, &c.k)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut reports = Vec::with_capacity(models.len());
    for (j, (name, m)) in models.iter().enumerate() {
        let errors: Vec<f64> = cells.iter().map(|row| row[j].0).collect();
        let flux_errors = cells.iter().map(|row| row[j].1).collect();
        let (inc, exc) = match timing {
            Some(cfg) => {
                let t = benchmark_predictor(name, m, coarse, &cases[0].k, cfg)?;
                (Some(t.inclusive), Some(t.exclusive))
            }
            None => (None, None),
        };
        reports.push(ModelReport {
            name: name.clone(),
            param_count: m.count_params(),
            average: mean(&errors),
            errors,
            flux_errors,
            eval_seconds: inc,
            eval_seconds_exclusive: exc,
        });
    }
    Ok(EvalReport {
        test_names: cases.iter().map(|c| c.name.clone()).collect(),
        models: reports,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fol::FemCoarseSolver;

    #[test]
    fn interp_report_is_deterministic_and_persisted() {
        let cases = test_cases(0.1, 1.0, &BoundaryCondition::default()).unwrap();
        assert_eq!(cases.len(), 6);
        let models = vec![
            ("interp1".to_string(), Predictor::Interp { order: 1 }),
            ("interp3".to_string(), Predictor::Interp { order: 3 }),
        ];
        let solver = FemCoarseSolver::default();
        let a = evaluate_suite(&models, &solver, &cases, None, ReportMeta::default()).unwrap();
        let b = evaluate_suite(&models, &solver, &cases, None, ReportMeta::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.averages_consistent());
        assert_eq!(a.to_csv().lines().count(), 1 + 12);
        assert!(a.models.iter().all(|m| m.errors.iter().all(|&e| e >= 0.0)));
        let back = EvalReport::from_toml(&a.to_toml().unwrap()).unwrap();
        assert_eq!(back, a);
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        assert!(dir.path().join("eval_summary.csv").exists());
    }

    #[test]
    fn missing_truth_is_precondition_error() {
        let mut cases = test_cases(0.1, 1.0, &BoundaryCondition::default()).unwrap();
        cases[2].truth = None;
        let models = vec![("interp".to_string(), Predictor::Interp { order: 3 })];
        assert!(matches!(
            evaluate_suite(
                &models,
                &FemCoarseSolver::default(),
                &cases,
                None,
                ReportMeta::default()
            ),
            Err(MeaError::Precondition(_))
        ));
    }
}
