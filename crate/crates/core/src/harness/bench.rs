//! Wall-clock timing of single-case inference.

use std::time::Instant;

use crate::error::{MeaError, Result};
use crate::fem::{self, BoundaryCondition};
use crate::field::{build_stack, ScalarField};
use crate::fol::CoarseSolver;

use super::eval::Predictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 3,
            repeats: 20,
        }
    }
}

/// Median wall-clock seconds of `f` after `cfg.warmup` untimed calls.
pub fn median_seconds(cfg: BenchConfig, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    if cfg.repeats == 0 {
        return Err(MeaError::invalid("benchmark needs at least one repeat"));
    }
    for _ in 0..cfg.warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let t0 = Instant::now();
        f()?;
        // a zero reading would not be a usable timing
        times.push(t0.elapsed().as_secs_f64().max(1e-9));
    }
    times.sort_by(f64::total_cmp);
    let m = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[m]
    } else {
        0.5 * (times[m - 1] + times[m])
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelTiming {
    pub name: String,
    /// Condensation, coarse solve and upscaling from the fine conductivity.
    pub inclusive: f64,
    /// Upscaling only, from a precomputed coarse solution and stack.
    pub exclusive: f64,
}

pub fn benchmark_predictor(
    name: &str,
    model: &Predictor,
    coarse: &dyn CoarseSolver,
    k101: &ScalarField,
    cfg: BenchConfig,
) -> Result<ModelTiming> {
    let inclusive = median_seconds(cfg, || model.predict(coarse, k101).map(drop))?;
    let stack = build_stack(k101, "bench")?;
    let t11 = coarse.solve_coarse(stack.coarsest())?;
    let exclusive = median_seconds(cfg, || model.predict_from(&t11, &stack).map(drop))?;
    Ok(ModelTiming {
        name: name.to_string(),
        inclusive,
        exclusive,
    })
}

/// Median time of one fine finite element solve, assembly included.
pub fn benchmark_fem(k101: &ScalarField, bc: &BoundaryCondition, cfg: BenchConfig) -> Result<f64> {
    median_seconds(cfg, || fem::solve_steady_heat(k101, bc).map(drop))
}
