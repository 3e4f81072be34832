//! Two-phase conductivity maps: swept elliptical (and annular) inclusions for
//! training, plus six fixed out-of-distribution shapes for testing.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MeaError, Result};
use crate::field::{ScalarField, FINE_N};

pub const DEFAULT_K_IN: f64 = 0.1;
pub const DEFAULT_K_OUT: f64 = 1.0;

/// Centres are drawn uniformly from this interval on both axes.
const CENTER_RANGE: (f64, f64) = (0.15, 0.85);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    pub center: (f64, f64),
    pub a_outer: f64,
    pub b_outer: f64,
    /// Zero inner axes give a solid ellipse.
    pub a_inner: f64,
    pub b_inner: f64,
    pub theta: f64,
}

impl EllipseSpec {
    pub fn solid(center: (f64, f64), a: f64, b: f64, theta: f64) -> Self {
        Self {
            center,
            a_outer: a,
            b_outer: b,
            a_inner: 0.0,
            b_inner: 0.0,
            theta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.a_outer > 0.0
            && self.b_outer > 0.0
            && (0.0..=self.a_outer).contains(&self.a_inner)
            && (0.0..=self.b_outer).contains(&self.b_inner)
            && self.theta.is_finite()
            && self.center.0.is_finite()
            && self.center.1.is_finite();
        if ok {
            Ok(())
        } else {
            Err(MeaError::invalid(format!("invalid ellipse {self:?}")))
        }
    }

    /// True when `(x, y)` lies in the inclusion (between the inner and outer
    /// boundaries for an annulus).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let outer = (u / self.a_outer).powi(2) + (v / self.b_outer).powi(2);
        if outer > 1.0 {
            return false;
        }
        if self.a_inner == 0.0 || self.b_inner == 0.0 {
            return true;
        }
        (u / self.a_inner).powi(2) + (v / self.b_inner).powi(2) >= 1.0
    }
}

/// Inclusion geometries used by the fixed test suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Ellipse(EllipseSpec),
    Triangle([(f64, f64); 3]),
    /// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
    Rectangle {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse(e) => e.contains(x, y),
            Shape::Triangle([a, b, c]) => {
                let cross = |p: (f64, f64), q: (f64, f64)| {
                    (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0)
                };
                let (d1, d2, d3) = (cross(a, b), cross(b, c), cross(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
            Shape::Rectangle { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

fn check_conductivities(k_in: f64, k_out: f64) -> Result<()> {
    if k_in > 0.0 && k_out > 0.0 && k_in.is_finite() && k_out.is_finite() {
        Ok(())
    } else {
        Err(MeaError::invalid(format!(
            "conductivities must be positive, got k_in={k_in}, k_out={k_out}"
        )))
    }
}

fn rasterize_shapes(shapes: &[Shape], n: usize, k_in: f64, k_out: f64) -> Result<ScalarField> {
    check_conductivities(k_in, k_out)?;
    ScalarField::from_fn(n, |x, y| {
        if shapes.iter().any(|s| s.contains(x, y)) {
            k_in
        } else {
            k_out
        }
    })
}

/// Union of the ellipses at every node: `k_in` inside any inclusion, `k_out`
/// elsewhere.
pub fn rasterize(ellipses: &[EllipseSpec], n: usize, k_in: f64, k_out: f64) -> Result<ScalarField> {
    if n < 2 {
        return Err(MeaError::invalid(format!(
            "grid side must be >= 2, got {n}"
        )));
    }
    for e in ellipses {
        e.validate()?;
    }
    let shapes: Vec<Shape> = ellipses.iter().copied().map(Shape::Ellipse).collect();
    rasterize_shapes(&shapes, n, k_in, k_out)
}

/// Fraction of nodes whose value equals `k_in` (relative tolerance 1e-9).
pub fn phase_fraction(field: &ScalarField, k_in: f64) -> f64 {
    let tol = 1e-9 * k_in.abs();
    let count = field
        .values()
        .iter()
        .filter(|&&v| (v - k_in).abs() <= tol)
        .count();
    count as f64 / field.values().len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicrostructureSample {
    pub k101: ScalarField,
    pub ellipses: Vec<EllipseSpec>,
    pub k_in: f64,
    pub k_out: f64,
    pub phase_fraction: f64,
}

/// Inclusive range swept with a fixed step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRange {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl SweepRange {
    pub const fn new(min: f64, max: f64, step: f64) -> Self {
        Self { min, max, step }
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0)
            || self.max < self.min
            || !self.min.is_finite()
            || !self.max.is_finite()
        {
            return Err(MeaError::Config(format!("invalid sweep range {self:?}")));
        }
        let count = ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..count)
            .map(|i| self.min + i as f64 * self.step)
            .collect())
    }
}

/// Parameter sweep for the training microstructures. Every combination of the
/// swept values produces one sample; centres are random per sample.
///
/// Inner axes are swept as a fraction of the outer axes so that the annulus
/// invariant `inner <= outer` holds for every combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Number of ellipses per sample (rounded to integers).
    pub n_c: SweepRange,
    pub a_outer: SweepRange,
    pub b_outer: SweepRange,
    /// `a_inner = f * a_outer`, `b_inner = f * b_outer`.
    pub inner_fraction: SweepRange,
    pub theta: SweepRange,
    pub k_in: f64,
    pub k_out: f64,
    pub rng_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        // 7 * 5 * 3 * 3 * 18 = 5670 combinations
        Self {
            n_c: SweepRange::new(3.0, 9.0, 1.0),
            a_outer: SweepRange::new(0.20, 0.40, 0.05),
            b_outer: SweepRange::new(0.20, 0.40, 0.10),
            inner_fraction: SweepRange::new(0.0, 0.4, 0.2),
            theta: SweepRange::new(0.0, 17.0 * PI / 18.0, PI / 18.0),
            k_in: DEFAULT_K_IN,
            k_out: DEFAULT_K_OUT,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SweepPoint {
    n_c: usize,
    a: f64,
    b: f64,
    inner: f64,
    theta: f64,
}

impl SweepConfig {
    fn points(&self) -> Result<Vec<SweepPoint>> {
        check_conductivities(self.k_in, self.k_out).map_err(|e| MeaError::Config(e.to_string()))?;
        let n_c = self.n_c.values()?;
        let a = self.a_outer.values()?;
        let b = self.b_outer.values()?;
        let inner = self.inner_fraction.values()?;
        let theta = self.theta.values()?;
        if inner.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(MeaError::Config("inner fraction must lie in [0, 1]".into()));
        }
        if a.iter().chain(&b).any(|&v| v <= 0.0) {
            return Err(MeaError::Config("outer axes must be positive".into()));
        }
        let mut points =
            Vec::with_capacity(n_c.len() * a.len() * b.len() * inner.len() * theta.len());
        for &nc in &n_c {
            for &av in &a {
                for &bv in &b {
                    for &f in &inner {
                        for &t in &theta {
                            points.push(SweepPoint {
                                n_c: nc.round().max(0.0) as usize,
                                a: av,
                                b: bv,
                                inner: f,
                                theta: t,
                            });
                        }
                    }
                }
            }
        }
        Ok(points)
    }

    /// Number of sweep combinations before degenerate samples are dropped.
    pub fn combination_count(&self) -> Result<usize> {
        Ok(self.points()?.len())
    }
}

/// Independent stream per sample so that parallel and serial generation agree.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn build_sample(cfg: &SweepConfig, p: &SweepPoint, index: u64) -> Result<MicrostructureSample> {
    let mut rng = sample_rng(cfg.rng_seed, index);
    let ellipses: Vec<EllipseSpec> = (0..p.n_c)
        .map(|_| {
            let cx = rng.gen_range(CENTER_RANGE.0..=CENTER_RANGE.1);
            let cy = rng.gen_range(CENTER_RANGE.0..=CENTER_RANGE.1);
            EllipseSpec {
                center: (cx, cy),
                a_outer: p.a,
                b_outer: p.b,
                a_inner: p.inner * p.a,
                b_inner: p.inner * p.b,
                theta: p.theta,
            }
        })
        .collect();
    let k101 = rasterize(&ellipses, FINE_N, cfg.k_in, cfg.k_out)?;
    let phase_fraction = phase_fraction(&k101, cfg.k_in);
    Ok(MicrostructureSample {
        k101,
        ellipses,
        k_in: cfg.k_in,
        k_out: cfg.k_out,
        phase_fraction,
    })
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub samples: Vec<MicrostructureSample>,
    /// Samples dropped because they were single-phase.
    pub discarded: usize,
}

/// Rasterizes every sweep combination at 101x101, dropping single-phase
/// samples. Output order and content depend only on the configuration.
pub fn generate_dataset(config: &SweepConfig) -> Result<GeneratedDataset> {
    let points = config.points()?;
    let built: Vec<MicrostructureSample> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| build_sample(config, p, i as u64))
        .collect::<Result<_>>()?;
    let total = built.len();
    let samples: Vec<MicrostructureSample> = built
        .into_iter()
        .filter(|s| s.phase_fraction > 0.0 && s.phase_fraction < 1.0)
        .collect();
    let discarded = total - samples.len();
    if discarded > 0 {
        log::info!("discarded {discarded} single-phase samples out of {total}");
    }
    if samples.is_empty() {
        return Err(MeaError::Config(
            "sweep produced zero usable samples".into(),
        ));
    }
    Ok(GeneratedDataset { samples, discarded })
}

/// Names of the fixed test microstructures, in suite order.
pub const TEST_CASE_NAMES: [&str; 6] = [
    "ring",
    "triangle",
    "rectangle",
    "double-ring",
    "cross",
    "mixed",
];

/// Shapes of the six out-of-distribution test cases.
pub fn test_suite_shapes() -> Vec<Vec<Shape>> {
    let ring = |cx: f64, cy: f64, r_out: f64, r_in: f64| {
        Shape::Ellipse(EllipseSpec {
            center: (cx, cy),
            a_outer: r_out,
            b_outer: r_out,
            a_inner: r_in,
            b_inner: r_in,
            theta: 0.0,
        })
    };
    vec![
        vec![ring(0.5, 0.5, 0.32, 0.2)],
        vec![Shape::Triangle([(0.2, 0.2), (0.8, 0.2), (0.5, 0.8)])],
        vec![Shape::Rectangle {
            x0: 0.3,
            y0: 0.25,
            x1: 0.7,
            y1: 0.75,
        }],
        vec![ring(0.3, 0.32, 0.2, 0.11), ring(0.7, 0.68, 0.2, 0.11)],
        vec![
            Shape::Rectangle {
                x0: 0.2,
                y0: 0.42,
                x1: 0.8,
                y1: 0.58,
            },
            Shape::Rectangle {
                x0: 0.42,
                y0: 0.2,
                x1: 0.58,
                y1: 0.8,
            },
        ],
        vec![
            ring(0.3, 0.7, 0.18, 0.1),
            Shape::Triangle([(0.55, 0.15), (0.9, 0.15), (0.725, 0.5)]),
            Shape::Rectangle {
                x0: 0.12,
                y0: 0.1,
                x1: 0.38,
                y1: 0.35,
            },
        ],
    ]
}

pub fn generate_test_suite(k_in: f64, k_out: f64) -> Result<Vec<MicrostructureSample>> {
    test_suite_shapes()
        .iter()
        .map(|shapes| {
            let k101 = rasterize_shapes(shapes, FINE_N, k_in, k_out)?;
            let phase_fraction = phase_fraction(&k101, k_in);
            let ellipses = shapes
                .iter()
                .filter_map(|s| match s {
                    Shape::Ellipse(e) => Some(*e),
                    _ => None,
                })
                .collect();
            Ok(MicrostructureSample {
                k101,
                ellipses,
                k_in,
                k_out,
                phase_fraction,
            })
        })
        .collect()
}

/// Two vertical slabs: `k_left` on nodes with `x <= 0.5`, `k_right` elsewhere.
pub fn two_slab(n: usize, k_left: f64, k_right: f64) -> Result<ScalarField> {
    check_conductivities(k_left, k_right)?;
    ScalarField::from_fn(n, |x, _| if x <= 0.5 + 1e-12 { k_left } else { k_right })
}
