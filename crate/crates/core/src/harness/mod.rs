//! Evaluation, timing, studies, renderings and run configuration.

pub mod bench;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod render;
pub mod study;

pub use bench::{benchmark_fem, benchmark_predictor, median_seconds, BenchConfig, ModelTiming};
pub use config::{CoarseSource, PipelineConfig};
pub use eval::{
    evaluate_suite, test_cases, EvalReport, ModelReport, Predictor, ReportMeta, TestCase,
};
pub use metrics::{cross_section, flux_report, max_gradient, mean_abs_error, Axis};
pub use render::{render_error_map, render_heatmap};
pub use study::{run_study, StudyEntry, StudyKind, StudyResult};
