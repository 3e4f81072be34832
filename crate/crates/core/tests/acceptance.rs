//! End-to-end acceptance checks, one line per criterion.
//!
//! Criterion 6 trains several full-size models and takes days on a single
//! core; it only runs with `MEA_ACCEPTANCE_FULL=1`. The second half of
//! criterion 7 reuses the MEA-1 trained there.

mod common;

use std::time::Instant;

use mea_core::dataset::{quantize, Dataset};
use mea_core::fem::{
    assemble, energy_and_gradient, solve_steady_heat, solve_steady_heat_with, BoundaryCondition,
    CellConductivity, GaussTables,
};
use mea_core::field::{build_stack, condense_max, MinMax, ScalarField, STACK_WINDOWS};
use mea_core::fol::{train_fol, CoarseSolver, FemCoarseSolver, FolModel, FolTrainConfig};
use mea_core::harness::{
    benchmark_fem, benchmark_predictor, evaluate_suite, max_gradient, run_study, test_cases,
    BenchConfig, Predictor, ReportMeta, StudyKind, TestCase,
};
use mea_core::microgen::{
    generate_dataset, rasterize, two_slab, EllipseSpec, SweepConfig, SweepRange,
};
use mea_core::models::{
    fit_norm, train_prepared, upscale_interp, Inputs, PreparedData, TrainConfig, TrainingPair,
    Upscaler, UpscalerKind, UpscalerSpec,
};
use mea_core::nn::{Checkpoint, CheckpointMeta};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{gradcheck_kind, FD_TOL, LAYER_KINDS};

const FULL_ENV: &str = "MEA_ACCEPTANCE_FULL";

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

type Check = Result<Outcome, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn nodal_x(n: usize, i: usize) -> f64 {
    (i % n) as f64 / (n - 1) as f64
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let bc = BoundaryCondition::default();
    let mut worst_linear = 0.0f64;
    for n in [11, 101] {
        let t =
            solve_steady_heat(&ScalarField::constant(n, 1.0).map_err(err)?, &bc).map_err(err)?;
        for (i, v) in t.values().iter().enumerate() {
            worst_linear = worst_linear.max((v - (1.0 - nodal_x(n, i))).abs());
        }
    }
    let (k1, k2) = (1.0, 0.1);
    let expected = k1 / (k1 + k2);
    let mut worst_interface = 0.0f64;
    for n in [11, 101] {
        let cells =
            CellConductivity::from_fn(n, |x, _| if x < 0.5 { k1 } else { k2 }).map_err(err)?;
        let (t, _) = solve_steady_heat_with(&cells, &bc).map_err(err)?;
        let mid = (n - 1) / 2;
        for r in 0..n {
            worst_interface = worst_interface.max((t.get(r, mid) - expected).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        worst_linear <= 1e-10 && worst_interface <= 1e-8 && secs < 5.0,
        format!("linear err {worst_linear:.1e}, interface err {worst_interface:.1e}, {secs:.2} s"),
    ))
}

fn random_microstructure(rng: &mut ChaCha8Rng, n: usize) -> Result<ScalarField, String> {
    loop {
        let count = rng.gen_range(1..=6);
        let ellipses: Vec<EllipseSpec> = (0..count)
            .map(|_| {
                EllipseSpec::solid(
                    (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)),
                    rng.gen_range(0.1..0.4),
                    rng.gen_range(0.1..0.4),
                    rng.gen_range(0.0..std::f64::consts::PI),
                )
            })
            .collect();
        let k = rasterize(&ellipses, n, 0.1, 1.0).map_err(err)?;
        if k.min() < k.max() {
            return Ok(k);
        }
    }
}

fn criterion_2() -> Check {
    let bc = BoundaryCondition::default();
    let tables = GaussTables::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 11;
    let (mut violations, mut trials) = (0usize, 0usize);
    let mut worst_grad_ratio = 0.0f64;
    for _ in 0..50 {
        let k = random_microstructure(&mut rng, n)?;
        let t = solve_steady_heat(&k, &bc).map_err(err)?;
        let e0 = energy_and_gradient(t.values(), &k, &tables, false)
            .map_err(err)?
            .0;
        for _ in 0..100 {
            let scale = 10f64.powf(rng.gen_range(-4.0..0.0));
            let perturbed: Vec<f64> = t
                .values()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let col = i % n;
                    if col == 0 || col == n - 1 {
                        v
                    } else {
                        v + scale * rng.gen_range(-1.0..1.0)
                    }
                })
                .collect();
            let e1 = energy_and_gradient(&perturbed, &k, &tables, false)
                .map_err(err)?
                .0;
            trials += 1;
            if e0 > e1 {
                violations += 1;
            }
        }
        let sys = assemble(&k, &bc).map_err(err)?;
        let diag = sys.stiffness.diagonal();
        let mean_diag = diag.iter().sum::<f64>() / diag.len() as f64;
        let (_, grad) = energy_and_gradient(t.values(), &k, &tables, true).map_err(err)?;
        let g = sys
            .free_nodes
            .iter()
            .fold(0.0f64, |m, &i| m.max(grad[i].abs()));
        worst_grad_ratio = worst_grad_ratio.max(g / mean_diag);
    }
    Ok(verdict(
        violations == 0 && worst_grad_ratio <= 1e-6,
        format!(
            "{violations}/{trials} perturbations lowered the energy, \
             free-node gradient {worst_grad_ratio:.1e} x mean diagonal"
        ),
    ))
}

fn criterion_3() -> Check {
    let mut runner = TestRunner::new(Config {
        cases: 200,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (any::<u64>(), prop::bool::ANY);
    let result = runner.run(&strategy, |(seed, two_phase)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = if two_phase {
            random_microstructure(&mut rng, 101).map_err(TestCaseError::fail)?
        } else {
            ScalarField::from_fn(101, |_, _| rng.gen_range(-5.0..5.0)).unwrap()
        };
        let inputs = f.values();
        for (w, side) in STACK_WINDOWS.iter().zip([51, 26, 13, 11]) {
            let c = condense_max(&f, *w).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(c.n(), side);
            prop_assert!(c.values().iter().all(|v| inputs.contains(v)));
        }
        Ok(())
    });
    Ok(match result {
        Ok(()) => Outcome::Pass("200 random fields".into()),
        Err(e) => Outcome::Fail(e.to_string()),
    })
}

fn criterion_4() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_kind = "";
    for (i, kind) in LAYER_KINDS.iter().enumerate() {
        let e = gradcheck_kind(kind, 10, 100 + i as u64);
        if e >= worst {
            worst = e;
            worst_kind = kind;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        worst <= FD_TOL && secs < 60.0,
        format!(
            "{} kinds, worst relative error {worst:.1e} ({worst_kind}), {secs:.1} s",
            LAYER_KINDS.len()
        ),
    ))
}

fn criterion_5() -> Check {
    let norm = MinMax::new(0.1, 1.0).map_err(err)?;
    let mut problems = Vec::new();

    let mea1 = warmed(UpscalerKind::Mea1, norm)?;
    let trace = mea1.trace_shapes(2).map_err(err)?;
    let encoder_out = trace.iter().rfind(|(l, _)| l == "encoder").map(|(_, s)| *s);
    if encoder_out.map(|s| [s[2], s[3]]) != Some([11, 11]) {
        problems.push(format!("MEA encoder ends at {encoder_out:?}"));
    }
    let mut stages = Vec::new();
    let mut upsampled = [0usize; 4];
    for (label, shape) in &trace {
        if label.starts_with("upsample_") {
            upsampled = *shape;
        } else if label.starts_with("concat_") {
            stages.push(shape[2]);
            if shape[1] != upsampled[1] + 1 || shape[2] != upsampled[2] {
                problems.push(format!("{label} {shape:?} after {upsampled:?}"));
            }
        }
    }
    if stages != [13, 26, 51, 101] {
        problems.push(format!("MEA stages {stages:?}"));
    }
    if trace.last().map(|(_, s)| *s) != Some([2, 1, 101, 101]) {
        problems.push("MEA output is not 1x101x101".into());
    }
    // the concatenated channel carries the condensed conductivity itself
    let k = two_slab(101, 1.0, 0.1).map_err(err)?;
    let stack = build_stack(&k, "audit").map_err(err)?;
    let t11 = ScalarField::constant(11, 0.5).map_err(err)?;
    let inputs = Inputs::<f32>::from_fields(&[&t11], &[&stack], &norm).map_err(err)?;
    for x in mea1.stage_inputs(&inputs).map_err(err)? {
        let n = x.height();
        let level = stack.level(n).ok_or("missing stack level")?;
        let last = x.plane(0, x.channels() - 1);
        let matches = last
            .iter()
            .zip(level.values())
            .all(|(&a, &b)| a == norm.apply(b) as f32);
        if !matches {
            problems.push(format!("stage {n} conductivity channel differs"));
        }
    }

    let unet = warmed(UpscalerKind::Unet, norm)?;
    let bottleneck = unet.unet_bottleneck(&inputs).map_err(err)?.shape();
    if bottleneck != [1, 128, 11, 11] {
        problems.push(format!("U-Net bottleneck {bottleneck:?}"));
    }

    let counts: Vec<usize> = [UpscalerKind::Mea2, UpscalerKind::Mea1, UpscalerKind::Unet]
        .into_iter()
        .map(|kind| {
            Upscaler::<f32>::build(UpscalerSpec::new(kind, 0), norm).map(|m| m.count_params())
        })
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let ffnn = Upscaler::<f32>::build(UpscalerSpec::new(UpscalerKind::Ffnn, 0), norm)
        .map_err(err)?
        .count_params();
    if ffnn != 56_142_201 {
        problems.push(format!("FFNN has {ffnn} parameters"));
    }
    if !(counts[0] < counts[1] && counts[1] < counts[2] && 10 * counts[2] < ffnn) {
        problems.push(format!("parameter ordering {counts:?} vs {ffnn}"));
    }
    let detail = format!(
        "stages 11->13->26->51->101, bottleneck {:?}, params mea2 {} mea1 {} unet {} ffnn {ffnn}",
        &bottleneck[1..],
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(if problems.is_empty() {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(problems.join("; "))
    })
}

/// Models from the desk-scale run, kept for the sharp-interface check.
struct FullRun {
    fol: FolModel,
    mea1_seed1: Upscaler<f32>,
}

fn best_model(
    spec: UpscalerSpec,
    norm: MinMax,
    best: &Checkpoint,
) -> Result<Upscaler<f32>, String> {
    let mut m = Upscaler::<f32>::build(spec, norm).map_err(err)?;
    best.load_into(&mut m.store).map_err(err)?;
    Ok(m)
}

fn criterion_6(full: &mut Option<FullRun>) -> Check {
    if std::env::var(FULL_ENV).map_or(true, |v| v != "1") {
        return Ok(Outcome::NotRun(format!(
            "desk-scale training, set {FULL_ENV}=1"
        )));
    }
    let start = Instant::now();
    let bc = BoundaryCondition::default();
    let generated = generate_dataset(&SweepConfig::default()).map_err(err)?;
    let mut data = Dataset::from_generated(&generated)
        .and_then(|d| d.sample(2000, 0))
        .map_err(err)?;
    data.label_fem(&bc).map_err(err)?;
    let hash = data.hash();
    let coarse: Vec<ScalarField> = data
        .conductivities()
        .map(|k| build_stack(k, "fol").map(|s| s.coarsest().clone()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let (fol, _) = train_fol(
        &coarse,
        &FolTrainConfig {
            dataset_hash: hash.clone(),
            ..FolTrainConfig::default()
        },
    )
    .map_err(err)?;
    let pairs = data.training_pairs(&fol).map_err(err)?;
    let norm = fit_norm(&pairs).map_err(err)?;
    let cases = test_cases(0.1, 1.0, &bc).map_err(err)?;
    let (mut a, mut b, mut d) = (0, 0, 0);
    let mut c = None;
    let mut notes = Vec::new();
    for seed in [1u64, 2, 3] {
        let cfg = |kind: UpscalerKind| TrainConfig {
            epochs: 200,
            batch: kind.default_batch(),
            lr: 1e-4,
            seed,
            dataset_hash: hash.clone(),
        };
        let mea1_spec = UpscalerSpec::new(UpscalerKind::Mea1, seed);
        let prepared = PreparedData::new(
            &pairs,
            &Upscaler::<f32>::build(mea1_spec, norm).map_err(err)?,
        )
        .map_err(err)?;
        let train = |spec: UpscalerSpec, cfg: &TrainConfig| {
            let mut m = Upscaler::<f32>::build(spec, norm).map_err(err)?;
            let out = train_prepared(&mut m, &prepared, cfg).map_err(err)?;
            Ok::<_, String>((best_model(spec, norm, &out.best)?, out.history))
        };
        let (mea1, mea1_hist) = train(mea1_spec, &cfg(UpscalerKind::Mea1))?;
        let ffnn_spec = UpscalerSpec::new(UpscalerKind::Ffnn, seed);
        let (ffnn, _) = train(ffnn_spec, &cfg(UpscalerKind::Ffnn))?;
        let (_, concat1_hist) = train(mea1_spec.with_concat(1), &cfg(UpscalerKind::Mea1))?;

        let models = vec![
            ("mea1".to_string(), Predictor::Network(mea1)),
            ("ffnn".to_string(), Predictor::Network(ffnn)),
        ];
        let report =
            evaluate_suite(&models, &fol, &cases, None, ReportMeta::default()).map_err(err)?;
        let (m_avg, f_avg) = (report.models[0].average, report.models[1].average);
        if m_avg <= 0.06 && m_avg <= f_avg {
            a += 1;
        }
        let (v4, v1) = (
            mea1_hist.final_val().unwrap_or(f64::NAN),
            concat1_hist.final_val().unwrap_or(f64::NAN),
        );
        if v4 <= v1 {
            b += 1;
        }
        if seed == 1 {
            let base = cfg(UpscalerKind::Mea1);
            let study =
                run_study(StudyKind::Batch, &pairs, &base, seed, Some(&[25, 200])).map_err(err)?;
            let val = |bs| study.entry(UpscalerKind::Mea1, bs).map(|e| e.final_val());
            c = Some(val(25) <= val(200));
            notes.push(format!("batch 25 {:?} vs 200 {:?}", val(25), val(200)));
        }
        let size = run_study(
            StudyKind::Datasize,
            &pairs,
            &cfg(UpscalerKind::Mea1),
            seed,
            Some(&[1000]),
        )
        .map_err(err)?;
        let val = |k| size.entry(k, 1000).map(|e| e.final_val());
        if val(UpscalerKind::Mea1) < val(UpscalerKind::Unet) {
            d += 1;
        }
        notes.push(format!(
            "seed {seed}: mea1 {m_avg:.4} ffnn {f_avg:.4} concat4 {v4:.2e} concat1 {v1:.2e}"
        ));
        if seed == 1 {
            let Predictor::Network(m) = models.into_iter().next().expect("mea1").1 else {
                unreachable!()
            };
            *full = Some(FullRun {
                fol: FolModel::from_checkpoint(&fol.to_checkpoint(CheckpointMeta::default()))
                    .map_err(err)?,
                mea1_seed1: m,
            });
        }
    }
    let hours = start.elapsed().as_secs_f64() / 3600.0;
    let ok = a >= 2 && b >= 2 && c == Some(true) && d >= 2 && hours <= 4.0;
    Ok(verdict(
        ok,
        format!(
            "(a) {a}/3 (b) {b}/3 (c) {c:?} (d) {d}/3, {hours:.2} h; {}",
            notes.join("; ")
        ),
    ))
}

fn max_gradient_error(pred: &ScalarField, truth: &ScalarField) -> f64 {
    (max_gradient(pred) - max_gradient(truth)).abs()
}

fn criterion_7(full: Option<&FullRun>) -> Check {
    let bc = BoundaryCondition::default();
    let k = two_slab(101, 1.0, 0.1).map_err(err)?;
    let truth = solve_steady_heat(&k, &bc).map_err(err)?;
    let stack = build_stack(&k, "two-slab").map_err(err)?;
    // the interpolation sees the best possible coarse solution
    let t11 = FemCoarseSolver { bc }
        .solve_coarse(stack.coarsest())
        .map_err(err)?;
    let interp = upscale_interp(&t11, 3).map_err(err)?;
    let (g_true, g_interp) = (max_gradient(&truth), max_gradient(&interp));
    let under = 1.0 - g_interp / g_true;
    let clause_a = under >= 0.20;
    let mut detail = format!(
        "FEM max gradient {g_true:.4}, order-3 interpolation {g_interp:.4} \
         ({:+.1}% against FEM, need an underestimate of at least 20%)",
        -100.0 * under
    );
    let clause_b = match full {
        Some(run) => {
            let t11 = run.fol.solve_coarse(stack.coarsest()).map_err(err)?;
            let pred = run.mea1_seed1.predict_high(&t11, &stack).map_err(err)?;
            let (e_mea, e_interp) = (
                max_gradient_error(&pred, &truth),
                max_gradient_error(&interp, &truth),
            );
            detail.push_str(&format!(
                "; MEA-1 gradient error {e_mea:.4} vs interpolation {e_interp:.4}"
            ));
            Some(e_mea < e_interp)
        }
        None => {
            detail.push_str("; MEA-1 clause needs the desk-scale model");
            None
        }
    };
    Ok(match (clause_a, clause_b) {
        (false, _) | (_, Some(false)) => Outcome::Fail(detail),
        (true, Some(true)) => Outcome::Pass(detail),
        (true, None) => Outcome::NotRun(detail),
    })
}

fn criterion_8() -> Check {
    let bc = BoundaryCondition::default();
    let cfg = BenchConfig::default();
    let norm = MinMax::new(0.1, 1.0).map_err(err)?;
    let cases = test_cases(0.1, 1.0, &bc).map_err(err)?;
    let k = &cases[0].k;
    // timings do not depend on the weights, so untrained networks suffice
    let fol = FolModel::new(11, norm, 0).map_err(err)?;
    let fem_secs = benchmark_fem(k, &bc, cfg).map_err(err)?;
    let mut times = Vec::new();
    for (name, p) in [
        ("interp", Predictor::Interp { order: 3 }),
        ("mea2", network(UpscalerKind::Mea2, norm)?),
        ("mea1", network(UpscalerKind::Mea1, norm)?),
        ("unet", network(UpscalerKind::Unet, norm)?),
    ] {
        times.push(benchmark_predictor(name, &p, &fol, k, cfg).map_err(err)?);
    }
    let inc: Vec<f64> = times.iter().map(|t| t.inclusive).collect();
    let speedup = fem_secs / inc[2];
    let ordered = inc.windows(2).all(|w| w[0] < w[1]);
    Ok(verdict(
        speedup >= 10.0 && ordered,
        format!(
            "FEM {:.1} ms, MEA-1 {:.1} ms end to end (speedup {speedup:.1}x, need >= 10x); \
             interp {:.2} / mea2 {:.1} / mea1 {:.1} / unet {:.1} ms{}",
            fem_secs * 1e3,
            inc[2] * 1e3,
            inc[0] * 1e3,
            inc[1] * 1e3,
            inc[2] * 1e3,
            inc[3] * 1e3,
            if ordered { "" } else { " (ordering violated)" }
        ),
    ))
}

fn network(kind: UpscalerKind, norm: MinMax) -> Result<Predictor, String> {
    warmed(kind, norm).map(Predictor::Network)
}

/// Untrained model after one training-mode pass, so that batch norm has
/// running statistics to evaluate with.
fn warmed(kind: UpscalerKind, norm: MinMax) -> Result<Upscaler<f32>, String> {
    let mut m = Upscaler::<f32>::build(UpscalerSpec::new(kind, 0), norm).map_err(err)?;
    let k = two_slab(101, 1.0, 0.1).map_err(err)?;
    let stack = build_stack(&k, "warm-up").map_err(err)?;
    let t11 = ScalarField::from_fn(11, |x, _| 1.0 - x).map_err(err)?;
    let inputs = Inputs::<f32>::from_fields(&[&t11; 2], &[&stack; 2], &norm).map_err(err)?;
    m.forward_train(&inputs).map_err(err)?;
    Ok(m)
}

/// Every artifact of a small fixed-seed pipeline, serialized.
#[derive(PartialEq)]
struct PipelineBytes {
    dataset: Vec<u8>,
    fol: Vec<u8>,
    mea2: Vec<u8>,
    report: String,
}

fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    ck.write_to(&mut out).map_err(err)?;
    Ok(out)
}

fn mini_pipeline(cases: &[TestCase]) -> Result<PipelineBytes, String> {
    let bc = BoundaryCondition::default();
    let sweep = SweepConfig {
        n_c: SweepRange::new(3.0, 3.0, 1.0),
        a_outer: SweepRange::new(0.20, 0.35, 0.05),
        b_outer: SweepRange::new(0.20, 0.20, 0.10),
        inner_fraction: SweepRange::new(0.0, 0.0, 0.2),
        theta: SweepRange::new(0.0, 0.5, 0.25),
        rng_seed: 9,
        ..SweepConfig::default()
    };
    let generated = generate_dataset(&sweep).map_err(err)?;
    let mut data = Dataset::from_generated(&generated)
        .and_then(|d| d.sample(10, 4))
        .map_err(err)?;
    data.label_fem(&bc).map_err(err)?;
    let hash = data.hash();
    let coarse: Vec<ScalarField> = data
        .conductivities()
        .map(|k| build_stack(k, "fol").map(|s| s.coarsest().clone()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let (fol, _) = train_fol(
        &coarse,
        &FolTrainConfig {
            epochs: 3,
            batch: 4,
            dataset_hash: hash.clone(),
            ..FolTrainConfig::default()
        },
    )
    .map_err(err)?;
    let fol_ck = fol.to_checkpoint(CheckpointMeta::default());
    let pairs: Vec<TrainingPair> = data.training_pairs(&fol).map_err(err)?;
    let norm = fit_norm(&pairs).map_err(err)?;
    let spec = UpscalerSpec::new(UpscalerKind::Mea2, 5);
    let mut mea2 = Upscaler::<f32>::build(spec, norm).map_err(err)?;
    let prepared = PreparedData::new(&pairs, &mea2).map_err(err)?;
    let out = train_prepared(
        &mut mea2,
        &prepared,
        &TrainConfig {
            epochs: 2,
            batch: 4,
            lr: 1e-4,
            seed: 5,
            dataset_hash: hash.clone(),
        },
    )
    .map_err(err)?;
    let best = best_model(spec, norm, &out.best)?;
    let models = vec![
        ("interp".to_string(), Predictor::Interp { order: 3 }),
        ("mea2".to_string(), Predictor::Network(best)),
    ];
    let meta = ReportMeta {
        seeds: vec![4, 5],
        dataset_hash: hash,
        coarse_solver: fol.name().to_string(),
        ..ReportMeta::default()
    };
    let report = evaluate_suite(&models, &fol, cases, None, meta).map_err(err)?;
    Ok(PipelineBytes {
        dataset: data.to_bytes(),
        fol: checkpoint_bytes(&fol_ck)?,
        mea2: checkpoint_bytes(&out.best)?,
        report: report.to_toml().map_err(err)? + &report.to_csv(),
    })
}

fn round_trips(run: &PipelineBytes) -> Result<Vec<String>, String> {
    let mut broken = Vec::new();
    // the format stores f32, so start from values it represents exactly
    let field =
        quantize(&ScalarField::from_fn(101, |x, y| (7.0 * x).sin() * y + 1.0 / 3.0).map_err(err)?);
    let mut a = Vec::new();
    field.write_meaf(&mut a).map_err(err)?;
    let back = ScalarField::read_meaf(a.as_slice()).map_err(err)?;
    let mut b = Vec::new();
    back.write_meaf(&mut b).map_err(err)?;
    let same_bits = back
        .values()
        .iter()
        .zip(field.values())
        .all(|(p, q)| p.to_bits() == q.to_bits());
    if a != b || !same_bits {
        broken.push("MEAF");
    }
    let ds = Dataset::read_from(&mut run.dataset.as_slice()).map_err(err)?;
    if ds.to_bytes() != run.dataset {
        broken.push("MEAD");
    }
    for bytes in [&run.fol, &run.mea2] {
        let ck = Checkpoint::read_from(&mut bytes.as_slice()).map_err(err)?;
        if &checkpoint_bytes(&ck)? != bytes {
            broken.push("MEAC");
        }
    }
    Ok(broken.into_iter().map(String::from).collect())
}

fn criterion_9() -> Check {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(err)?;
    pool.install(|| {
        let cases = test_cases(0.1, 1.0, &BoundaryCondition::default()).map_err(err)?;
        let first = mini_pipeline(&cases)?;
        let second = mini_pipeline(&cases)?;
        let mut differing = Vec::new();
        if first.dataset != second.dataset {
            differing.push("dataset");
        }
        if first.fol != second.fol || first.mea2 != second.mea2 {
            differing.push("checkpoints");
        }
        if first.report != second.report {
            differing.push("report");
        }
        let broken = round_trips(&first)?;
        Ok(verdict(
            differing.is_empty() && broken.is_empty(),
            format!(
                "rerun differences {differing:?}, round-trip failures {broken:?}, \
                 dataset {} bytes",
                first.dataset.len()
            ),
        ))
    })
}

fn main() {
    let mut full: Option<FullRun> = None;
    let results: Vec<(usize, &str, Check)> = vec![
        (1, "FEM analytic oracle", criterion_1()),
        (2, "energy minimality", criterion_2()),
        (3, "condensation exactness", criterion_3()),
        (4, "gradient verification", criterion_4()),
        (5, "architecture audit", criterion_5()),
        (6, "trend reproduction", criterion_6(&mut full)),
        (7, "sharp-interface property", criterion_7(full.as_ref())),
        (8, "performance", criterion_8()),
        (9, "determinism and persistence", criterion_9()),
    ];
    let mut failed = 0;
    for (i, name, check) in results {
        let line = match check {
            Ok(Outcome::Pass(d)) => format!("PASS ({d})"),
            Ok(Outcome::NotRun(d)) => format!("NOT RUN ({d})"),
            Ok(Outcome::Fail(d)) => {
                failed += 1;
                format!("FAIL ({d})")
            }
            Err(e) => {
                failed += 1;
                format!("FAIL (error: {e})")
            }
        };
        println!("criterion {i} {name}: {line}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
