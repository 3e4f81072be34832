//! `mea` command line: data generation, FEM labelling, training, evaluation,
//! timing, studies and plots.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use mea_core::dataset::{Dataset, Manifest};
use mea_core::fem::{self, BoundaryCondition};
use mea_core::field::{build_stack, condense_max, ScalarField};
use mea_core::fol::{train_fol, CoarseSolver, FemCoarseSolver, FolModel, FOL_KIND};
use mea_core::harness::config::{default_data_dir, DATA_DIR_ENV};
use mea_core::harness::{
    benchmark_fem, benchmark_predictor, cross_section, evaluate_suite, render_error_map,
    render_heatmap, run_study, test_cases, Axis, BenchConfig, CoarseSource, PipelineConfig,
    Predictor, ReportMeta, StudyKind,
};
use mea_core::microgen::{generate_dataset, SweepConfig};
use mea_core::models::{fit_norm, train_upscaler, Upscaler, UpscalerKind, UpscalerSpec};
use mea_core::nn::Checkpoint;

#[derive(Parser, Debug)]
#[command(
    name = "mea",
    version,
    about = "Multi-fidelity heat conduction upscaling"
)]
struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for generation, labelling and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded, bitwise reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Configuration file with [data], [fol], [train] and [eval] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Full-size defaults: 5670 samples and 500 epochs.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Default artifact directory.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training microstructures as a MEAD dataset.
    Gen(GenArgs),
    /// Max-pool a MEAF conductivity field.
    Condense(CondenseArgs),
    /// Solve the fine FEM problem for a dataset or a single field.
    Fem(FemArgs),
    /// Train the coarse operator network on the energy loss.
    TrainFol(TrainFolArgs),
    /// Train an upscaler on FEM-labelled data.
    Train(TrainArgs),
    /// Score upscalers on the six test microstructures.
    Eval(EvalArgs),
    /// Time single-case inference against one fine FEM solve.
    Bench(BenchArgs),
    /// Run a concat, batch or data-size study.
    Study(StudyArgs),
    /// Render a MEAF field (or its error against a reference) as PPM.
    Plot(PlotArgs),
    /// Print one row or column of a MEAF field as CSV.
    CrossSection(CrossSectionArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Samples kept (seeded random subset); defaults to the configuration.
    #[arg(long)]
    samples: Option<usize>,
    /// Keep every generated sample.
    #[arg(long, conflicts_with = "samples")]
    all: bool,
    #[arg(long)]
    k_in: Option<f64>,
    #[arg(long)]
    k_out: Option<f64>,
    /// Also solve and store the FEM temperatures.
    #[arg(long)]
    label: bool,
}

#[derive(Args, Debug)]
struct CondenseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Single pooling window; without it every stack level is written.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FemArgs {
    /// MEAD dataset to label.
    #[arg(long = "in", required_unless_present = "field")]
    input: Option<PathBuf>,
    /// Single MEAF conductivity field.
    #[arg(long, conflicts_with = "input")]
    field: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Report per-solve wall-clock.
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
struct TrainFolArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    model: UpscalerKind,
    #[arg(long)]
    data: Option<PathBuf>,
    /// FOL checkpoint, or `fem` for coarse FEM solutions.
    #[arg(long)]
    fol: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    concat: Option<u8>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// `name=checkpoint` pairs; the interpolation baseline is always added.
    #[arg(long = "model", value_parser = parse_named)]
    models: Vec<(String, PathBuf)>,
    #[arg(long)]
    fol: Option<String>,
    #[arg(long)]
    interp_order: Option<u8>,
    /// Also benchmark every model on the first test case.
    #[arg(long)]
    timing: bool,
    /// Writes predicted fields and error maps for every case.
    #[arg(long)]
    plots: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Upscaler checkpoint, or `interp`.
    #[arg(long)]
    model: String,
    #[arg(long)]
    fol: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Test case index used as input.
    #[arg(long, default_value_t = 0)]
    case: usize,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[arg(long)]
    kind: StudyKind,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    fol: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Comma-separated study values (strategies, batch sizes or sizes).
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<usize>>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    field: PathBuf,
    /// Reference field; renders |field - truth| instead.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CrossSectionArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long, default_value = "row")]
    axis: Axis,
    #[arg(long)]
    index: usize,
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(format!("expected name=path, got {s:?}")),
    }
}

struct Ctx {
    cfg: PipelineConfig,
    dir: PathBuf,
    seeds: Vec<u64>,
}

impl Ctx {
    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.dir.join(default))
    }

    fn coarse(&self, spec: &Option<String>) -> Result<Box<dyn CoarseSolver>> {
        let spec = spec.clone().unwrap_or_else(|| match self.cfg.train.coarse {
            CoarseSource::Fem => "fem".into(),
            CoarseSource::Fol => self.dir.join("fol.meac").display().to_string(),
        });
        if spec == "fem" {
            return Ok(Box::new(FemCoarseSolver::default()));
        }
        let ck =
            Checkpoint::load(&spec).with_context(|| format!("loading FOL checkpoint {spec}"))?;
        Ok(Box::new(FolModel::from_checkpoint(&ck)?))
    }
}

fn load_upscaler(path: &Path) -> Result<Upscaler<f32>> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if ck.kind == FOL_KIND {
        bail!(
            "{} is a coarse operator checkpoint, not an upscaler",
            path.display()
        );
    }
    Ok(Upscaler::from_checkpoint(&ck)?)
}

fn load_labeled(path: &Path) -> Result<Dataset> {
    let d = Dataset::load(path).with_context(|| format!("loading {}", path.display()))?;
    if !d.is_labeled() {
        bail!(
            "{} has no FEM temperatures; run `mea fem` first",
            path.display()
        );
    }
    Ok(d)
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = if cli.deterministic {
        Some(1)
    } else {
        cli.threads
    };
    if let Some(t) = threads {
        if t == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut cfg = match (&cli.config, cli.paper_scale) {
        (Some(p), _) => {
            PipelineConfig::load(p).with_context(|| format!("reading {}", p.display()))?
        }
        (None, true) => PipelineConfig::paper_scale(),
        (None, false) => PipelineConfig::default(),
    };
    if cli.config.is_some() && cli.paper_scale {
        let p = PipelineConfig::paper_scale();
        cfg.data.samples = p.data.samples;
        cfg.train.epochs = p.train.epochs;
    }
    if let Some(s) = cli.seed {
        cfg.data.seed = s;
        cfg.fol.seed = s;
        cfg.train.seed = s;
    }
    let dir = cli.data_dir.clone().unwrap_or_else(default_data_dir);
    let seeds = vec![cfg.data.seed, cfg.fol.seed, cfg.train.seed];
    let mut ctx = Ctx { cfg, dir, seeds };
    match cli.command {
        Command::Gen(a) => cmd_gen(&mut ctx, a),
        Command::Condense(a) => cmd_condense(a),
        Command::Fem(a) => cmd_fem(a),
        Command::TrainFol(a) => cmd_train_fol(&mut ctx, a),
        Command::Train(a) => cmd_train(&mut ctx, a),
        Command::Eval(a) => cmd_eval(&mut ctx, a),
        Command::Bench(a) => cmd_bench(&mut ctx, a),
        Command::Study(a) => cmd_study(&mut ctx, a),
        Command::Plot(a) => cmd_plot(a),
        Command::CrossSection(a) => cmd_cross_section(a),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn cmd_gen(ctx: &mut Ctx, a: GenArgs) -> Result<()> {
    let sweep = SweepConfig {
        k_in: a.k_in.unwrap_or(ctx.cfg.data.k_in),
        k_out: a.k_out.unwrap_or(ctx.cfg.data.k_out),
        rng_seed: ctx.cfg.data.seed,
        ..SweepConfig::default()
    };
    let generated = generate_dataset(&sweep)?;
    let full = Dataset::from_generated(&generated)?;
    let count = if a.all {
        full.len()
    } else {
        a.samples.unwrap_or(ctx.cfg.data.samples)
    };
    let mut data = full.sample(count, ctx.cfg.data.seed)?;
    if a.label {
        let stats = data.label_fem(&BoundaryCondition::default())?;
        info!(
            "labelled {} samples in {:.1} s ({:.1} ms per solve)",
            stats.solves,
            stats.total_seconds,
            stats.mean_solve_seconds * 1e3
        );
    }
    let out = ctx.path(&a.out, "dataset.mead");
    ensure_parent(&out)?;
    data.save(&out)?;
    let manifest = Manifest::describe(&data, Some(&sweep), generated.discarded);
    manifest.save(Manifest::path_for(&out))?;
    println!(
        "wrote {} samples ({} generated, {} discarded) to {} [{}]",
        data.len(),
        generated.samples.len(),
        generated.discarded,
        out.display(),
        manifest.dataset_hash
    );
    Ok(())
}

fn cmd_condense(a: CondenseArgs) -> Result<()> {
    let field =
        ScalarField::load(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    if let Some(w) = a.window {
        let out = condense_max(&field, w)?;
        ensure_parent(&a.out)?;
        out.save(&a.out)?;
        println!(
            "{} -> {} ({}x{})",
            field.n(),
            a.out.display(),
            out.n(),
            out.n()
        );
        return Ok(());
    }
    let stack = build_stack(&field, a.input.display().to_string())?;
    std::fs::create_dir_all(&a.out)?;
    let stem = a
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "field".into());
    for (n, level) in stack.levels().skip(1) {
        let p = a.out.join(format!("{stem}_{n}.meaf"));
        level.save(&p)?;
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_fem(a: FemArgs) -> Result<()> {
    let bc = BoundaryCondition::default();
    ensure_parent(&a.out)?;
    if let Some(f) = &a.field {
        let k = ScalarField::load(f).with_context(|| format!("loading {}", f.display()))?;
        let t0 = std::time::Instant::now();
        let (t, stats) = fem::assemble(&k, &bc)?.solve()?;
        let secs = t0.elapsed().as_secs_f64();
        t.save(&a.out)?;
        println!(
            "solved {}x{} in {} CG iterations (residual {:.2e})",
            k.n(),
            k.n(),
            stats.iterations,
            stats.relative_residual
        );
        if a.timing {
            println!("solve_seconds,{secs:.6}");
        }
        return Ok(());
    }
    let input = a.input.expect("clap requires --in or --field");
    let mut data = Dataset::load(&input).with_context(|| format!("loading {}", input.display()))?;
    let stats = data.label_fem(&bc)?;
    data.save(&a.out)?;
    let manifest_in = Manifest::load(Manifest::path_for(&input)).ok();
    let manifest = Manifest::describe(
        &data,
        manifest_in.as_ref().and_then(|m| m.sweep.as_ref()),
        manifest_in.as_ref().map_or(0, |m| m.discarded),
    );
    manifest.save(Manifest::path_for(&a.out))?;
    println!(
        "labelled {} samples -> {} [{}]",
        stats.solves,
        a.out.display(),
        manifest.dataset_hash
    );
    if a.timing {
        println!(
            "mean_solve_seconds,{:.6}\ntotal_seconds,{:.3}\nmax_cg_iterations,{}",
            stats.mean_solve_seconds, stats.total_seconds, stats.max_iterations
        );
    }
    Ok(())
}

fn cmd_train_fol(ctx: &mut Ctx, a: TrainFolArgs) -> Result<()> {
    let path = ctx.path(&a.data, "dataset.mead");
    let data = Dataset::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let mut cfg = ctx.cfg.fol_config(&data.hash());
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch = a.batch.unwrap_or(cfg.batch);
    let coarse: Vec<ScalarField> = data
        .conductivities()
        .map(|k| build_stack(k, "fol").map(|s| s.coarsest().clone()))
        .collect::<mea_core::Result<_>>()?;
    let (model, history) = train_fol(&coarse, &cfg)?;
    let out = ctx.path(&a.out, "fol.meac");
    ensure_parent(&out)?;
    model
        .to_checkpoint(mea_core::nn::CheckpointMeta {
            epoch: cfg.epochs as u64,
            lr: cfg.lr,
            seed: cfg.seed,
            dataset_hash: cfg.dataset_hash.clone(),
            extra: Default::default(),
        })
        .save(&out)?;
    let mut csv = String::from("epoch,train_energy,val_energy\n");
    for (i, (t, v)) in history.train_loss.iter().zip(&history.val_loss).enumerate() {
        csv.push_str(&format!("{},{t:e},{v:e}\n", i + 1));
    }
    std::fs::write(out.with_extension("loss.csv"), csv)?;
    println!(
        "trained FOL for {} epochs, final validation energy {:.6e} -> {}",
        cfg.epochs,
        history.val_loss.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_train(ctx: &mut Ctx, a: TrainArgs) -> Result<()> {
    if !a.model.is_trainable() {
        bail!("{} has nothing to train", a.model);
    }
    let path = ctx.path(&a.data, "dataset.mead");
    let data = load_labeled(&path)?;
    let solver = ctx.coarse(&a.fol)?;
    let pairs = data.training_pairs(solver.as_ref())?;
    let mut cfg = ctx.cfg.train_config(a.model, &data.hash());
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch = a.batch.unwrap_or(cfg.batch);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    let concat = a.concat.unwrap_or(ctx.cfg.train.concat);
    let spec = UpscalerSpec::new(a.model, cfg.seed).with_concat(concat);
    let mut model = Upscaler::<f32>::build(spec, fit_norm(&pairs)?)?;
    let outcome = train_upscaler(&mut model, &pairs, &cfg)?;
    let out = ctx.path(&a.out, &format!("{}.meac", a.model));
    ensure_parent(&out)?;
    outcome.best.save(&out)?;
    std::fs::write(out.with_extension("loss.csv"), outcome.history.to_csv())?;
    println!(
        "{}: best validation MSE {:.4e} at epoch {} -> {}",
        a.model,
        outcome.history.val[outcome.best_epoch - 1],
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

fn cmd_eval(ctx: &mut Ctx, a: EvalArgs) -> Result<()> {
    let order = a.interp_order.unwrap_or(ctx.cfg.eval.interp_order);
    let mut models = vec![("interp".to_string(), Predictor::Interp { order })];
    for (name, path) in &a.models {
        models.push((name.clone(), Predictor::Network(load_upscaler(path)?)));
    }
    let solver = ctx.coarse(&a.fol)?;
    let bc = BoundaryCondition::default();
    let cases = test_cases(ctx.cfg.data.k_in, ctx.cfg.data.k_out, &bc)?;
    let timing = a.timing.then_some(BenchConfig {
        warmup: ctx.cfg.eval.warmup,
        repeats: ctx.cfg.eval.repeats,
    });
    let mut config = std::collections::BTreeMap::new();
    config.insert("interp_order".into(), order.to_string());
    for (name, path) in &a.models {
        config.insert(format!("checkpoint.{name}"), path.display().to_string());
    }
    let meta = ReportMeta {
        seeds: ctx.seeds.clone(),
        dataset_hash: String::new(),
        coarse_solver: solver.name().to_string(),
        config,
    };
    let report = evaluate_suite(&models, solver.as_ref(), &cases, timing, meta)?;
    let out = ctx.path(&a.out_dir, "eval");
    report.write(&out)?;
    if a.plots {
        for c in &cases {
            let truth = c.truth.as_ref().expect("test cases carry FEM truth");
            render_heatmap(truth, out.join(format!("{}_fem.ppm", c.name)))?;
            for (name, m) in &models {
                let pred = m.predict(solver.as_ref(), &c.k)?;
                render_heatmap(&pred, out.join(format!("{}_{name}.ppm", c.name)))?;
                render_error_map(
                    &pred,
                    truth,
                    out.join(format!("{}_{name}_error.ppm", c.name)),
                )?;
            }
        }
    }
    print!("{}", report.summary_csv());
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_bench(ctx: &mut Ctx, a: BenchArgs) -> Result<()> {
    let model = if a.model == "interp" {
        Predictor::Interp {
            order: ctx.cfg.eval.interp_order,
        }
    } else {
        Predictor::Network(load_upscaler(Path::new(&a.model))?)
    };
    let cfg = BenchConfig {
        warmup: a.warmup.unwrap_or(ctx.cfg.eval.warmup),
        repeats: a.repeats.unwrap_or(ctx.cfg.eval.repeats),
    };
    let solver = ctx.coarse(&a.fol)?;
    let bc = BoundaryCondition::default();
    let cases = test_cases(ctx.cfg.data.k_in, ctx.cfg.data.k_out, &bc)?;
    let case = cases
        .get(a.case)
        .with_context(|| format!("test case index {} out of range", a.case))?;
    let t = benchmark_predictor(
        &model.kind().to_string(),
        &model,
        solver.as_ref(),
        &case.k,
        cfg,
    )?;
    let fem_s = benchmark_fem(&case.k, &bc, cfg)?;
    println!("model,inclusive_seconds,exclusive_seconds,fem_seconds,speedup");
    println!(
        "{},{:.6e},{:.6e},{:.6e},{:.2}",
        t.name,
        t.inclusive,
        t.exclusive,
        fem_s,
        fem_s / t.inclusive
    );
    Ok(())
}

fn cmd_study(ctx: &mut Ctx, a: StudyArgs) -> Result<()> {
    let path = ctx.path(&a.data, "dataset.mead");
    let data = load_labeled(&path)?;
    let solver = ctx.coarse(&a.fol)?;
    let pairs = data.training_pairs(solver.as_ref())?;
    let mut base = ctx.cfg.train_config(UpscalerKind::Mea1, &data.hash());
    base.epochs = a.epochs.unwrap_or(base.epochs);
    base.batch = a.batch.unwrap_or(base.batch);
    let result = run_study(
        a.kind,
        &pairs,
        &base,
        ctx.cfg.train.seed,
        a.values.as_deref(),
    )?;
    let out = ctx.path(&a.out_dir, "study");
    result.write(&out)?;
    print!("{}", result.summary_csv());
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let field =
        ScalarField::load(&a.field).with_context(|| format!("loading {}", a.field.display()))?;
    ensure_parent(&a.out)?;
    match &a.truth {
        Some(t) => {
            let truth = ScalarField::load(t).with_context(|| format!("loading {}", t.display()))?;
            render_error_map(&field, &truth, &a.out)?;
        }
        None => render_heatmap(&field, &a.out)?,
    }
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_cross_section(a: CrossSectionArgs) -> Result<()> {
    let field =
        ScalarField::load(&a.field).with_context(|| format!("loading {}", a.field.display()))?;
    let line = cross_section(&field, a.axis, a.index)?;
    let h = field.spacing();
    println!("position,value");
    for (i, v) in line.iter().enumerate() {
        println!("{},{v}", i as f64 * h);
    }
    Ok(())
}
