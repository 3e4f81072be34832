use std::path::Path;
use std::process::{Command, Output};

use mea_core::dataset::{Dataset, Manifest};
use mea_core::microgen::two_slab;
use mea_core::ScalarField;

fn mea(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mea"))
        .args(args)
        .env("MEA_DATA_DIR", dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn single_field_tools() {
    let dir = tempfile::tempdir().unwrap();
    let k = dir.path().join("k.meaf");
    two_slab(101, 1.0, 0.1).unwrap().save(&k).unwrap();

    let t = dir.path().join("t.meaf");
    ok(&mea(dir.path(), &["fem", "--field", s(&k), "--out", s(&t)]));
    let temp = ScalarField::load(&t).unwrap();
    assert_eq!(temp.n(), 101);
    assert!(temp.min() >= -1e-6 && temp.max() <= 1.0 + 1e-6);

    let c = dir.path().join("k11.meaf");
    ok(&mea(
        dir.path(),
        &["condense", "--in", s(&k), "--window", "10", "--out", s(&c)],
    ));
    assert_eq!(ScalarField::load(&c).unwrap().n(), 11);

    let img = dir.path().join("t.ppm");
    ok(&mea(
        dir.path(),
        &["plot", "--field", s(&t), "--out", s(&img)],
    ));
    let bytes = std::fs::read(&img).unwrap();
    assert!(bytes.starts_with(b"P6\n101 101\n255\n"));
    assert_eq!(bytes.len(), 15 + 3 * 101 * 101);

    let csv = ok(&mea(
        dir.path(),
        &[
            "cross-section",
            "--field",
            s(&t),
            "--axis",
            "row",
            "--index",
            "50",
        ],
    ));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "position,value");
    assert_eq!(lines.len(), 102);
    let first: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert!((first - 1.0).abs() < 1e-6);
}

#[test]
fn errors_exit_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.meaf");
    let out = mea(
        dir.path(),
        &["plot", "--field", s(&missing), "--out", "x.ppm"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let k = dir.path().join("k.meaf");
    two_slab(101, 1.0, 0.1).unwrap().save(&k).unwrap();
    let out = mea(
        dir.path(),
        &["cross-section", "--field", s(&k), "--index", "101"],
    );
    assert_eq!(out.status.code(), Some(1));

    let out = mea(dir.path(), &["train", "--model", "interp"]);
    assert_eq!(out.status.code(), Some(1));

    // argument errors come from the parser
    assert_eq!(mea(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn interpolation_benchmark_reports_a_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&mea(
        dir.path(),
        &[
            "bench",
            "--model",
            "interp",
            "--fol",
            "fem",
            "--repeats",
            "2",
            "--warmup",
            "0",
        ],
    ));
    assert!(out.contains("speedup"), "{out}");
}

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("dataset.mead");
    let gen = ok(&mea(
        d,
        &["--seed", "3", "gen", "--samples", "6", "--label"],
    ));
    assert!(!gen.is_empty());
    let ds = Dataset::load(&data).unwrap();
    assert_eq!(ds.len(), 6);
    assert!(ds.is_labeled());
    assert_eq!(
        Manifest::load(d.join("dataset.toml")).unwrap().dataset_hash,
        ds.hash()
    );

    ok(&mea(d, &["train-fol", "--epochs", "2", "--batch", "2"]));
    assert!(d.join("fol.meac").exists());

    let ck = d.join("mea2.meac");
    ok(&mea(
        d,
        &[
            "train",
            "--model",
            "mea2",
            "--epochs",
            "1",
            "--batch",
            "2",
            "--out",
            s(&ck),
        ],
    ));
    assert!(ck.exists());

    let reports = d.join("reports");
    let spec = format!("mea2={}", s(&ck));
    ok(&mea(
        d,
        &["eval", "--model", &spec, "--out-dir", s(&reports)],
    ));
    let csv = std::fs::read_to_string(reports.join("eval_report.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("model,test_case,mae,flux_mae"));
    // interpolation baseline plus the trained model, six cases each
    assert_eq!(csv.lines().count(), 1 + 12);
}
