use mea_core::dataset::{Dataset, Manifest};
use mea_core::fem::BoundaryCondition;
use mea_core::fol::FemCoarseSolver;
use mea_core::harness::{run_study, StudyKind};
use mea_core::microgen::{generate_dataset, SweepConfig, SweepRange};
use mea_core::models::{TrainConfig, UpscalerKind};
use mea_core::MeaError;

fn small_sweep() -> SweepConfig {
    SweepConfig {
        n_c: SweepRange::new(2.0, 3.0, 1.0),
        a_outer: SweepRange::new(0.20, 0.30, 0.05),
        b_outer: SweepRange::new(0.20, 0.20, 0.10),
        inner_fraction: SweepRange::new(0.0, 0.0, 0.2),
        theta: SweepRange::new(0.0, 0.5, 0.5),
        rng_seed: 3,
        ..SweepConfig::default()
    }
}

fn labeled(count: usize) -> Dataset {
    let generated = generate_dataset(&small_sweep()).unwrap();
    let mut data = Dataset::from_generated(&generated)
        .unwrap()
        .head(count)
        .unwrap();
    data.label_fem(&BoundaryCondition::default()).unwrap();
    data
}

#[test]
fn dataset_and_manifest_survive_disk() {
    let sweep = small_sweep();
    let generated = generate_dataset(&sweep).unwrap();
    assert_eq!(generated.samples.len() + generated.discarded, 12);
    let data = Dataset::from_generated(&generated).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.mead");
    data.save(&path).unwrap();
    let manifest = Manifest::describe(&data, Some(&sweep), generated.discarded);
    manifest.save(Manifest::path_for(&path)).unwrap();

    let back = Dataset::load(&path).unwrap();
    assert_eq!(back.to_bytes(), data.to_bytes());
    let m = Manifest::load(dir.path().join("set.toml")).unwrap();
    assert_eq!(m, manifest);
    assert_eq!(m.dataset_hash, back.hash());
    assert!(!m.labeled);
}

#[test]
fn unlabeled_data_cannot_make_training_pairs() {
    let generated = generate_dataset(&small_sweep()).unwrap();
    let data = Dataset::from_generated(&generated).unwrap();
    assert!(matches!(
        data.training_pairs(&FemCoarseSolver::default()),
        Err(MeaError::Precondition(_))
    ));
}

#[test]
fn studies_record_one_entry_per_value() {
    let pairs = labeled(10)
        .training_pairs(&FemCoarseSolver::default())
        .unwrap();
    let base = TrainConfig {
        epochs: 1,
        batch: 4,
        lr: 1e-3,
        seed: 1,
        dataset_hash: String::new(),
    };
    let concat = run_study(StudyKind::Concat, &pairs, &base, 1, Some(&[1, 4])).unwrap();
    assert_eq!(concat.entries.len(), 2);
    assert!(concat.entries.iter().all(|e| e.final_val().is_finite()));

    let size = run_study(StudyKind::Datasize, &pairs, &base, 1, Some(&[10])).unwrap();
    assert!(size.entry(UpscalerKind::Mea1, 10).is_some());
    assert!(size.entry(UpscalerKind::Unet, 10).is_some());

    let dir = tempfile::tempdir().unwrap();
    concat.write(dir.path()).unwrap();
    let summary = std::fs::read_to_string(dir.path().join("study_concat.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(dir.path().join("study_concat_mea1_4.csv").exists());

    assert!(matches!(
        run_study(StudyKind::Datasize, &pairs, &base, 1, Some(&[11])),
        Err(MeaError::Config(_))
    ));
}
