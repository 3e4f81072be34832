//! Hyperparameter and data-size sweeps over the supervised upscalers.

use std::path::Path;

use log::info;

use crate::error::{MeaError, Result};
use crate::models::{
    fit_norm, train_prepared, LossHistory, PreparedData, TrainConfig, TrainingPair, Upscaler,
    UpscalerKind, UpscalerSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    /// MEA-1 with concatenation strategies 1 to 4.
    Concat,
    /// MEA-1 (strategy 4) at several batch sizes.
    Batch,
    /// MEA-1 and U-Net trained on growing prefixes of the data.
    Datasize,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            StudyKind::Concat => "concat",
            StudyKind::Batch => "batch",
            StudyKind::Datasize => "datasize",
        }
    }

    pub fn default_values(self) -> Vec<usize> {
        match self {
            StudyKind::Concat => vec![1, 2, 3, 4],
            StudyKind::Batch => vec![25, 50, 100, 200],
            StudyKind::Datasize => vec![500, 1000, 2000, 4000],
        }
    }
}

impl std::str::FromStr for StudyKind {
    type Err = MeaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(StudyKind::Concat),
            "batch" => Ok(StudyKind::Batch),
            "datasize" => Ok(StudyKind::Datasize),
            _ => Err(MeaError::invalid(format!("unknown study {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyEntry {
    pub model: UpscalerKind,
    pub value: usize,
    pub history: LossHistory,
}

impl StudyEntry {
    pub fn final_val(&self) -> f64 {
        self.history.final_val().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub kind: StudyKind,
    pub entries: Vec<StudyEntry>,
}

impl StudyResult {
    pub fn entry(&self, model: UpscalerKind, value: usize) -> Option<&StudyEntry> {
        self.entries
            .iter()
            .find(|e| e.model == model && e.value == value)
    }

    /// `model,value,final_val_mse` rows.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("model,value,final_val_mse\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{:e}\n", e.model, e.value, e.final_val()));
        }
        s
    }

    /// One `study_<kind>_<model>_<value>.csv` loss curve per entry plus
    /// `study_<kind>.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let k = self.kind.name();
        for e in &self.entries {
            std::fs::write(
                dir.join(format!("study_{k}_{}_{}.csv", e.model, e.value)),
                e.history.to_csv(),
            )?;
        }
        std::fs::write(dir.join(format!("study_{k}.csv")), self.summary_csv())?;
        Ok(())
    }
}

/// Trains one model per study value with `base` (its batch size is replaced
/// in the batch study). `values` defaults to [`StudyKind::default_values`].
pub fn run_study(
    kind: StudyKind,
    pairs: &[TrainingPair],
    base: &TrainConfig,
    model_seed: u64,
    values: Option<&[usize]>,
) -> Result<StudyResult> {
    let values = values.map_or_else(|| kind.default_values(), <[usize]>::to_vec);
    if values.is_empty() {
        return Err(MeaError::Config("study needs at least one value".into()));
    }
    if kind == StudyKind::Datasize {
        if let Some(&v) = values.iter().find(|&&v| v > pairs.len()) {
            return Err(MeaError::Config(format!(
                "data-size study needs {v} samples, only {} available",
                pairs.len()
            )));
        }
    }
    let norm = fit_norm(pairs)?;
    let mea1 = UpscalerSpec::new(UpscalerKind::Mea1, model_seed);
    let data = PreparedData::new(pairs, &Upscaler::<f32>::build(mea1, norm)?)?;
    let mut entries = Vec::new();
    let mut run = |spec: UpscalerSpec, value: usize, data: &PreparedData, cfg: &TrainConfig| {
        info!("study {}: {} at {value}", kind.name(), spec.kind);
        let mut model = Upscaler::<f32>::build(spec, norm)?;
        let out = train_prepared(&mut model, data, cfg)?;
        entries.push(StudyEntry {
            model: spec.kind,
            value,
            history: out.history,
        });
        Ok::<_, MeaError>(())
    };
    for &v in &values {
        match kind {
            StudyKind::Concat => {
                let strategy = u8::try_from(v)
                    .map_err(|_| MeaError::Config(format!("bad concat strategy {v}")))?;
                run(mea1.with_concat(strategy), v, &data, base)?;
            }
            StudyKind::Batch => {
                let cfg = TrainConfig {
                    batch: v,
                    ..base.clone()
                };
                run(mea1, v, &data, &cfg)?;
            }
            StudyKind::Datasize => {
                let idx: Vec<usize> = (0..v).collect();
                let subset = PreparedData {
                    inputs: data.inputs.select(&idx),
                    targets: data.targets.select(&idx),
                };
                run(mea1, v, &subset, base)?;
                run(
                    UpscalerSpec::new(UpscalerKind::Unet, model_seed),
                    v,
                    &subset,
                    base,
                )?;
            }
        }
    }
    Ok(StudyResult { kind, entries })
}
