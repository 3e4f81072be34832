//! Supervised training of the upscalers with MSE loss and Adam.

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MeaError, Result};
use crate::field::FINE_N;
use crate::nn::{adam_step, mse_loss, AdamConfig, Checkpoint, CheckpointMeta, Tensor4};
use crate::split::{batches, train_val_split, VALIDATION_FRACTION};

use super::{Inputs, TrainingPair, Upscaler};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Seeds the train/validation split and the batch order.
    pub seed: u64,
    pub dataset_hash: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch: 50,
            lr: 1e-4,
            seed: 0,
            dataset_hash: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
}

impl LossHistory {
    pub fn final_val(&self) -> Option<f64> {
        self.val.last().copied()
    }

    /// `epoch,train_mse,val_mse` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse\n");
        for (i, (t, v)) in self.train.iter().zip(&self.val).enumerate() {
            s.push_str(&format!("{},{t:e},{v:e}\n", i + 1));
        }
        s
    }
}

pub struct TrainOutcome {
    pub history: LossHistory,
    pub best_epoch: usize,
    /// Parameters at the epoch with the lowest validation loss.
    pub best: Checkpoint,
}

/// Converted network inputs and targets for a whole dataset.
pub struct PreparedData {
    pub inputs: Inputs<f32>,
    pub targets: Tensor4<f32>,
}

impl PreparedData {
    pub fn new(pairs: &[TrainingPair], model: &Upscaler<f32>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(MeaError::Precondition("no training pairs".into()));
        }
        let t11: Vec<_> = pairs.iter().map(|p| &p.t11).collect();
        let stacks: Vec<_> = pairs.iter().map(|p| &p.stack).collect();
        let inputs = Inputs::from_fields(&t11, &stacks, &model.norm)?;
        let mut data = Vec::with_capacity(pairs.len() * FINE_N * FINE_N);
        for p in pairs {
            if p.target.n() != FINE_N {
                return Err(MeaError::invalid("training targets must be 101x101"));
            }
            data.extend(p.target.values().iter().map(|&v| v as f32));
        }
        Ok(Self {
            inputs,
            targets: Tensor4::from_vec([pairs.len(), 1, FINE_N, FINE_N], data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean squared error of eval-mode predictions over `idx`.
pub fn evaluate_mse(model: &Upscaler<f32>, data: &PreparedData, idx: &[usize]) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in idx.chunks(50) {
        let y = model.forward_eval(&data.inputs.select(chunk))?;
        let t = data.targets.select(chunk);
        sum += mse_loss(&y, &t)?.0 * y.len() as f64;
    }
    Ok(sum / (idx.len() * FINE_N * FINE_N) as f64)
}

pub fn train_upscaler(
    model: &mut Upscaler<f32>,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let data = PreparedData::new(pairs, model)?;
    train_prepared(model, &data, cfg)
}

/// Trains in place on a seeded 80/20 split; the model ends at its final
/// epoch, the outcome carries the best-validation checkpoint.
pub fn train_prepared(
    model: &mut Upscaler<f32>,
    data: &PreparedData,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !model.kind().is_trainable() {
        return Err(MeaError::invalid(format!(
            "{} is not trainable",
            model.kind()
        )));
    }
    if cfg.epochs == 0 || cfg.batch == 0 {
        return Err(MeaError::Config(
            "epochs and batch size must be positive".into(),
        ));
    }
    let (train_idx, val_idx) = train_val_split(data.len(), VALIDATION_FRACTION, cfg.seed)?;
    if cfg.batch > train_idx.len() {
        return Err(MeaError::Config(format!(
            "batch size {} exceeds the {} training samples",
            cfg.batch,
            train_idx.len()
        )));
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let meta = |epoch: usize| CheckpointMeta {
        epoch: epoch as u64,
        lr: cfg.lr,
        seed: cfg.seed,
        dataset_hash: cfg.dataset_hash.clone(),
        extra: Default::default(),
    };
    let mut history = LossHistory::default();
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut last_good: Option<Checkpoint> = None;
    let kind = model.kind();
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for batch in batches(&train_idx, cfg.batch, &mut rng) {
            let x = data.inputs.select(&batch);
            let t = data.targets.select(&batch);
            let step = model.forward_train(&x).and_then(|y| mse_loss(&y, &t));
            let (loss, dy) = match step {
                Ok(v) if v.0.is_finite() => v,
                Ok(_) | Err(MeaError::NumericalFailure { .. }) => {
                    return Err(MeaError::TrainingFailure {
                        epoch,
                        reason: format!("non-finite {kind} training loss"),
                        last_good: last_good.map(Box::new),
                    })
                }
                Err(e) => return Err(e),
            };
            let mut grads = model.store.zero_grads();
            model.backward(dy, &mut grads)?;
            adam_step(&mut model.store, &grads, &adam)?;
            sum += loss * batch.len() as f64;
        }
        let train_loss = sum / train_idx.len() as f64;
        let val_loss = match evaluate_mse(model, data, &val_idx) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(MeaError::NumericalFailure { .. }) => {
                return Err(MeaError::TrainingFailure {
                    epoch,
                    reason: format!("non-finite {kind} validation loss"),
                    last_good: last_good.map(Box::new),
                })
            }
            Err(e) => return Err(e),
        };
        history.train.push(train_loss);
        history.val.push(val_loss);
        let ck = model.to_checkpoint(meta(epoch));
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, ck.clone()));
        }
        last_good = Some(ck);
        if epoch == 1 || epoch % 10 == 0 || epoch == cfg.epochs {
            info!("{kind} epoch {epoch}: train mse {train_loss:.3e}, val mse {val_loss:.3e}");
        } else {
            debug!("{kind} epoch {epoch}: train mse {train_loss:.3e}, val mse {val_loss:.3e}");
        }
    }
    let (best_epoch, _, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best,
    })
}

/// Conductivity normalization fitted on the fine fields of `pairs`.
pub fn fit_norm(pairs: &[TrainingPair]) -> Result<crate::field::MinMax> {
    crate::field::MinMax::fit(pairs.iter().map(|p| p.stack.fine()))
}
