//! Finite operator learning on the coarse grid: a dense network maps an
//! 11×11 conductivity field to the free nodal temperatures and is trained by
//! minimizing the discrete energy of its prediction, without labels.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MeaError, Result};
use crate::fem::{self, BoundaryCondition, CsrMatrix};
use crate::field::{MinMax, ScalarField, COARSE_N};
use crate::nn::{
    adam_step, Activation, AdamConfig, Checkpoint, CheckpointMeta, Dense, Layer, ParamStore,
    Sequential, Tensor4,
};
use crate::split::{batches, train_val_split, VALIDATION_FRACTION};

pub const FOL_KIND: &str = "fol-v1";
pub const FOL_HIDDEN: [usize; 2] = [256, 256];

/// Nodes left free by the left/right Dirichlet columns.
pub fn free_node_count(n: usize) -> usize {
    n * n - 2 * n
}

/// Full field from the interior-column values, row by row.
pub fn assemble_full_field(
    free_values: &[f64],
    n: usize,
    bc: &BoundaryCondition,
) -> Result<ScalarField> {
    if n < 3 {
        return Err(MeaError::invalid(format!(
            "grid side must be >= 3, got {n}"
        )));
    }
    if free_values.len() != free_node_count(n) {
        return Err(MeaError::invalid(format!(
            "expected {} free values, got {}",
            free_node_count(n),
            free_values.len()
        )));
    }
    let mut values = Vec::with_capacity(n * n);
    for row in free_values.chunks(n - 2) {
        values.push(bc.left_t);
        values.extend_from_slice(row);
        values.push(bc.right_t);
    }
    ScalarField::new(n, values)
}

/// Inverse of [`assemble_full_field`] on the free nodes.
pub fn extract_free(field: &ScalarField) -> Vec<f64> {
    let n = field.n();
    field
        .values()
        .chunks(n)
        .flat_map(|row| row[1..n - 1].iter().copied())
        .collect()
}

/// Mean discrete energy of the predicted fields against their conductivities.
pub fn fol_loss(k_batch: &[ScalarField], t_batch: &[ScalarField]) -> Result<f64> {
    if k_batch.len() != t_batch.len() || k_batch.is_empty() {
        return Err(MeaError::invalid(
            "conductivity and temperature batches must be equal and non-empty",
        ));
    }
    let mut total = 0.0;
    for (k, t) in k_batch.iter().zip(t_batch) {
        if k.n() != t.n() {
            return Err(MeaError::invalid(format!(
                "resolution mismatch {} vs {}",
                k.n(),
                t.n()
            )));
        }
        total += fem::discrete_energy(t, k)?;
    }
    Ok(total / k_batch.len() as f64)
}

/// Stiffness of one training field, assembled once and reused every epoch.
struct EnergyOperator {
    stiffness: CsrMatrix,
}

impl EnergyOperator {
    fn new(k: &ScalarField) -> Result<Self> {
        Ok(Self {
            stiffness: fem::assemble(k, &BoundaryCondition::default())?.stiffness,
        })
    }

    /// `(½ TᵀKT, KT)`.
    fn energy_and_gradient(&self, t: &[f64], kt: &mut [f64]) -> f64 {
        self.stiffness.matvec(t, kt);
        0.5 * t.iter().zip(kt.iter()).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Anything that produces the coarse 11×11 temperature from the coarse
/// conductivity.
pub trait CoarseSolver: Send + Sync {
    fn name(&self) -> &str;
    fn solve_coarse(&self, k11: &ScalarField) -> Result<ScalarField>;
}

/// Direct finite element solve on the coarse grid.
#[derive(Debug, Clone, Copy, Default)]
pub struct FemCoarseSolver {
    pub bc: BoundaryCondition,
}

impl CoarseSolver for FemCoarseSolver {
    fn name(&self) -> &str {
        "fem"
    }

    fn solve_coarse(&self, k11: &ScalarField) -> Result<ScalarField> {
        fem::solve_steady_heat(k11, &self.bc)
    }
}

pub struct FolModel {
    pub n: usize,
    pub bc: BoundaryCondition,
    pub norm: MinMax,
    pub store: ParamStore<f32>,
    pub net: Sequential<f32>,
}

impl FolModel {
    pub fn new(n: usize, norm: MinMax, seed: u64) -> Result<Self> {
        if n < 3 {
            return Err(MeaError::invalid(format!(
                "grid side must be >= 3, got {n}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut nin = n * n;
        for (i, &h) in FOL_HIDDEN.iter().enumerate() {
            layers.push(Layer::Dense(Dense::new(
                &mut store,
                &format!("fc{i}"),
                nin,
                h,
                &mut rng,
            )?));
            layers.push(Layer::Activation(Activation::Swish));
            nin = h;
        }
        let out = Dense::new(&mut store, "out", nin, free_node_count(n), &mut rng)?;
        layers.push(Layer::Dense(out));
        Ok(Self {
            n,
            bc: BoundaryCondition::default(),
            norm,
            store,
            net: Sequential::new(layers),
        })
    }

    fn inputs(&self, fields: &[&ScalarField]) -> Result<Tensor4<f32>> {
        let mut data = Vec::with_capacity(fields.len() * self.n * self.n);
        for f in fields {
            if f.n() != self.n {
                return Err(MeaError::invalid(format!(
                    "model expects n={}, got n={}",
                    self.n,
                    f.n()
                )));
            }
            data.extend(f.values().iter().map(|&v| self.norm.apply(v) as f32));
        }
        Tensor4::from_vec([fields.len(), self.n * self.n, 1, 1], data)
    }

    pub fn predict_batch(&self, fields: &[&ScalarField]) -> Result<Vec<ScalarField>> {
        for f in fields {
            f.ensure_positive()?;
        }
        let y = self.net.forward_eval(&self.store, &self.inputs(fields)?)?;
        y.ensure_finite("coarse operator prediction")?;
        let m = free_node_count(self.n);
        y.data()
            .chunks(m)
            .map(|c| {
                let free: Vec<f64> = c.iter().map(|&v| v as f64).collect();
                assemble_full_field(&free, self.n, &self.bc)
            })
            .collect()
    }

    pub fn predict_coarse(&self, k11: &ScalarField) -> Result<ScalarField> {
        Ok(self.predict_batch(&[k11])?.remove(0))
    }

    pub fn count_params(&self) -> usize {
        self.store.count_params()
    }

    pub fn to_checkpoint(&self, mut meta: CheckpointMeta) -> Checkpoint {
        meta.extra.insert("n".into(), self.n.to_string());
        meta.extra
            .insert("k_lo".into(), format!("{:?}", self.norm.lo));
        meta.extra
            .insert("k_hi".into(), format!("{:?}", self.norm.hi));
        Checkpoint::from_store(FOL_KIND, &self.store, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(FOL_KIND)?;
        let n = ck.meta.get_parsed("n")?;
        let norm = MinMax::new(ck.meta.get_parsed("k_lo")?, ck.meta.get_parsed("k_hi")?)?;
        let mut model = Self::new(n, norm, 0)?;
        ck.load_into(&mut model.store)?;
        Ok(model)
    }
}

impl CoarseSolver for FolModel {
    fn name(&self) -> &str {
        "fol"
    }

    fn solve_coarse(&self, k11: &ScalarField) -> Result<ScalarField> {
        self.predict_coarse(k11)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FolTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub dataset_hash: String,
}

impl Default for FolTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr: 1e-4,
            batch: 50,
            seed: 0,
            dataset_hash: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FolHistory {
    /// Mean energy per epoch on the training and held-out fields.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

/// Batched energy loss of the network output and its gradient with respect
/// to that output.
fn energy_batch(
    model: &FolModel,
    ops: &[&EnergyOperator],
    y: &Tensor4<f32>,
) -> Result<(f64, Tensor4<f32>)> {
    let m = free_node_count(model.n);
    let b = ops.len();
    let mut dy = Tensor4::zeros(y.shape());
    let mut total = 0.0;
    let mut kt = vec![0.0; model.n * model.n];
    for (i, op) in ops.iter().enumerate() {
        let free: Vec<f64> = y.data()[i * m..(i + 1) * m]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let t = assemble_full_field(&free, model.n, &model.bc)?;
        total += op.energy_and_gradient(t.values(), &mut kt);
        let g = &mut dy.data_mut()[i * m..(i + 1) * m];
        let n = model.n;
        for (j, gj) in g.iter_mut().enumerate() {
            let (row, col) = (j / (n - 2), j % (n - 2) + 1);
            *gj = (kt[row * n + col] / b as f64) as f32;
        }
    }
    Ok((total / b as f64, dy))
}

fn eval_loss(
    model: &FolModel,
    fields: &[ScalarField],
    ops: &[EnergyOperator],
    idx: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(256) {
        let refs: Vec<&ScalarField> = chunk.iter().map(|&i| &fields[i]).collect();
        let y = model
            .net
            .forward_eval(&model.store, &model.inputs(&refs)?)?;
        let ops_b: Vec<&EnergyOperator> = chunk.iter().map(|&i| &ops[i]).collect();
        total += energy_batch(model, &ops_b, &y)?.0 * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Trains on the coarse conductivity fields with a seeded 80/20 split.
pub fn train_fol(fields: &[ScalarField], cfg: &FolTrainConfig) -> Result<(FolModel, FolHistory)> {
    if fields.is_empty() {
        return Err(MeaError::Precondition(
            "coarse operator training needs at least one field".into(),
        ));
    }
    let n = fields[0].n();
    if n != COARSE_N || fields.iter().any(|f| f.n() != n) {
        return Err(MeaError::invalid(format!(
            "all training fields must be {COARSE_N}x{COARSE_N}"
        )));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(MeaError::Config(
            "epochs and batch size must be positive".into(),
        ));
    }
    let norm = MinMax::fit(fields)?;
    let mut model = FolModel::new(n, norm, cfg.seed)?;
    let ops = fields
        .iter()
        .map(EnergyOperator::new)
        .collect::<Result<Vec<_>>>()?;
    let (train_idx, val_idx) = train_val_split(fields.len(), VALIDATION_FRACTION, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut history = FolHistory::default();
    let mut last_good: Option<Checkpoint> = None;
    let meta = |epoch: usize| CheckpointMeta {
        epoch: epoch as u64,
        lr: cfg.lr,
        seed: cfg.seed,
        dataset_hash: cfg.dataset_hash.clone(),
        extra: BTreeMap::new(),
    };
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for batch in batches(&train_idx, cfg.batch, &mut rng) {
            let refs: Vec<&ScalarField> = batch.iter().map(|&i| &fields[i]).collect();
            let ops_b: Vec<&EnergyOperator> = batch.iter().map(|&i| &ops[i]).collect();
            let x = model.inputs(&refs)?;
            let step = model
                .net
                .forward_train(&mut model.store, x)
                .and_then(|y| energy_batch(&model, &ops_b, &y));
            let (loss, dy) = match step {
                Ok(v) if v.0.is_finite() => v,
                Ok(_) | Err(MeaError::NumericalFailure { .. }) => {
                    return Err(MeaError::TrainingFailure {
                        epoch,
                        reason: "non-finite energy loss".into(),
                        last_good: last_good.map(Box::new),
                    })
                }
                Err(e) => return Err(e),
            };
            let mut grads = model.store.zero_grads();
            model.net.backward(&model.store, dy, &mut grads)?;
            adam_step(&mut model.store, &grads, &adam)?;
            sum += loss * batch.len() as f64;
        }
        let train_loss = sum / train_idx.len() as f64;
        let val_loss = eval_loss(&model, fields, &ops, &val_idx)?;
        if !val_loss.is_finite() {
            return Err(MeaError::TrainingFailure {
                epoch,
                reason: "non-finite validation energy".into(),
                last_good: last_good.map(Box::new),
            });
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        last_good = Some(model.to_checkpoint(meta(epoch)));
        if epoch == 1 || epoch % 50 == 0 || epoch == cfg.epochs {
            info!("fol epoch {epoch}: train energy {train_loss:.6}, val energy {val_loss:.6}");
        } else {
            debug!("fol epoch {epoch}: train energy {train_loss:.6}, val energy {val_loss:.6}");
        }
    }
    Ok((model, history))
}
