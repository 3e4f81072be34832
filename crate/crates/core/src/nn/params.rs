use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MeaError, Result};

use super::scalar::Real;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    /// Adam first and second moments (empty for buffers).
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Buffers such as batch-norm running statistics are persisted but never
    /// optimized or counted.
    pub trainable: bool,
}

/// Ordered collection of named tensors plus the optimizer step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            step: 0,
        }
    }

    fn insert(
        &mut self,
        name: String,
        shape: Vec<usize>,
        value: Vec<T>,
        trainable: bool,
    ) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(MeaError::invalid(format!(
                "duplicate parameter name {name}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != value.len() {
            return Err(MeaError::invalid(format!(
                "parameter {name}: shape {shape:?} does not match {} values",
                value.len()
            )));
        }
        let (m, v) = if trainable {
            (vec![T::zero(); len], vec![T::zero(); len])
        } else {
            (Vec::new(), Vec::new())
        };
        self.params.push(Param {
            name,
            shape,
            value,
            m,
            v,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_param(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: Vec<T>,
    ) -> Result<ParamId> {
        self.insert(name.into(), shape, value, true)
    }

    pub fn add_buffer(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: Vec<T>,
    ) -> Result<ParamId> {
        self.insert(name.into(), shape, value, false)
    }

    /// He-normal weights: `N(0, 2 / fan_in)`.
    pub fn add_he_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).map_err(|e| MeaError::invalid(e.to_string()))?;
        let len = shape.iter().product();
        let value = (0..len).map(|_| T::of(dist.sample(rng))).collect();
        self.add_param(name, shape, value)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Trainable element count (weights, biases, batch-norm affine terms).
    pub fn count_params(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            grads: self
                .params
                .iter()
                .map(|p| {
                    if p.trainable {
                        Some(vec![T::zero(); p.value.len()])
                    } else {
                        None
                    }
                })
                .collect(),
        }
    }

    /// Copies every value from `other`, which must have identical names and
    /// shapes. Optimizer moments are left untouched.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(MeaError::invalid("parameter stores differ in size"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(MeaError::invalid(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    dst.name, dst.shape, src.name, src.shape
                )));
            }
            dst.value.clone_from(&src.value);
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; `None` for buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        self.grads[id.0]
            .as_deref_mut()
            .expect("gradient requested for a non-trainable tensor")
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Removes the gradient of one tensor; used to exercise the missing
    /// gradient error path.
    pub fn clear(&mut self, id: ParamId) {
        self.grads[id.0] = None;
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every trainable tensor.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &Grads<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.grads.len() != store.params.len() {
        return Err(MeaError::invalid(format!(
            "gradient set has {} entries, store has {}",
            grads.grads.len(),
            store.params.len()
        )));
    }
    for (p, g) in store.params.iter().zip(&grads.grads) {
        if !p.trainable {
            continue;
        }
        match g {
            Some(g) if g.len() == p.value.len() => {}
            Some(g) => {
                return Err(MeaError::invalid(format!(
                    "gradient for {} has {} values, expected {}",
                    p.name,
                    g.len(),
                    p.value.len()
                )))
            }
            None => {
                return Err(MeaError::invalid(format!(
                    "missing gradient for {}",
                    p.name
                )))
            }
        }
    }
    store.step += 1;
    let t = store.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let step_size = T::of(cfg.lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(cfg.eps);
    for (p, g) in store.params.iter_mut().zip(&grads.grads) {
        let Some(g) = g else { continue };
        if !p.trainable {
            continue;
        }
        for i in 0..p.value.len() {
            let gi = g[i];
            p.m[i] = b1 * p.m[i] + one_b1 * gi;
            p.v[i] = b2 * p.v[i] + one_b2 * gi * gi;
            let v_hat = p.v[i] * inv_bc2;
            p.value[i] -= step_size * p.m[i] / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
