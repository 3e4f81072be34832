//! Upscalers from the coarse 11×11 solution to the 101×101 grid: order-k
//! interpolation, a fully connected network, the two microstructure-embedded
//! autoencoders and a standard U-Net.

pub mod arch;
pub mod train;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MeaError, Result};
use crate::field::{resample, MinMax, MultiResStack, ScalarField, COARSE_N, FINE_N};
use crate::nn::layers::Layer;
use crate::nn::{
    Checkpoint, CheckpointMeta, Grads, LayerSpec, ParamStore, Real, Sequential, Tensor4,
};

use arch::{build_ffnn_layers, MeaNet, UnetNet, DECODER_SIZES};

pub use train::{
    evaluate_mse, fit_norm, train_prepared, train_upscaler, LossHistory, PreparedData, TrainConfig,
    TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UpscalerKind {
    Interp,
    Ffnn,
    Mea1,
    Mea2,
    Unet,
}

impl UpscalerKind {
    pub const ALL: [UpscalerKind; 5] = [
        UpscalerKind::Interp,
        UpscalerKind::Ffnn,
        UpscalerKind::Mea1,
        UpscalerKind::Mea2,
        UpscalerKind::Unet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UpscalerKind::Interp => "interp",
            UpscalerKind::Ffnn => "ffnn",
            UpscalerKind::Mea1 => "mea1",
            UpscalerKind::Mea2 => "mea2",
            UpscalerKind::Unet => "unet",
        }
    }

    pub fn is_trainable(self) -> bool {
        self != UpscalerKind::Interp
    }

    /// Whether the model consumes the coarse temperature (everything but the
    /// U-Net, which sees only the fine conductivity).
    pub fn uses_coarse_solution(self) -> bool {
        self != UpscalerKind::Unet
    }

    pub fn default_batch(self) -> usize {
        if self == UpscalerKind::Ffnn {
            100
        } else {
            50
        }
    }
}

impl fmt::Display for UpscalerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UpscalerKind {
    type Err = MeaError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| MeaError::invalid(format!("unknown model kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpscalerSpec {
    pub kind: UpscalerKind,
    /// Interpolation order for [`UpscalerKind::Interp`].
    pub interp_order: u8,
    /// Number of coarsest conductivity maps concatenated in the MEA decoder.
    pub concat_strategy: u8,
    pub seed: u64,
}

impl UpscalerSpec {
    pub fn new(kind: UpscalerKind, seed: u64) -> Self {
        Self {
            kind,
            interp_order: 3,
            concat_strategy: 4,
            seed,
        }
    }

    pub fn with_concat(mut self, strategy: u8) -> Self {
        self.concat_strategy = strategy;
        self
    }
}

/// Order-k interpolation of the coarse solution to the fine grid.
pub fn upscale_interp(t11: &ScalarField, order: u8) -> Result<ScalarField> {
    if t11.n() != COARSE_N {
        return Err(MeaError::invalid(format!(
            "expected an {COARSE_N}x{COARSE_N} field, got n={}",
            t11.n()
        )));
    }
    resample(t11, FINE_N, order)
}

/// One supervised example; every field comes from the same microstructure.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    /// Coarse temperature from the low-fidelity solver.
    pub t11: ScalarField,
    pub stack: MultiResStack,
    /// Fine finite element temperature.
    pub target: ScalarField,
}

/// Network inputs for a batch: coarse temperature plus normalized
/// conductivity at 13, 26, 51 and 101.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs<T> {
    pub t11: Tensor4<T>,
    pub k: Vec<Tensor4<T>>,
}

impl<T: Real> Inputs<T> {
    pub fn from_fields(
        t11: &[&ScalarField],
        stacks: &[&MultiResStack],
        norm: &MinMax,
    ) -> Result<Self> {
        if t11.len() != stacks.len() || t11.is_empty() {
            return Err(MeaError::invalid(
                "inputs need one coarse field per conductivity stack",
            ));
        }
        let mut t = Vec::with_capacity(t11.len() * COARSE_N * COARSE_N);
        for f in t11 {
            if f.n() != COARSE_N {
                return Err(MeaError::invalid(format!(
                    "coarse temperature must be {COARSE_N}x{COARSE_N}"
                )));
            }
            t.extend(f.values().iter().map(|&v| T::of(v)));
        }
        let mut k = Vec::with_capacity(DECODER_SIZES.len());
        for &n in &DECODER_SIZES {
            let mut data = Vec::with_capacity(stacks.len() * n * n);
            for s in stacks {
                let level = s
                    .level(n)
                    .ok_or_else(|| MeaError::invalid(format!("stack has no level {n}")))?;
                data.extend(level.values().iter().map(|&v| T::of(norm.apply(v))));
            }
            k.push(Tensor4::from_vec([stacks.len(), 1, n, n], data)?);
        }
        Ok(Self {
            t11: Tensor4::from_vec([t11.len(), 1, COARSE_N, COARSE_N], t)?,
            k,
        })
    }

    pub fn batch(&self) -> usize {
        self.t11.batch()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            t11: self.t11.select(idx),
            k: self.k.iter().map(|k| k.select(idx)).collect(),
        }
    }

    pub fn k101(&self) -> &Tensor4<T> {
        &self.k[DECODER_SIZES.len() - 1]
    }
}

pub enum Network<T> {
    Ffnn(Sequential<T>),
    Mea(MeaNet<T>),
    Unet(UnetNet<T>),
}

/// A trainable upscaler: architecture, parameters and the conductivity
/// normalization it was trained with.
pub struct Upscaler<T> {
    pub spec: UpscalerSpec,
    pub norm: MinMax,
    pub store: ParamStore<T>,
    pub net: Network<T>,
}

impl<T: Real> Upscaler<T> {
    pub fn build(spec: UpscalerSpec, norm: MinMax) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let net = match spec.kind {
            UpscalerKind::Interp => {
                return Err(MeaError::invalid("interpolation has no trainable network"));
            }
            UpscalerKind::Ffnn => {
                Network::Ffnn(Sequential::new(build_ffnn_layers(&mut store, &mut rng)?))
            }
            UpscalerKind::Mea1 => Network::Mea(MeaNet::build(
                &mut store,
                1,
                spec.concat_strategy,
                &mut rng,
            )?),
            UpscalerKind::Mea2 => Network::Mea(MeaNet::build(
                &mut store,
                2,
                spec.concat_strategy,
                &mut rng,
            )?),
            UpscalerKind::Unet => Network::Unet(UnetNet::build(&mut store, &mut rng)?),
        };
        Ok(Self {
            spec,
            norm,
            store,
            net,
        })
    }

    pub fn kind(&self) -> UpscalerKind {
        self.spec.kind
    }

    pub fn count_params(&self) -> usize {
        self.store.count_params()
    }

    /// Output is `(B, 1, 101, 101)`.
    pub fn forward_train(&mut self, inputs: &Inputs<T>) -> Result<Tensor4<T>> {
        let y = match &mut self.net {
            Network::Ffnn(seq) => seq
                .forward_train(&mut self.store, inputs.t11.clone())?
                .reshape([inputs.batch(), 1, FINE_N, FINE_N])?,
            Network::Mea(net) => {
                net.forward_train(&mut self.store, inputs.t11.clone(), &inputs.k)?
            }
            Network::Unet(net) => net.forward_train(&mut self.store, inputs.k101().clone())?,
        };
        y.ensure_finite("upscaler forward pass")?;
        Ok(y)
    }

    pub fn forward_eval(&self, inputs: &Inputs<T>) -> Result<Tensor4<T>> {
        let y = match &self.net {
            Network::Ffnn(seq) => seq.forward_eval(&self.store, &inputs.t11)?.reshape([
                inputs.batch(),
                1,
                FINE_N,
                FINE_N,
            ])?,
            Network::Mea(net) => net.forward_eval(&self.store, &inputs.t11, &inputs.k)?,
            Network::Unet(net) => net.forward_eval(&self.store, inputs.k101())?,
        };
        y.ensure_finite("upscaler prediction")?;
        Ok(y)
    }

    /// Accumulates parameter gradients; returns the gradient with respect to
    /// the primary input.
    pub fn backward(&mut self, dy: Tensor4<T>, grads: &mut Grads<T>) -> Result<Tensor4<T>> {
        match &mut self.net {
            Network::Ffnn(seq) => {
                let b = dy.batch();
                let dy = dy.reshape([b, FINE_N * FINE_N, 1, 1])?;
                seq.backward(&self.store, dy, grads)
            }
            Network::Mea(net) => net.backward(&self.store, dy, grads),
            Network::Unet(net) => net.backward(&self.store, dy, grads),
        }
    }

    /// Layer descriptions in execution order, labelled by stage.
    pub fn specs(&self) -> Vec<(String, LayerSpec)> {
        match &self.net {
            Network::Ffnn(seq) => seq
                .specs()
                .into_iter()
                .map(|s| ("ffnn".to_string(), s))
                .collect(),
            Network::Mea(net) => net.specs(),
            Network::Unet(net) => net.specs(),
        }
    }

    /// Symbolic shapes after every layer, without touching data. Skip
    /// concatenations and upsampling appear as their own entries.
    pub fn trace_shapes(&self, batch: usize) -> Result<Vec<(String, [usize; 4])>> {
        let mut shape = match self.spec.kind {
            UpscalerKind::Unet => [batch, 1, FINE_N, FINE_N],
            _ => [batch, 1, COARSE_N, COARSE_N],
        };
        let mut out = Vec::new();
        for (label, spec) in self.specs() {
            shape = spec.output_shape(shape)?;
            out.push((label, shape));
        }
        Ok(out)
    }

    /// Concatenated decoder inputs of each stage (convolutional models only).
    pub fn stage_inputs(&self, inputs: &Inputs<T>) -> Result<Vec<Tensor4<T>>> {
        match &self.net {
            Network::Mea(net) => net.stage_inputs(&self.store, &inputs.t11, &inputs.k),
            Network::Unet(net) => net.stage_inputs(&self.store, inputs.k101()),
            Network::Ffnn(_) => Err(MeaError::invalid(
                "the fully connected model has no decoder stages",
            )),
        }
    }

    pub fn unet_bottleneck(&self, inputs: &Inputs<T>) -> Result<Tensor4<T>> {
        match &self.net {
            Network::Unet(net) => net.bottleneck(&self.store, inputs.k101()),
            _ => Err(MeaError::invalid(
                "bottleneck is defined for the U-Net only",
            )),
        }
    }

    /// Layers of every sequential block, for inspection.
    pub fn layers(&self) -> Vec<&Layer> {
        match &self.net {
            Network::Ffnn(seq) => seq.layers.iter().collect(),
            Network::Mea(net) => net
                .encoder
                .layers
                .iter()
                .chain(net.decoder.stages.iter().flat_map(|s| s.body.layers.iter()))
                .collect(),
            Network::Unet(net) => net
                .encoder
                .iter()
                .flat_map(|b| b.layers.iter())
                .chain(net.decoder.stages.iter().flat_map(|s| s.body.layers.iter()))
                .collect(),
        }
    }
}

impl Upscaler<f32> {
    pub fn to_checkpoint(&self, mut meta: CheckpointMeta) -> Checkpoint {
        meta.extra.insert(
            "concat_strategy".into(),
            self.spec.concat_strategy.to_string(),
        );
        meta.extra
            .insert("k_lo".into(), format!("{:?}", self.norm.lo));
        meta.extra
            .insert("k_hi".into(), format!("{:?}", self.norm.hi));
        meta.extra
            .insert("init_seed".into(), self.spec.seed.to_string());
        Checkpoint::from_store(self.spec.kind.name(), &self.store, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind: UpscalerKind = ck.kind.parse()?;
        let spec = UpscalerSpec {
            kind,
            interp_order: 3,
            concat_strategy: ck.meta.get_parsed("concat_strategy")?,
            seed: ck.meta.get_parsed("init_seed")?,
        };
        let norm = MinMax::new(ck.meta.get_parsed("k_lo")?, ck.meta.get_parsed("k_hi")?)?;
        let mut model = Self::build(spec, norm)?;
        ck.load_into(&mut model.store)?;
        Ok(model)
    }

    /// Single-sample prediction on the fine grid.
    pub fn predict_high(&self, t11: &ScalarField, stack: &MultiResStack) -> Result<ScalarField> {
        let inputs = Inputs::<f32>::from_fields(&[t11], &[stack], &self.norm)?;
        let y = self.forward_eval(&inputs)?;
        ScalarField::new(FINE_N, y.data().iter().map(|&v| v as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::build_stack;
    use crate::microgen::two_slab;

    fn norm() -> MinMax {
        MinMax::new(0.1, 1.0).unwrap()
    }

    #[test]
    fn parameter_counts() {
        let ffnn = 121 * 1000 + 1000 + 1000 * 5000 + 5000 + 5000 * 10201 + 10201;
        assert_eq!(ffnn, 56_142_201);
        let counts: Vec<usize> = [UpscalerKind::Mea2, UpscalerKind::Mea1, UpscalerKind::Unet]
            .iter()
            .map(|&k| {
                Upscaler::<f32>::build(UpscalerSpec::new(k, 0), norm())
                    .unwrap()
                    .count_params()
            })
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }

    #[test]
    fn invalid_strategy_rejected() {
        for s in [0, 5] {
            assert!(Upscaler::<f32>::build(
                UpscalerSpec::new(UpscalerKind::Mea1, 0).with_concat(s),
                norm()
            )
            .is_err());
        }
        assert!(
            Upscaler::<f32>::build(UpscalerSpec::new(UpscalerKind::Interp, 0), norm()).is_err()
        );
    }

    #[test]
    fn mea_trace_and_channels() {
        for strategy in 1..=4u8 {
            let m = Upscaler::<f32>::build(
                UpscalerSpec::new(UpscalerKind::Mea2, 1).with_concat(strategy),
                norm(),
            )
            .unwrap();
            let trace = m.trace_shapes(2).unwrap();
            assert_eq!(trace.last().unwrap().1, [2, 1, 101, 101]);
            let concats: Vec<[usize; 4]> = trace
                .iter()
                .filter(|(l, _)| l.starts_with("concat"))
                .map(|(_, s)| *s)
                .collect();
            assert_eq!(concats.len(), strategy as usize);
            assert_eq!(concats[0], [2, 129, 13, 13]);
        }
    }

    #[test]
    fn unet_trace() {
        let m = Upscaler::<f32>::build(UpscalerSpec::new(UpscalerKind::Unet, 1), norm()).unwrap();
        let trace = m.trace_shapes(1).unwrap();
        let bottleneck = trace.iter().rfind(|(l, _)| l == "encoder_11").unwrap().1;
        assert_eq!(bottleneck, [1, 128, 11, 11]);
        let c51 = trace.iter().find(|(l, _)| l == "concat_51").unwrap().1;
        assert_eq!(c51, [1, 64 + 32, 51, 51]);
        assert_eq!(trace.last().unwrap().1, [1, 1, 101, 101]);
    }

    #[test]
    fn predict_high_is_deterministic_and_round_trips() {
        let k = two_slab(101, 1.0, 0.1).unwrap();
        let stack = build_stack(&k, "slab").unwrap();
        let t11 = ScalarField::from_fn(11, |x, _| 1.0 - x).unwrap();
        let mut m =
            Upscaler::<f32>::build(UpscalerSpec::new(UpscalerKind::Mea2, 4), norm()).unwrap();
        // one training-mode pass initializes the batch norm statistics
        let inputs = Inputs::from_fields(&[&t11, &t11], &[&stack, &stack], &m.norm).unwrap();
        m.forward_train(&inputs).unwrap();
        let a = m.predict_high(&t11, &stack).unwrap();
        assert_eq!(a.n(), 101);
        assert_eq!(m.predict_high(&t11, &stack).unwrap(), a);
        let back = Upscaler::from_checkpoint(&m.to_checkpoint(CheckpointMeta::default())).unwrap();
        assert_eq!(back.predict_high(&t11, &stack).unwrap(), a);
    }

    #[test]
    fn interp_ramp_is_exact() {
        let t = ScalarField::from_fn(11, |x, _| 1.0 - x).unwrap();
        let up = upscale_interp(&t, 1).unwrap();
        let fine = ScalarField::from_fn(101, |x, _| 1.0 - x).unwrap();
        assert!(up
            .values()
            .iter()
            .zip(fine.values())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(upscale_interp(&fine, 1).is_err());
    }
}
