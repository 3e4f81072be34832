//! Convolutional encoder/decoder graphs. Each network is a handful of
//! [`Sequential`] blocks glued together by upsampling and channel
//! concatenation, with the glue differentiated by hand.

use rand::Rng;

use crate::error::{MeaError, Result};
use crate::field::{COARSE_N, FINE_N};
use crate::nn::layers::{Activation, Conv2d, Layer, LayerSpec};
use crate::nn::{
    concat_channels, split_channels, upsample_backward, upsample_to, Grads, ParamStore, Real,
    Sequential, Tensor4,
};

/// Decoder spatial sizes, coarse to fine.
pub const DECODER_SIZES: [usize; 4] = [13, 26, 51, 101];

pub const MEA1_ENCODER_CHANNELS: [usize; 12] = [8, 8, 16, 16, 32, 32, 64, 64, 128, 128, 128, 128];
pub const MEA2_ENCODER_CHANNELS: [usize; 1] = [128];
pub const MEA_DECODER_CHANNELS: [usize; 3] = [64, 32, 16];
pub const MEA_HEAD_CHANNELS: usize = 8;

pub const UNET_ENCODER_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const UNET_DECODER_CHANNELS: [usize; 4] = [128, 64, 32, 16];

/// One decoder step: upsample to `size`, optionally append `extra` channels,
/// then run `body`.
pub struct Stage<T> {
    pub in_size: usize,
    pub in_channels: usize,
    pub size: usize,
    pub extra: usize,
    pub body: Sequential<T>,
}

impl<T: Real> Stage<T> {
    fn assemble(&self, h: &Tensor4<T>, extra: Option<&Tensor4<T>>) -> Result<Tensor4<T>> {
        let up = upsample_to(h, self.size, self.size)?;
        match (self.extra, extra) {
            (0, None) => Ok(up),
            (c, Some(e)) if c == e.channels() => concat_channels(&up, e),
            _ => Err(MeaError::invalid(format!(
                "decoder stage at {} expects {} extra channels",
                self.size, self.extra
            ))),
        }
    }

    fn specs(&self) -> Vec<(String, LayerSpec)> {
        let mut out = vec![(
            format!("upsample_{}", self.size),
            LayerSpec::UpsampleTo {
                height: self.size,
                width: self.size,
            },
        )];
        if self.extra > 0 {
            out.push((
                format!("concat_{}", self.size),
                LayerSpec::ConcatChannels { extra: self.extra },
            ));
        }
        out.extend(
            self.body
                .specs()
                .into_iter()
                .map(|s| (format!("stage_{}", self.size), s)),
        );
        out
    }
}

pub struct Decoder<T> {
    pub stages: Vec<Stage<T>>,
}

impl<T: Real> Decoder<T> {
    pub fn forward_train(
        &mut self,
        store: &mut ParamStore<T>,
        mut h: Tensor4<T>,
        extras: &[Option<&Tensor4<T>>],
    ) -> Result<Tensor4<T>> {
        for (stage, extra) in self.stages.iter_mut().zip(extras) {
            let x = stage.assemble(&h, *extra)?;
            h = stage.body.forward_train(store, x)?;
        }
        Ok(h)
    }

    pub fn forward_eval(
        &self,
        store: &ParamStore<T>,
        mut h: Tensor4<T>,
        extras: &[Option<&Tensor4<T>>],
    ) -> Result<Tensor4<T>> {
        for (stage, extra) in self.stages.iter().zip(extras) {
            let x = stage.assemble(&h, *extra)?;
            h = stage.body.forward_eval(store, &x)?;
        }
        Ok(h)
    }

    /// Post-concatenation inputs of every stage, in eval mode.
    pub fn stage_inputs(
        &self,
        store: &ParamStore<T>,
        mut h: Tensor4<T>,
        extras: &[Option<&Tensor4<T>>],
    ) -> Result<Vec<Tensor4<T>>> {
        let mut out = Vec::with_capacity(self.stages.len());
        for (stage, extra) in self.stages.iter().zip(extras) {
            let x = stage.assemble(&h, *extra)?;
            h = stage.body.forward_eval(store, &x)?;
            out.push(x);
        }
        Ok(out)
    }

    /// Returns the gradient at the decoder input and at every extra input.
    pub fn backward(
        &mut self,
        store: &ParamStore<T>,
        mut dy: Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<(Tensor4<T>, Vec<Option<Tensor4<T>>>)> {
        let mut d_extras = Vec::with_capacity(self.stages.len());
        for stage in self.stages.iter_mut().rev() {
            let dx = stage.body.backward(store, dy, grads)?;
            let d_up = if stage.extra > 0 {
                let (d_up, d_extra) = split_channels(&dx, stage.in_channels)?;
                d_extras.push(Some(d_extra));
                d_up
            } else {
                d_extras.push(None);
                dx
            };
            dy = upsample_backward(&d_up, stage.in_size, stage.in_size)?;
        }
        d_extras.reverse();
        Ok((dy, d_extras))
    }

    pub fn specs(&self) -> Vec<(String, LayerSpec)> {
        self.stages.iter().flat_map(Stage::specs).collect()
    }
}

fn conv_block<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    channels: &[usize],
    cin: usize,
    first_stride: usize,
    rng: &mut R,
) -> Result<Vec<Layer>> {
    let mut layers = Vec::new();
    let mut c = cin;
    for (i, &cout) in channels.iter().enumerate() {
        let stride = if i == 0 { first_stride } else { 1 };
        layers.extend(Sequential::conv_bn_relu(
            store,
            &format!("{name}.{i}"),
            c,
            cout,
            stride,
            1,
            rng,
        )?);
        c = cout;
    }
    Ok(layers)
}

fn linear_conv<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut R,
) -> Result<Layer> {
    Ok(Layer::Conv2d(Conv2d::new(
        store, name, cin, cout, 1, 1, rng,
    )?))
}

/// Microstructure-embedded autoencoder: coarse temperature in, conductivity
/// appended at the `strategy` coarsest decoder stages.
pub struct MeaNet<T> {
    pub encoder: Sequential<T>,
    pub decoder: Decoder<T>,
    pub strategy: u8,
}

impl<T: Real> MeaNet<T> {
    pub fn build<R: Rng>(
        store: &mut ParamStore<T>,
        mea_type: u8,
        strategy: u8,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=4).contains(&strategy) {
            return Err(MeaError::invalid(format!(
                "concat strategy must be 1..=4, got {strategy}"
            )));
        }
        let enc_channels: &[usize] = match mea_type {
            1 => &MEA1_ENCODER_CHANNELS,
            2 => &MEA2_ENCODER_CHANNELS,
            t => {
                return Err(MeaError::invalid(format!(
                    "MEA type must be 1 or 2, got {t}"
                )))
            }
        };
        let encoder = Sequential::new(conv_block(store, "enc", enc_channels, 1, 1, rng)?);
        let mut c = *enc_channels.last().expect("non-empty schedule");
        let mut in_size = COARSE_N;
        let mut stages = Vec::new();
        for (i, &size) in DECODER_SIZES.iter().enumerate() {
            let extra = usize::from(i < strategy as usize);
            let name = format!("dec{size}");
            let body = if size == FINE_N {
                let mut layers = conv_block(store, &name, &[MEA_HEAD_CHANNELS], c + extra, 1, rng)?;
                layers.push(linear_conv(
                    store,
                    &format!("{name}.out"),
                    MEA_HEAD_CHANNELS,
                    1,
                    rng,
                )?);
                layers
            } else {
                let w = MEA_DECODER_CHANNELS[i];
                conv_block(store, &name, &[w, w], c + extra, 1, rng)?
            };
            stages.push(Stage {
                in_size,
                in_channels: c,
                size,
                extra,
                body: Sequential::new(body),
            });
            c = if size == FINE_N {
                1
            } else {
                MEA_DECODER_CHANNELS[i]
            };
            in_size = size;
        }
        Ok(Self {
            encoder,
            decoder: Decoder { stages },
            strategy,
        })
    }

    fn extras<'a>(&self, k: &'a [Tensor4<T>]) -> Vec<Option<&'a Tensor4<T>>> {
        (0..DECODER_SIZES.len())
            .map(|i| {
                if i < self.strategy as usize {
                    k.get(i)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn forward_train(
        &mut self,
        store: &mut ParamStore<T>,
        t11: Tensor4<T>,
        k: &[Tensor4<T>],
    ) -> Result<Tensor4<T>> {
        let extras = self.extras(k);
        let h = self.encoder.forward_train(store, t11)?;
        self.decoder.forward_train(store, h, &extras)
    }

    pub fn forward_eval(
        &self,
        store: &ParamStore<T>,
        t11: &Tensor4<T>,
        k: &[Tensor4<T>],
    ) -> Result<Tensor4<T>> {
        let h = self.encoder.forward_eval(store, t11)?;
        self.decoder.forward_eval(store, h, &self.extras(k))
    }

    pub fn stage_inputs(
        &self,
        store: &ParamStore<T>,
        t11: &Tensor4<T>,
        k: &[Tensor4<T>],
    ) -> Result<Vec<Tensor4<T>>> {
        let h = self.encoder.forward_eval(store, t11)?;
        self.decoder.stage_inputs(store, h, &self.extras(k))
    }

    /// Gradient with respect to the coarse temperature input.
    pub fn backward(
        &mut self,
        store: &ParamStore<T>,
        dy: Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        let (dh, _) = self.decoder.backward(store, dy, grads)?;
        self.encoder.backward(store, dh, grads)
    }

    pub fn specs(&self) -> Vec<(String, LayerSpec)> {
        let mut out: Vec<(String, LayerSpec)> = self
            .encoder
            .specs()
            .into_iter()
            .map(|s| ("encoder".to_string(), s))
            .collect();
        out.extend(self.decoder.specs());
        out
    }
}

/// Standard U-Net on the fine conductivity field with skip connections at
/// 101, 51, 26 and 13 and a 128×11×11 bottleneck.
pub struct UnetNet<T> {
    /// Encoder levels at 101, 51, 26, 13 and the unpadded step to 11.
    pub encoder: Vec<Sequential<T>>,
    pub decoder: Decoder<T>,
}

impl<T: Real> UnetNet<T> {
    pub fn build<R: Rng>(store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let [c101, c51, c26, c13] = UNET_ENCODER_CHANNELS;
        let encoder = vec![
            Sequential::new(conv_block(store, "enc101", &[c101, c101, c101], 1, 1, rng)?),
            Sequential::new(conv_block(store, "enc51", &[c51, c51, c51], c101, 2, rng)?),
            Sequential::new(conv_block(store, "enc26", &[c26, c26, c26], c51, 2, rng)?),
            Sequential::new(conv_block(store, "enc13", &[c13, c13], c26, 2, rng)?),
            Sequential::new(Sequential::conv_bn_relu(
                store, "enc11", c13, c13, 1, 0, rng,
            )?),
        ];
        let skips = [c13, c26, c51, c101];
        let mut c = c13;
        let mut in_size = COARSE_N;
        let mut stages = Vec::new();
        for (i, &size) in DECODER_SIZES.iter().enumerate() {
            let w = UNET_DECODER_CHANNELS[i];
            let name = format!("dec{size}");
            let mut body = conv_block(store, &name, &[w, w], c + skips[i], 1, rng)?;
            if size == FINE_N {
                body.push(linear_conv(store, &format!("{name}.out"), w, 1, rng)?);
            }
            stages.push(Stage {
                in_size,
                in_channels: c,
                size,
                extra: skips[i],
                body: Sequential::new(body),
            });
            c = w;
            in_size = size;
        }
        Ok(Self {
            encoder,
            decoder: Decoder { stages },
        })
    }

    pub fn forward_train(
        &mut self,
        store: &mut ParamStore<T>,
        k101: Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut h = k101;
        for block in &mut self.encoder {
            h = block.forward_train(store, h)?;
            feats.push(h.clone());
        }
        let bottleneck = feats.pop().expect("encoder has levels");
        let extras: Vec<Option<&Tensor4<T>>> = feats.iter().rev().map(Some).collect();
        self.decoder.forward_train(store, bottleneck, &extras)
    }

    fn encode(&self, store: &ParamStore<T>, k101: &Tensor4<T>) -> Result<Vec<Tensor4<T>>> {
        let mut feats: Vec<Tensor4<T>> = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let h = block.forward_eval(store, feats.last().unwrap_or(k101))?;
            feats.push(h);
        }
        Ok(feats)
    }

    pub fn forward_eval(&self, store: &ParamStore<T>, k101: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut feats = self.encode(store, k101)?;
        let bottleneck = feats.pop().expect("encoder has levels");
        let extras: Vec<Option<&Tensor4<T>>> = feats.iter().rev().map(Some).collect();
        self.decoder.forward_eval(store, bottleneck, &extras)
    }

    pub fn bottleneck(&self, store: &ParamStore<T>, k101: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.encode(store, k101)?.pop().expect("encoder has levels"))
    }

    pub fn stage_inputs(
        &self,
        store: &ParamStore<T>,
        k101: &Tensor4<T>,
    ) -> Result<Vec<Tensor4<T>>> {
        let mut feats = self.encode(store, k101)?;
        let bottleneck = feats.pop().expect("encoder has levels");
        let extras: Vec<Option<&Tensor4<T>>> = feats.iter().rev().map(Some).collect();
        self.decoder.stage_inputs(store, bottleneck, &extras)
    }

    pub fn backward(
        &mut self,
        store: &ParamStore<T>,
        dy: Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        let (mut d, d_skips) = self.decoder.backward(store, dy, grads)?;
        // d_skips is ordered 13, 26, 51, 101; encoder levels run 101 .. 11
        let levels = self.encoder.len();
        for (level, block) in self.encoder.iter_mut().enumerate().rev() {
            if level + 1 < levels {
                let skip = d_skips[levels - 2 - level]
                    .as_ref()
                    .ok_or_else(|| MeaError::State("missing skip gradient".into()))?;
                for (a, b) in d.data_mut().iter_mut().zip(skip.data()) {
                    *a += *b;
                }
            }
            d = block.backward(store, d, grads)?;
        }
        Ok(d)
    }

    pub fn specs(&self) -> Vec<(String, LayerSpec)> {
        let mut out = Vec::new();
        for (block, size) in self.encoder.iter().zip([101, 51, 26, 13, 11]) {
            out.extend(
                block
                    .specs()
                    .into_iter()
                    .map(|s| (format!("encoder_{size}"), s)),
            );
        }
        out.extend(self.decoder.specs());
        out
    }
}

/// Fully connected baseline: flattened coarse temperature through two swish
/// layers to the full fine grid.
pub fn build_ffnn_layers<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<Vec<Layer>> {
    use crate::nn::Dense;
    let sizes = FFNN_SIZES;
    let mut layers = vec![Layer::Flatten];
    for i in 0..sizes.len() - 1 {
        layers.push(Layer::Dense(Dense::new(
            store,
            &format!("fc{i}"),
            sizes[i],
            sizes[i + 1],
            rng,
        )?));
        if i + 2 < sizes.len() {
            layers.push(Layer::Activation(Activation::Swish));
        }
    }
    Ok(layers)
}

pub const FFNN_SIZES: [usize; 4] = [COARSE_N * COARSE_N, 1000, 5000, FINE_N * FINE_N];
