//! Layers with explicit forward caches and hand-written backward passes.

use std::ops::Range;

use rand::Rng;

use crate::error::{MeaError, Result};

use super::params::{Grads, ParamId, ParamStore};
use super::scalar::{gemm, Real};
use super::tensor::Tensor4;

pub const KERNEL: usize = 3;

/// Upper bound on im2col buffer elements per chunk of the batch.
const COL_BUDGET: usize = 1 << 16;

/// Stride-1 convolutions with at most this many output channels skip im2col.
const DIRECT_MAX_COUT: usize = 2;

/// Declarative description of one layer, used to build networks and to audit
/// shapes without running data through them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        cin: usize,
        cout: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        nin: usize,
        nout: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    Relu,
    Swish,
    /// Linear activation.
    Identity,
    UpsampleTo {
        height: usize,
        width: usize,
    },
    /// Appends `extra` channels from a second input.
    ConcatChannels {
        extra: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d {
                cin,
                cout,
                stride,
                padding,
            } => {
                if cin == 0 || cout == 0 {
                    return Err(MeaError::invalid("conv channels must be positive"));
                }
                if !(1..=2).contains(&stride) {
                    return Err(MeaError::invalid(format!(
                        "conv stride must be 1 or 2, got {stride}"
                    )));
                }
                if padding > 1 {
                    return Err(MeaError::invalid(format!(
                        "conv padding must be 0 or 1, got {padding}"
                    )));
                }
                Ok(())
            }
            LayerSpec::Dense { nin, nout } if nin == 0 || nout == 0 => {
                Err(MeaError::invalid("dense sizes must be positive"))
            }
            LayerSpec::BatchNorm2d { channels: 0 } => {
                Err(MeaError::invalid("batch norm needs channels"))
            }
            LayerSpec::UpsampleTo { height, width } if height == 0 || width == 0 => {
                Err(MeaError::invalid("upsample target must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Output shape for an input of shape `[b, c, h, w]`.
    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        self.validate()?;
        let [b, c, h, w] = input;
        match *self {
            LayerSpec::Conv2d {
                cin,
                cout,
                stride,
                padding,
            } => {
                if c != cin {
                    return Err(MeaError::invalid(format!(
                        "conv expects {cin} channels, got {c}"
                    )));
                }
                let (ho, wo) = conv_output_size(h, w, stride, padding)?;
                Ok([b, cout, ho, wo])
            }
            LayerSpec::Dense { nin, nout } => {
                if c * h * w != nin {
                    return Err(MeaError::invalid(format!(
                        "dense expects {nin} inputs, got {}",
                        c * h * w
                    )));
                }
                Ok([b, nout, 1, 1])
            }
            LayerSpec::BatchNorm2d { channels } => {
                if c != channels {
                    return Err(MeaError::invalid(format!(
                        "batch norm expects {channels} channels, got {c}"
                    )));
                }
                Ok(input)
            }
            LayerSpec::Relu | LayerSpec::Swish | LayerSpec::Identity => Ok(input),
            LayerSpec::UpsampleTo { height, width } => {
                if height < h || width < w {
                    return Err(MeaError::invalid("upsample cannot shrink"));
                }
                Ok([b, c, height, width])
            }
            LayerSpec::ConcatChannels { extra } => Ok([b, c + extra, h, w]),
            LayerSpec::Flatten => Ok([b, c * h * w, 1, 1]),
        }
    }
}

/// `floor((h + 2p - 3) / s) + 1` per axis.
pub fn conv_output_size(
    h: usize,
    w: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    if hp < KERNEL || wp < KERNEL {
        return Err(MeaError::invalid(format!(
            "input {h}x{w} with padding {padding} is smaller than the kernel"
        )));
    }
    Ok(((hp - KERNEL) / stride + 1, (wp - KERNEL) / stride + 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * KERNEL * KERNEL
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Writes the patch matrix of output rows `rows` of one sample into
    /// columns starting at `offset` of a `self.rows() x ld` buffer.
    fn im2col<T: Real>(
        &self,
        x: &[T],
        cols: &mut [T],
        ld: usize,
        offset: usize,
        rows: Range<usize>,
    ) {
        let (h, w, wo) = (self.h, self.w, self.wo);
        let span = rows.len() * wo;
        let pad = self.padding as isize;
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = (c * KERNEL + ky) * KERNEL + kx;
                    let dst = &mut cols[row * ld + offset..row * ld + offset + span];
                    for (r, oy) in rows.clone().enumerate() {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        let drow = &mut dst[r * wo..(r + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        if self.stride == 1 {
                            // valid outputs form one contiguous run
                            let lo = (pad - kx as isize).max(0) as usize;
                            let hi = ((w as isize + pad - kx as isize).min(wo as isize))
                                .max(lo as isize) as usize;
                            drow[..lo].fill(T::zero());
                            drow[hi..].fill(T::zero());
                            let off = lo as isize + kx as isize - pad;
                            drow[lo..hi]
                                .copy_from_slice(&src[off as usize..off as usize + hi - lo]);
                            continue;
                        }
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            *d = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulates patch gradients into `dx`.
    fn col2im<T: Real>(
        &self,
        cols: &[T],
        ld: usize,
        offset: usize,
        rows: Range<usize>,
        dx: &mut [T],
    ) {
        let (h, w, wo) = (self.h, self.w, self.wo);
        let span = rows.len() * wo;
        let pad = self.padding as isize;
        for c in 0..self.cin {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = (c * KERNEL + ky) * KERNEL + kx;
                    let src = &cols[row * ld + offset..row * ld + offset + span];
                    for (r, oy) in rows.clone().enumerate() {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &g) in src[r * wo..(r + 1) * wo].iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Work units of `(first sample, sample count, output rows)`. Small
    /// planes are grouped across the batch, large ones split into row tiles
    /// so the patch buffer stays cache-sized.
    fn tiles(&self, batch: usize) -> Vec<(usize, usize, Range<usize>)> {
        let per_sample = self.rows() * self.pixels();
        if per_sample <= COL_BUDGET {
            let chunk = (COL_BUDGET / per_sample.max(1)).clamp(1, batch);
            (0..batch)
                .step_by(chunk)
                .map(|s| (s, chunk.min(batch - s), 0..self.ho))
                .collect()
        } else {
            let tile_rows = (COL_BUDGET / (self.rows() * self.wo)).max(1);
            (0..batch)
                .flat_map(|s| {
                    (0..self.ho)
                        .step_by(tile_rows)
                        .map(move |r| (s, 1, r..(r + tile_rows).min(self.ho)))
                })
                .collect()
        }
    }

    fn max_tile_cols(&self, batch: usize) -> usize {
        self.tiles(batch)
            .iter()
            .map(|(_, nb, rows)| nb * rows.len() * self.wo)
            .max()
            .unwrap_or(0)
    }
}

impl Conv2d {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        LayerSpec::Conv2d {
            cin,
            cout,
            stride,
            padding,
        }
        .validate()?;
        let fan_in = cin * KERNEL * KERNEL;
        let weight = store.add_he_normal(
            format!("{name}.weight"),
            vec![cout, cin, KERNEL, KERNEL],
            fan_in,
            rng,
        )?;
        let bias = store.add_param(format!("{name}.bias"), vec![cout], vec![T::zero(); cout])?;
        Ok(Self {
            cin,
            cout,
            stride,
            padding,
            weight,
            bias,
        })
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Conv2d {
            cin: self.cin,
            cout: self.cout,
            stride: self.stride,
            padding: self.padding,
        }
    }

    fn geometry<T: Real>(&self, x: &Tensor4<T>) -> Result<ConvGeom> {
        if x.channels() != self.cin {
            return Err(MeaError::invalid(format!(
                "conv expects {} input channels, got {}",
                self.cin,
                x.channels()
            )));
        }
        let (ho, wo) = conv_output_size(x.height(), x.width(), self.stride, self.padding)?;
        Ok(ConvGeom {
            cin: self.cin,
            h: x.height(),
            w: x.width(),
            ho,
            wo,
            stride: self.stride,
            padding: self.padding,
        })
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.forward_with(store.value(self.weight), store.value(self.bias), x)
    }

    /// Forward pass with explicit weights, e.g. batch-norm-folded ones.
    pub fn forward_with<T: Real>(
        &self,
        weight: &[T],
        bias: &[T],
        x: &Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        let g = self.geometry(x)?;
        if g.stride == 1 && self.cout <= DIRECT_MAX_COUT {
            return Ok(self.forward_direct(&g, weight, bias, x));
        }
        let (k, p) = (g.rows(), g.pixels());
        let batch = x.batch();
        let mut y = Tensor4::zeros([batch, self.cout, g.ho, g.wo]);
        let max_cols = g.max_tile_cols(batch);
        let mut cols = vec![T::zero(); k * max_cols];
        let mut out = vec![T::zero(); self.cout * max_cols];
        for (start, nb, rows) in g.tiles(batch) {
            let span = rows.len() * g.wo;
            let ld = nb * span;
            for i in 0..nb {
                g.im2col(x.sample(start + i), &mut cols, ld, i * span, rows.clone());
            }
            gemm(
                false,
                false,
                self.cout,
                ld,
                k,
                T::one(),
                weight,
                &cols[..k * ld],
                T::zero(),
                &mut out[..self.cout * ld],
            );
            for i in 0..nb {
                for co in 0..self.cout {
                    let bias_v = bias[co];
                    let src = &out[co * ld + i * span..co * ld + (i + 1) * span];
                    let dst = &mut y.plane_mut(start + i, co)[rows.start * g.wo..rows.end * g.wo];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bias_v;
                    }
                }
            }
        }
        debug_assert_eq!(p * batch * self.cout, y.len());
        Ok(y)
    }

    /// Tap-by-tap accumulation over shifted rows. With few output channels
    /// the patch matrix costs more than the arithmetic it feeds.
    fn forward_direct<T: Real>(
        &self,
        g: &ConvGeom,
        weight: &[T],
        bias: &[T],
        x: &Tensor4<T>,
    ) -> Tensor4<T> {
        let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
        let pad = g.padding;
        let mut y = Tensor4::zeros([x.batch(), self.cout, ho, wo]);
        for b in 0..x.batch() {
            for co in 0..self.cout {
                let out = y.plane_mut(b, co);
                out.fill(bias[co]);
                for ci in 0..self.cin {
                    let plane = x.plane(b, ci);
                    for ky in 0..KERNEL {
                        for kx in 0..KERNEL {
                            let wv = weight[((co * self.cin + ci) * KERNEL + ky) * KERNEL + kx];
                            let lo = pad.saturating_sub(kx);
                            let hi = wo.min((w + pad).saturating_sub(kx));
                            if lo >= hi {
                                continue;
                            }
                            for oy in 0..ho {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let src = &plane[(iy - pad) * w + lo + kx - pad
                                    ..(iy - pad) * w + hi + kx - pad];
                                let dst = &mut out[oy * wo + lo..oy * wo + hi];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor4<T>,
        dy: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        let g = self.geometry(x)?;
        let (k, p) = (g.rows(), g.pixels());
        let batch = x.batch();
        if dy.shape() != [batch, self.cout, g.ho, g.wo] {
            return Err(MeaError::invalid(format!(
                "conv upstream gradient has shape {:?}",
                dy.shape()
            )));
        }
        let weight = store.value(self.weight);
        let mut dx = Tensor4::zeros(x.shape());
        let max_cols = g.max_tile_cols(batch);
        let mut cols = vec![T::zero(); k * max_cols];
        let mut dout = vec![T::zero(); self.cout * max_cols];
        let mut dw = vec![T::zero(); self.cout * k];
        let mut db = vec![T::zero(); self.cout];
        for (start, nb, rows) in g.tiles(batch) {
            let span = rows.len() * g.wo;
            let ld = nb * span;
            for i in 0..nb {
                g.im2col(x.sample(start + i), &mut cols, ld, i * span, rows.clone());
                for co in 0..self.cout {
                    let src = &dy.plane(start + i, co)[rows.start * g.wo..rows.end * g.wo];
                    dout[co * ld + i * span..co * ld + (i + 1) * span].copy_from_slice(src);
                    db[co] += src.iter().copied().sum::<T>();
                }
            }
            gemm(
                false,
                true,
                self.cout,
                k,
                ld,
                T::one(),
                &dout[..self.cout * ld],
                &cols[..k * ld],
                T::one(),
                &mut dw,
            );
            // reuse the patch buffer for the patch gradients
            gemm(
                true,
                false,
                k,
                ld,
                self.cout,
                T::one(),
                weight,
                &dout[..self.cout * ld],
                T::zero(),
                &mut cols[..k * ld],
            );
            for i in 0..nb {
                g.col2im(&cols, ld, i * span, rows.clone(), dx.sample_mut(start + i));
            }
        }
        debug_assert_eq!(p * batch, dy.plane_len() * batch);
        for (a, b) in grads.get_mut(self.weight).iter_mut().zip(&dw) {
            *a += *b;
        }
        for (a, b) in grads.get_mut(self.bias).iter_mut().zip(&db) {
            *a += *b;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub nin: usize,
    pub nout: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        nin: usize,
        nout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        LayerSpec::Dense { nin, nout }.validate()?;
        let weight = store.add_he_normal(format!("{name}.weight"), vec![nout, nin], nin, rng)?;
        let bias = store.add_param(format!("{name}.bias"), vec![nout], vec![T::zero(); nout])?;
        Ok(Self {
            nin,
            nout,
            weight,
            bias,
        })
    }

    fn check<T: Real>(&self, x: &Tensor4<T>) -> Result<()> {
        if x.sample_len() != self.nin {
            return Err(MeaError::invalid(format!(
                "dense expects {} inputs per sample, got {}",
                self.nin,
                x.sample_len()
            )));
        }
        Ok(())
    }

    /// `y = x Wᵀ + b` on the flattened sample.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x)?;
        let batch = x.batch();
        let bias = store.value(self.bias);
        let mut y = Vec::with_capacity(batch * self.nout);
        for _ in 0..batch {
            y.extend_from_slice(bias);
        }
        gemm(
            false,
            true,
            batch,
            self.nout,
            self.nin,
            T::one(),
            x.data(),
            store.value(self.weight),
            T::one(),
            &mut y,
        );
        Tensor4::from_vec([batch, self.nout, 1, 1], y)
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor4<T>,
        dy: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        self.check(x)?;
        let batch = x.batch();
        if dy.len() != batch * self.nout {
            return Err(MeaError::invalid("dense upstream gradient has wrong size"));
        }
        gemm(
            true,
            false,
            self.nout,
            self.nin,
            batch,
            T::one(),
            dy.data(),
            x.data(),
            T::one(),
            grads.get_mut(self.weight),
        );
        let db = grads.get_mut(self.bias);
        for b in 0..batch {
            for (acc, &g) in db
                .iter_mut()
                .zip(&dy.data()[b * self.nout..(b + 1) * self.nout])
            {
                *acc += g;
            }
        }
        let mut dx = Tensor4::zeros(x.shape());
        gemm(
            false,
            false,
            batch,
            self.nin,
            self.nout,
            T::one(),
            dy.data(),
            store.value(self.weight),
            T::zero(),
            dx.data_mut(),
        );
        Ok(dx)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Single-element buffer counting training batches seen.
    pub batches_tracked: ParamId,
}

pub struct BatchNormCache<T> {
    xhat: Tensor4<T>,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        LayerSpec::BatchNorm2d { channels }.validate()?;
        Ok(Self {
            channels,
            gamma: store.add_param(
                format!("{name}.gamma"),
                vec![channels],
                vec![T::one(); channels],
            )?,
            beta: store.add_param(
                format!("{name}.beta"),
                vec![channels],
                vec![T::zero(); channels],
            )?,
            running_mean: store.add_buffer(
                format!("{name}.running_mean"),
                vec![channels],
                vec![T::zero(); channels],
            )?,
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                vec![channels],
                vec![T::one(); channels],
            )?,
            batches_tracked: store.add_buffer(
                format!("{name}.batches_tracked"),
                vec![1],
                vec![T::zero()],
            )?,
        })
    }

    fn check<T: Real>(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != self.channels {
            return Err(MeaError::invalid(format!(
                "batch norm expects {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        Ok(())
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
        self.check(x)?;
        let count = x.batch() * x.plane_len();
        if count < 2 {
            return Err(MeaError::invalid(
                "training-mode batch norm needs at least 2 values per channel",
            ));
        }
        let mut xhat = Tensor4::zeros(x.shape());
        let mut y = Tensor4::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(self.channels);
        let mut means = Vec::with_capacity(self.channels);
        let mut vars = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let mut sum = 0.0;
            for b in 0..x.batch() {
                sum += x.plane(b, c).iter().map(|v| v.f64()).sum::<f64>();
            }
            let mean = sum / count as f64;
            let mut sq = 0.0;
            for b in 0..x.batch() {
                sq += x
                    .plane(b, c)
                    .iter()
                    .map(|v| (v.f64() - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / count as f64;
            let istd = 1.0 / (var + BN_EPS).sqrt();
            let (gamma, beta) = (store.value(self.gamma)[c], store.value(self.beta)[c]);
            for b in 0..x.batch() {
                let src = x.plane(b, c);
                let xh = xhat.plane_mut(b, c);
                for (d, &s) in xh.iter_mut().zip(src) {
                    *d = T::of((s.f64() - mean) * istd);
                }
                let xh = xhat.plane(b, c).to_vec();
                for (d, s) in y.plane_mut(b, c).iter_mut().zip(xh) {
                    *d = gamma * s + beta;
                }
            }
            inv_std.push(istd);
            means.push(mean);
            vars.push(sq / (count - 1) as f64);
        }
        let m = BN_MOMENTUM;
        for (r, mean) in store.value_mut(self.running_mean).iter_mut().zip(&means) {
            *r = T::of((1.0 - m) * r.f64() + m * mean);
        }
        for (r, var) in store.value_mut(self.running_var).iter_mut().zip(&vars) {
            *r = T::of((1.0 - m) * r.f64() + m * var);
        }
        let tracked = store.value_mut(self.batches_tracked);
        tracked[0] += T::one();
        Ok((y, BatchNormCache { xhat, inv_std }))
    }

    pub fn forward_eval<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        self.check(x)?;
        let (scale, shift) = self.eval_affine(store)?;
        let mut y = x.clone();
        for b in 0..x.batch() {
            for c in 0..self.channels {
                let (s, t) = (T::of(scale[c]), T::of(shift[c]));
                y.plane_mut(b, c).iter_mut().for_each(|v| *v = *v * s + t);
            }
        }
        Ok(y)
    }

    /// Per-channel `(scale, shift)` equivalent to eval-mode normalization.
    pub fn eval_affine<T: Real>(&self, store: &ParamStore<T>) -> Result<(Vec<f64>, Vec<f64>)> {
        if store.value(self.batches_tracked)[0] == T::zero() {
            return Err(MeaError::State(
                "batch norm evaluated before any training step".into(),
            ));
        }
        let (gamma, beta) = (store.value(self.gamma), store.value(self.beta));
        let (mean, var) = (
            store.value(self.running_mean),
            store.value(self.running_var),
        );
        let mut scale = Vec::with_capacity(self.channels);
        let mut shift = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let s = gamma[c].f64() / (var[c].f64() + BN_EPS).sqrt();
            scale.push(s);
            shift.push(beta[c].f64() - mean[c].f64() * s);
        }
        Ok((scale, shift))
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &BatchNormCache<T>,
        dy: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        if dy.shape() != cache.xhat.shape() {
            return Err(MeaError::invalid(
                "batch norm upstream gradient has wrong shape",
            ));
        }
        let count = (dy.batch() * dy.plane_len()) as f64;
        let mut dx = Tensor4::zeros(dy.shape());
        let mut dgamma = vec![0.0; self.channels];
        let mut dbeta = vec![0.0; self.channels];
        for c in 0..self.channels {
            let gamma = store.value(self.gamma)[c].f64();
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for b in 0..dy.batch() {
                for (&g, &xh) in dy.plane(b, c).iter().zip(cache.xhat.plane(b, c)) {
                    sum_dy += g.f64();
                    sum_dy_xhat += g.f64() * xh.f64();
                }
            }
            dgamma[c] = sum_dy_xhat;
            dbeta[c] = sum_dy;
            let k = gamma * cache.inv_std[c] / count;
            for b in 0..dy.batch() {
                let xh = cache.xhat.plane(b, c).to_vec();
                let g = dy.plane(b, c).to_vec();
                for ((d, g), xh) in dx.plane_mut(b, c).iter_mut().zip(g).zip(xh) {
                    *d = T::of(k * (count * g.f64() - sum_dy - xh.f64() * sum_dy_xhat));
                }
            }
        }
        for (a, b) in grads.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *a += T::of(*b);
        }
        for (a, b) in grads.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *a += T::of(*b);
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
    Identity,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Activation {
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Swish => x * sigmoid(x),
            Activation::Identity => x,
        }
    }

    pub fn derivative_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn forward<T: Real>(self, x: &Tensor4<T>) -> Tensor4<T> {
        let mut y = x.clone();
        match self {
            Activation::Relu => y.data_mut().iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            }),
            Activation::Swish => y
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v / (T::one() + (-*v).exp())),
            Activation::Identity => {}
        }
        y
    }

    pub fn backward<T: Real>(self, x: &Tensor4<T>, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        if x.shape() != dy.shape() {
            return Err(MeaError::invalid("activation gradient shape mismatch"));
        }
        let mut dx = dy.clone();
        match self {
            Activation::Relu => {
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    if xv <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            Activation::Swish => {
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    let s = T::one() / (T::one() + (-xv).exp());
                    *d *= s + xv * s * (T::one() - s);
                }
            }
            Activation::Identity => {}
        }
        Ok(dx)
    }
}

/// A layer that maps one tensor to one tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    BatchNorm2d(BatchNorm2d),
    Activation(Activation),
    Flatten,
}

pub enum Cache<T> {
    Input(Tensor4<T>),
    BatchNorm(BatchNormCache<T>),
    Shape([usize; 4]),
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(c) => c.spec(),
            Layer::Dense(d) => LayerSpec::Dense {
                nin: d.nin,
                nout: d.nout,
            },
            Layer::BatchNorm2d(b) => LayerSpec::BatchNorm2d {
                channels: b.channels,
            },
            Layer::Activation(Activation::Relu) => LayerSpec::Relu,
            Layer::Activation(Activation::Swish) => LayerSpec::Swish,
            Layer::Activation(Activation::Identity) => LayerSpec::Identity,
            Layer::Flatten => LayerSpec::Flatten,
        }
    }

    pub fn forward_train<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        x: Tensor4<T>,
    ) -> Result<(Tensor4<T>, Cache<T>)> {
        match self {
            Layer::Conv2d(c) => {
                let y = c.forward(store, &x)?;
                Ok((y, Cache::Input(x)))
            }
            Layer::Dense(d) => {
                let y = d.forward(store, &x)?;
                Ok((y, Cache::Input(x)))
            }
            Layer::BatchNorm2d(b) => {
                let (y, cache) = b.forward_train(store, &x)?;
                Ok((y, Cache::BatchNorm(cache)))
            }
            Layer::Activation(a) => {
                let y = a.forward(&x);
                Ok((y, Cache::Input(x)))
            }
            Layer::Flatten => {
                let shape = x.shape();
                let y = x.reshape([shape[0], shape[1] * shape[2] * shape[3], 1, 1])?;
                Ok((y, Cache::Shape(shape)))
            }
        }
    }

    pub fn forward_eval<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        match self {
            Layer::Conv2d(c) => c.forward(store, x),
            Layer::Dense(d) => d.forward(store, x),
            Layer::BatchNorm2d(b) => b.forward_eval(store, x),
            Layer::Activation(a) => Ok(a.forward(x)),
            Layer::Flatten => {
                let [b, c, h, w] = x.shape();
                x.clone().reshape([b, c * h * w, 1, 1])
            }
        }
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &Cache<T>,
        dy: Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        match (self, cache) {
            (Layer::Conv2d(c), Cache::Input(x)) => c.backward(store, x, &dy, grads),
            (Layer::Dense(d), Cache::Input(x)) => d.backward(store, x, &dy, grads),
            (Layer::BatchNorm2d(b), Cache::BatchNorm(cache)) => {
                b.backward(store, cache, &dy, grads)
            }
            (Layer::Activation(a), Cache::Input(x)) => a.backward(x, &dy),
            (Layer::Flatten, Cache::Shape(shape)) => dy.reshape(*shape),
            _ => Err(MeaError::State(
                "layer cache does not match layer kind".into(),
            )),
        }
    }
}

/// Chain of single-input layers that keeps the caches of its last training
/// forward pass.
pub struct Sequential<T> {
    pub layers: Vec<Layer>,
    tape: Option<Vec<Cache<T>>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers, tape: None }
    }

    /// `conv3x3 -> batch norm -> relu`.
    pub fn conv_bn_relu<R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Vec<Layer>> {
        Ok(vec![
            Layer::Conv2d(Conv2d::new(
                store,
                &format!("{name}.conv"),
                cin,
                cout,
                stride,
                padding,
                rng,
            )?),
            Layer::BatchNorm2d(BatchNorm2d::new(store, &format!("{name}.bn"), cout)?),
            Layer::Activation(Activation::Relu),
        ])
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn output_shape(&self, mut shape: [usize; 4]) -> Result<[usize; 4]> {
        for l in &self.layers {
            shape = l.spec().output_shape(shape)?;
        }
        Ok(shape)
    }

    pub fn forward_train(
        &mut self,
        store: &mut ParamStore<T>,
        mut x: Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        let mut tape = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, cache) = l.forward_train(store, x)?;
            tape.push(cache);
            x = y;
        }
        x.ensure_finite("training forward pass")?;
        self.tape = Some(tape);
        Ok(x)
    }

    /// Inference pass. A convolution directly followed by batch norm runs as
    /// one convolution with the normalization folded into its weights.
    pub fn forward_eval(&self, store: &ParamStore<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut cur: Option<Tensor4<T>> = None;
        let mut i = 0;
        while i < self.layers.len() {
            let input = cur.as_ref().unwrap_or(x);
            if let (Layer::Conv2d(conv), Some(Layer::BatchNorm2d(bn))) =
                (&self.layers[i], self.layers.get(i + 1))
            {
                let (scale, shift) = bn.eval_affine(store)?;
                let per_out = conv.cin * KERNEL * KERNEL;
                let mut w = store.value(conv.weight).to_vec();
                let mut b = store.value(conv.bias).to_vec();
                for co in 0..conv.cout {
                    let s = T::of(scale[co]);
                    w[co * per_out..(co + 1) * per_out]
                        .iter_mut()
                        .for_each(|v| *v *= s);
                    b[co] = T::of(b[co].f64() * scale[co] + shift[co]);
                }
                cur = Some(conv.forward_with(&w, &b, input)?);
                i += 2;
                continue;
            }
            cur = Some(self.layers[i].forward_eval(store, input)?);
            i += 1;
        }
        Ok(cur.unwrap_or_else(|| x.clone()))
    }

    /// Consumes the tape recorded by the last [`Self::forward_train`].
    pub fn backward(
        &mut self,
        store: &ParamStore<T>,
        mut dy: Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        let tape = self.tape.take().ok_or_else(|| {
            MeaError::State("backward called before a training forward pass".into())
        })?;
        for (l, cache) in self.layers.iter().zip(&tape).rev() {
            dy = l.backward(store, cache, dy, grads)?;
        }
        Ok(dy)
    }

    pub fn clear_tape(&mut self) {
        self.tape = None;
    }
}
