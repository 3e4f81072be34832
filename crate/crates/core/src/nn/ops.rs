//! Parameter-free multi-tensor operations and the loss.

use crate::error::{MeaError, Result};
use crate::field::{axis_taps, InterpOrder};

use super::scalar::Real;
use super::tensor::Tensor4;

/// Endpoint-aligned bilinear upsampling of every channel to `height x width`.
pub fn upsample_to<T: Real>(x: &Tensor4<T>, height: usize, width: usize) -> Result<Tensor4<T>> {
    let [b, c, h, w] = x.shape();
    check_target(h, w, height, width)?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let ty = taps(h, height);
    let tx = taps(w, width);
    let mut y = Tensor4::zeros([b, c, height, width]);
    let mut tmp = vec![T::zero(); h * width];
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            // along x, then along y
            for r in 0..h {
                let row = &src[r * w..(r + 1) * w];
                for (j, t) in tx.iter().enumerate() {
                    tmp[r * width + j] = t.iter().map(|&(i, wt)| row[i] * wt).sum();
                }
            }
            let dst = y.plane_mut(bi, ci);
            for (i, t) in ty.iter().enumerate() {
                let out = &mut dst[i * width..(i + 1) * width];
                for &(r, wt) in t {
                    for (o, &v) in out.iter_mut().zip(&tmp[r * width..(r + 1) * width]) {
                        *o += v * wt;
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`upsample_to`] for an input of spatial size `height x width`.
pub fn upsample_backward<T: Real>(
    dy: &Tensor4<T>,
    height: usize,
    width: usize,
) -> Result<Tensor4<T>> {
    let [b, c, ho, wo] = dy.shape();
    check_target(height, width, ho, wo)?;
    if (height, width) == (ho, wo) {
        return Ok(dy.clone());
    }
    let ty = taps(height, ho);
    let tx = taps(width, wo);
    let mut dx = Tensor4::zeros([b, c, height, width]);
    let mut tmp = vec![T::zero(); height * wo];
    for bi in 0..b {
        for ci in 0..c {
            tmp.fill(T::zero());
            let g = dy.plane(bi, ci);
            for (i, t) in ty.iter().enumerate() {
                let grow = &g[i * wo..(i + 1) * wo];
                for &(r, wt) in t {
                    for (d, &v) in tmp[r * wo..(r + 1) * wo].iter_mut().zip(grow) {
                        *d += v * wt;
                    }
                }
            }
            let dst = dx.plane_mut(bi, ci);
            for r in 0..height {
                let trow = &tmp[r * wo..(r + 1) * wo];
                for (j, t) in tx.iter().enumerate() {
                    for &(i, wt) in t {
                        dst[r * width + i] += trow[j] * wt;
                    }
                }
            }
        }
    }
    Ok(dx)
}

fn check_target(h: usize, w: usize, height: usize, width: usize) -> Result<()> {
    if height < h || width < w {
        return Err(MeaError::invalid(format!(
            "upsample target {height}x{width} is smaller than the input {h}x{w}"
        )));
    }
    Ok(())
}

fn taps<T: Real>(n_in: usize, n_out: usize) -> Vec<Vec<(usize, T)>> {
    axis_taps(n_in, n_out, InterpOrder::Linear)
        .into_iter()
        .map(|t| t.into_iter().map(|(i, w)| (i, T::of(w))).collect())
        .collect()
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [ba, ca, h, w] = a.shape();
    let [bb, cb, hb, wb] = b.shape();
    if (ba, h, w) != (bb, hb, wb) {
        return Err(MeaError::invalid(format!(
            "concat needs matching batch and spatial size, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..ba {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor4::from_vec([ba, ca + cb, h, w], data)
}

/// Splits a gradient of a concatenation back into its two parts.
pub fn split_channels<T: Real>(x: &Tensor4<T>, first: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let [b, c, h, w] = x.shape();
    if first == 0 || first >= c {
        return Err(MeaError::invalid(format!(
            "cannot split {c} channels at {first}"
        )));
    }
    let plane = h * w;
    let mut left = Vec::with_capacity(b * first * plane);
    let mut right = Vec::with_capacity(b * (c - first) * plane);
    for i in 0..b {
        let s = x.sample(i);
        left.extend_from_slice(&s[..first * plane]);
        right.extend_from_slice(&s[first * plane..]);
    }
    Ok((
        Tensor4::from_vec([b, first, h, w], left)?,
        Tensor4::from_vec([b, c - first, h, w], right)?,
    ))
}

/// Mean squared error over every element, with its gradient.
pub fn mse_loss<T: Real>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    if pred.len() != target.len() || pred.batch() != target.batch() {
        return Err(MeaError::invalid(format!(
            "mse shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor4::zeros(pred.shape());
    let scale = T::of(2.0 / n);
    for ((g, &p), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data())
        .zip(target.data())
    {
        let d = p - t;
        loss += d.f64() * d.f64();
        *g = scale * d;
    }
    Ok((loss / n, grad))
}
