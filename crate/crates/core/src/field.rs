//! Nodal scalar fields on the unit square, max-pool condensation of the
//! conductivity map and endpoint-aligned resampling.
//!
//! Layout: `values[row * n + col]`, where `row` is the y index counted from
//! the bottom edge and `col` is the x index counted from the left edge. Node
//! `(row, col)` sits at `(col * h, row * h)` with `h = 1 / (n - 1)`.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{MeaError, Result};

/// Side lengths of the multi-resolution stack, finest first.
pub const STACK_RESOLUTIONS: [usize; 5] = [101, 51, 26, 13, 11];

/// Pooling windows producing 51, 26, 13 and 11 from 101.
pub const STACK_WINDOWS: [usize; 4] = [2, 4, 8, 10];

pub const FINE_N: usize = 101;
pub const COARSE_N: usize = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    n: usize,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(MeaError::invalid(format!(
                "field side must be >= 2, got {n}"
            )));
        }
        if values.len() != n * n {
            return Err(MeaError::invalid(format!(
                "field of side {n} needs {} values, got {}",
                n * n,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MeaError::invalid(format!("non-finite value at index {i}")));
        }
        Ok(Self { n, values })
    }

    pub fn constant(n: usize, value: f64) -> Result<Self> {
        Self::new(n, vec![value; n * n])
    }

    /// Builds a field by evaluating `f(x, y)` at every node.
    pub fn from_fn(n: usize, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        if n < 2 {
            return Err(MeaError::invalid(format!(
                "field side must be >= 2, got {n}"
            )));
        }
        let h = 1.0 / (n - 1) as f64;
        let mut values = Vec::with_capacity(n * n);
        for row in 0..n {
            for col in 0..n {
                values.push(f(col as f64 * h, row as f64 * h));
            }
        }
        Self::new(n, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.n + col] = value;
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.n, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Rejects fields that cannot serve as a conductivity map.
    pub fn ensure_positive(&self) -> Result<()> {
        match self.values.iter().position(|&v| v <= 0.0) {
            Some(i) => Err(MeaError::invalid(format!(
                "conductivity must be strictly positive, found {} at index {i}",
                self.values[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn write_meaf<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MEAF_MAGIC)?;
        w.write_u32::<LittleEndian>(MEAF_VERSION)?;
        w.write_u32::<LittleEndian>(self.n as u32)?;
        write_f32_values(&mut w, &self.values)?;
        Ok(())
    }

    pub fn read_meaf<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MEAF_MAGIC {
            return Err(MeaError::format("MEAF", "bad magic"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != MEAF_VERSION {
            return Err(MeaError::format(
                "MEAF",
                format!("unsupported version {version}"),
            ));
        }
        let n = r.read_u32::<LittleEndian>()? as usize;
        if n < 2 {
            return Err(MeaError::format("MEAF", format!("side {n} < 2")));
        }
        let values = read_f32_values(&mut r, n * n)?;
        Self::new(n, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_meaf(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_meaf(std::io::BufReader::new(file))
    }
}

const MEAF_MAGIC: &[u8; 4] = b"MEAF";
const MEAF_VERSION: u32 = 1;

pub(crate) fn write_f32_values<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_f32_values<R: Read>(r: &mut R, count: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Conductivity at every level of the condensation pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiResStack {
    levels: Vec<ScalarField>,
    pub source_id: String,
}

impl MultiResStack {
    /// Returns the level with side `n`, if it is one of [`STACK_RESOLUTIONS`].
    pub fn level(&self, n: usize) -> Option<&ScalarField> {
        STACK_RESOLUTIONS
            .iter()
            .position(|&r| r == n)
            .map(|i| &self.levels[i])
    }

    pub fn fine(&self) -> &ScalarField {
        &self.levels[0]
    }

    pub fn coarsest(&self) -> &ScalarField {
        &self.levels[4]
    }

    pub fn levels(&self) -> impl Iterator<Item = (usize, &ScalarField)> {
        STACK_RESOLUTIONS.iter().copied().zip(self.levels.iter())
    }
}

/// Max pooling with stride equal to the window. Trailing partial blocks are
/// kept, so the output side is `ceil(n / window)`.
pub fn condense_max(field: &ScalarField, window: usize) -> Result<ScalarField> {
    let n = field.n();
    if window < 1 || window > n {
        return Err(MeaError::invalid(format!(
            "pooling window {window} outside [1, {n}]"
        )));
    }
    let out_n = n.div_ceil(window);
    let mut out = Vec::with_capacity(out_n * out_n);
    for i in 0..out_n {
        let rows = i * window..((i + 1) * window).min(n);
        for j in 0..out_n {
            let cols = j * window..((j + 1) * window).min(n);
            let mut m = f64::NEG_INFINITY;
            for r in rows.clone() {
                for c in cols.clone() {
                    m = m.max(field.get(r, c));
                }
            }
            out.push(m);
        }
    }
    ScalarField::new(out_n, out)
}

pub fn build_stack(field101: &ScalarField, source_id: impl Into<String>) -> Result<MultiResStack> {
    if field101.n() != FINE_N {
        return Err(MeaError::invalid(format!(
            "stack input must be {FINE_N}x{FINE_N}, got {}",
            field101.n()
        )));
    }
    let mut levels = Vec::with_capacity(STACK_RESOLUTIONS.len());
    levels.push(field101.clone());
    for &w in &STACK_WINDOWS {
        levels.push(condense_max(field101, w)?);
    }
    Ok(MultiResStack {
        levels,
        source_id: source_id.into(),
    })
}

/// Interpolation order accepted by [`resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpOrder {
    Nearest,
    Linear,
    Cubic,
}

impl InterpOrder {
    pub fn from_order(order: u8) -> Result<Self> {
        match order {
            0 => Ok(InterpOrder::Nearest),
            1 => Ok(InterpOrder::Linear),
            3 => Ok(InterpOrder::Cubic),
            other => Err(MeaError::invalid(format!(
                "unsupported interpolation order {other} (expected 0, 1 or 3)"
            ))),
        }
    }

    pub fn order(self) -> u8 {
        match self {
            InterpOrder::Nearest => 0,
            InterpOrder::Linear => 1,
            InterpOrder::Cubic => 3,
        }
    }
}

/// Keys cubic convolution kernel with a = -0.5.
fn keys_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Per-axis taps: (source indices, weights) for every output index.
/// Keys' boundary extension for a node just outside `[0, last]`: the
/// quadratic through the three nearest nodes, or the line for two nodes.
fn ghost_node(idx: isize, last: isize) -> Vec<(usize, f64)> {
    let (a, step) = if idx < 0 { (0, 1) } else { (last, -1) };
    let at = |k: isize| (a + k * step) as usize;
    if last >= 2 {
        vec![(at(0), 3.0), (at(1), -3.0), (at(2), 1.0)]
    } else {
        vec![(at(0), 2.0), (at(1), -1.0)]
    }
}

pub(crate) fn axis_taps(n_in: usize, n_out: usize, order: InterpOrder) -> Vec<Vec<(usize, f64)>> {
    let last = (n_in - 1) as isize;
    (0..n_out)
        .map(|i| {
            let coord = if n_out == 1 {
                0.0
            } else {
                (i * (n_in - 1)) as f64 / (n_out - 1) as f64
            };
            match order {
                InterpOrder::Nearest => {
                    let idx = ((coord + 0.5).floor() as usize).min(n_in - 1);
                    vec![(idx, 1.0)]
                }
                InterpOrder::Linear => {
                    let i0 = (coord.floor() as usize).min(n_in - 1);
                    let t = coord - i0 as f64;
                    if i0 + 1 < n_in && t > 0.0 {
                        vec![(i0, 1.0 - t), (i0 + 1, t)]
                    } else {
                        vec![(i0, 1.0)]
                    }
                }
                InterpOrder::Cubic => {
                    let i0 = coord.floor();
                    let t = coord - i0;
                    let i0 = i0 as isize;
                    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(6);
                    for d in -1..=2 {
                        let w = keys_weight(t - d as f64);
                        let idx = i0 + d;
                        if w == 0.0 {
                            continue;
                        }
                        if (0..=last).contains(&idx) {
                            taps.push((idx as usize, w));
                        } else {
                            for (g, gw) in ghost_node(idx, last) {
                                taps.push((g, w * gw));
                            }
                        }
                    }
                    taps
                }
            }
        })
        .collect()
}

/// Endpoint-aligned resampling: output node `i` samples the input at
/// `i * (n_in - 1) / (n_out - 1)` along each axis.
pub fn resample(field: &ScalarField, target_n: usize, order: u8) -> Result<ScalarField> {
    let order = InterpOrder::from_order(order)?;
    resample_with(field, target_n, order)
}

pub fn resample_with(
    field: &ScalarField,
    target_n: usize,
    order: InterpOrder,
) -> Result<ScalarField> {
    if target_n < 2 {
        return Err(MeaError::invalid(format!(
            "target side must be >= 2, got {target_n}"
        )));
    }
    let n = field.n();
    if target_n == n {
        return Ok(field.clone());
    }
    let taps = axis_taps(n, target_n, order);
    // separable: interpolate along x into a (n x target_n) buffer, then along y
    let mut tmp = vec![0.0; n * target_n];
    for r in 0..n {
        for (j, tj) in taps.iter().enumerate() {
            tmp[r * target_n + j] = tj.iter().map(|&(c, w)| w * field.get(r, c)).sum();
        }
    }
    let mut out = vec![0.0; target_n * target_n];
    for (i, ti) in taps.iter().enumerate() {
        for j in 0..target_n {
            out[i * target_n + j] = ti.iter().map(|&(r, w)| w * tmp[r * target_n + j]).sum();
        }
    }
    ScalarField::new(target_n, out)
}

/// Min-max scaling of conductivity values to `[0, 1]` using dataset bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMax {
    pub lo: f64,
    pub hi: f64,
}

impl MinMax {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(MeaError::invalid(format!(
                "invalid normalization bounds [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    /// Bounds spanning every value of every field.
    pub fn fit<'a>(fields: impl IntoIterator<Item = &'a ScalarField>) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for f in fields {
            lo = lo.min(f.min());
            hi = hi.max(f.max());
        }
        Self::new(lo, hi)
    }

    /// Degenerate bounds map everything to 0.
    pub fn apply(&self, v: f64) -> f64 {
        if self.hi > self.lo {
            (v - self.lo) / (self.hi - self.lo)
        } else {
            0.0
        }
    }
}
