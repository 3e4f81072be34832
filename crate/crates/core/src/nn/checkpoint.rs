//! `MEAC` checkpoint container.
//!
//! Layout (little-endian): magic `MEAC`, u32 version, kind tag (u32 length +
//! UTF-8), u32 tensor count, then per tensor its name (u32 length + UTF-8),
//! u32 rank, u32 dims and f32 data. A metadata block follows: u64 epoch,
//! f64 learning rate, u64 seed, dataset hash string and u32-counted
//! key/value string pairs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{MeaError, Result};

use super::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"MEAC";
pub const VERSION: u32 = 1;
const MAX_STRING: usize = 1 << 20;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub lr: f64,
    pub seed: u64,
    pub dataset_hash: String,
    /// Architecture identity and anything else needed to rebuild the model.
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.extra
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| MeaError::format("MEAC", format!("missing metadata key {key}")))
    }

    pub fn get_parsed<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.get(key)?
            .parse()
            .map_err(|_| MeaError::format("MEAC", format!("unparsable metadata value for {key}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub tensors: Vec<NamedTensor>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Captures every tensor of `store`, buffers included.
    pub fn from_store(
        kind: impl Into<String>,
        store: &ParamStore<f32>,
        meta: CheckpointMeta,
    ) -> Self {
        Self {
            kind: kind.into(),
            tensors: store
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.value.clone(),
                })
                .collect(),
            meta,
        }
    }

    /// Copies tensor values into a freshly built store of the same architecture.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(MeaError::invalid(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            let id = store.find(&t.name).ok_or_else(|| {
                MeaError::invalid(format!("model has no tensor named {}", t.name))
            })?;
            let p = store.get_mut(id);
            if p.shape != t.shape {
                return Err(MeaError::invalid(format!(
                    "tensor {}: checkpoint shape {:?}, model shape {:?}",
                    t.name, t.shape, p.shape
                )));
            }
            p.value.clone_from(&t.data);
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(MeaError::invalid(format!(
                "checkpoint holds a {} model, expected {kind}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        write_str(w, &self.kind)?;
        w.write_u32::<LE>(self.tensors.len() as u32)?;
        for t in &self.tensors {
            write_str(w, &t.name)?;
            w.write_u32::<LE>(t.shape.len() as u32)?;
            for &d in &t.shape {
                w.write_u32::<LE>(d as u32)?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.write_u64::<LE>(self.meta.epoch)?;
        w.write_f64::<LE>(self.meta.lr)?;
        w.write_u64::<LE>(self.meta.seed)?;
        write_str(w, &self.meta.dataset_hash)?;
        w.write_u32::<LE>(self.meta.extra.len() as u32)?;
        for (k, v) in &self.meta.extra {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(MeaError::format("MEAC", "bad magic"));
        }
        let version = r.read_u32::<LE>().map_err(truncated)?;
        if version != VERSION {
            return Err(MeaError::format(
                "MEAC",
                format!("unsupported version {version}"),
            ));
        }
        let kind = read_str(r)?;
        let count = r.read_u32::<LE>().map_err(truncated)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = read_str(r)?;
            let rank = r.read_u32::<LE>().map_err(truncated)? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(MeaError::format(
                    "MEAC",
                    format!("tensor {name} has rank {rank}"),
                ));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LE>().map_err(truncated)? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&l| l <= 1 << 31)
                .ok_or_else(|| MeaError::format("MEAC", format!("tensor {name} is too large")))?;
            let mut buf = vec![0u8; len * 4];
            r.read_exact(&mut buf).map_err(truncated)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let epoch = r.read_u64::<LE>().map_err(truncated)?;
        let lr = r.read_f64::<LE>().map_err(truncated)?;
        let seed = r.read_u64::<LE>().map_err(truncated)?;
        let dataset_hash = read_str(r)?;
        let n_extra = r.read_u32::<LE>().map_err(truncated)? as usize;
        let mut extra = BTreeMap::new();
        for _ in 0..n_extra {
            let k = read_str(r)?;
            let v = read_str(r)?;
            extra.insert(k, v);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(MeaError::format("MEAC", "trailing bytes after metadata"));
        }
        Ok(Self {
            kind,
            tensors,
            meta: CheckpointMeta {
                epoch,
                lr,
                seed,
                dataset_hash,
                extra,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn truncated(e: std::io::Error) -> MeaError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        MeaError::format("MEAC", "truncated file")
    } else {
        MeaError::Io(e)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LE>().map_err(truncated)? as usize;
    if len > MAX_STRING {
        return Err(MeaError::format(
            "MEAC",
            format!("string length {len} too large"),
        ));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| MeaError::format("MEAC", "invalid UTF-8"))
}
