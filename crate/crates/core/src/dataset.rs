//! `MEAD` dataset container, its manifest sidecar and FEM labelling.
//!
//! Layout (little-endian): magic `MEAD`, u32 version, u32 sample count,
//! u32 side `n`, then per sample `n*n` f32 conductivities, a flag byte
//! (1 when a temperature block follows, else 0) and optionally `n*n` f32
//! FEM temperatures.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MeaError, Result};
use crate::fem::{self, BoundaryCondition};
use crate::field::{build_stack, read_f32_values, write_f32_values, ScalarField, FINE_N};
use crate::fol::CoarseSolver;
use crate::microgen::{GeneratedDataset, SweepConfig};
use crate::models::TrainingPair;

pub const MEAD_MAGIC: &[u8; 4] = b"MEAD";
pub const MEAD_VERSION: u32 = 1;

/// Rounds every value to the nearest f32, the precision the container stores.
pub fn quantize(field: &ScalarField) -> ScalarField {
    ScalarField::new(
        field.n(),
        field.values().iter().map(|&v| v as f32 as f64).collect(),
    )
    .expect("rounding keeps the field valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub k: ScalarField,
    pub temperature: Option<ScalarField>,
}

/// Conductivity fields, optionally labelled with fine FEM temperatures. Values
/// are held at f32 precision so that in-memory and reloaded datasets agree
/// bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    samples: Vec<DatasetSample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelStats {
    pub solves: usize,
    pub total_seconds: f64,
    /// Mean wall-clock per solve, measured inside the worker.
    pub mean_solve_seconds: f64,
    pub max_iterations: usize,
}

impl Dataset {
    pub fn from_fields(fields: Vec<ScalarField>) -> Result<Self> {
        let n = fields
            .first()
            .map(ScalarField::n)
            .ok_or_else(|| MeaError::invalid("dataset needs at least one sample"))?;
        if let Some(f) = fields.iter().find(|f| f.n() != n) {
            return Err(MeaError::invalid(format!(
                "mixed field sides {n} and {}",
                f.n()
            )));
        }
        let samples = fields
            .iter()
            .map(|k| {
                k.ensure_positive()?;
                Ok(DatasetSample {
                    k: quantize(k),
                    temperature: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { n, samples })
    }

    pub fn from_generated(generated: &GeneratedDataset) -> Result<Self> {
        Self::from_fields(generated.samples.iter().map(|s| s.k101.clone()).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[DatasetSample] {
        &self.samples
    }

    pub fn conductivities(&self) -> impl Iterator<Item = &ScalarField> {
        self.samples.iter().map(|s| &s.k)
    }

    pub fn is_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.temperature.is_some())
    }

    /// The first `count` samples.
    pub fn head(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.len() {
            return Err(MeaError::Config(format!(
                "requested {count} samples from a dataset of {}",
                self.len()
            )));
        }
        Ok(Self {
            n: self.n,
            samples: self.samples[..count].to_vec(),
        })
    }

    /// `count` distinct samples in a seeded random order, so that prefixes of
    /// the result are themselves unbiased subsets.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Self> {
        if count == 0 || count > self.len() {
            return Err(MeaError::Config(format!(
                "requested {count} samples from a dataset of {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            n: self.n,
            samples: idx[..count]
                .iter()
                .map(|&i| self.samples[i].clone())
                .collect(),
        })
    }

    /// Solves the fine problem for every sample on the current rayon pool.
    /// Results are collected in sample order, so the thread count does not
    /// change the output.
    pub fn label_fem(&mut self, bc: &BoundaryCondition) -> Result<LabelStats> {
        let start = Instant::now();
        let solved: Vec<(ScalarField, f64, usize)> = self
            .samples
            .par_iter()
            .map(|s| {
                let t0 = Instant::now();
                let sys = fem::assemble(&s.k, bc)?;
                let (t, stats) = sys.solve()?;
                Ok((quantize(&t), t0.elapsed().as_secs_f64(), stats.iterations))
            })
            .collect::<Result<_>>()?;
        let solves = solved.len();
        let mut sum = 0.0;
        let mut max_iterations = 0;
        for (s, (t, secs, iters)) in self.samples.iter_mut().zip(solved) {
            s.temperature = Some(t);
            sum += secs;
            max_iterations = max_iterations.max(iters);
        }
        Ok(LabelStats {
            solves,
            total_seconds: start.elapsed().as_secs_f64(),
            mean_solve_seconds: sum / solves as f64,
            max_iterations,
        })
    }

    /// Pairs every labelled sample with its conductivity stack and the coarse
    /// solution from `solver`.
    pub fn training_pairs(&self, solver: &dyn CoarseSolver) -> Result<Vec<TrainingPair>> {
        if self.n != FINE_N {
            return Err(MeaError::invalid(format!(
                "training pairs need {FINE_N}x{FINE_N} samples, dataset has side {}",
                self.n
            )));
        }
        self.samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let target = s.temperature.clone().ok_or_else(|| {
                    MeaError::Precondition(format!("sample {i} has no FEM temperature"))
                })?;
                let stack = build_stack(&s.k, format!("sample-{i}"))?;
                let t11 = solver.solve_coarse(stack.coarsest())?;
                Ok(TrainingPair { t11, stack, target })
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MEAD_MAGIC)?;
        w.write_u32::<LE>(MEAD_VERSION)?;
        w.write_u32::<LE>(self.samples.len() as u32)?;
        w.write_u32::<LE>(self.n as u32)?;
        for s in &self.samples {
            write_f32_values(w, s.k.values())?;
            match &s.temperature {
                Some(t) => {
                    w.write_u8(1)?;
                    write_f32_values(w, t.values())?;
                }
                None => w.write_u8(0)?,
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MEAD_MAGIC {
            return Err(MeaError::format("MEAD", "bad magic"));
        }
        let version = r.read_u32::<LE>().map_err(truncated)?;
        if version != MEAD_VERSION {
            return Err(MeaError::format(
                "MEAD",
                format!("unsupported version {version}"),
            ));
        }
        let count = r.read_u32::<LE>().map_err(truncated)? as usize;
        let n = r.read_u32::<LE>().map_err(truncated)? as usize;
        if count == 0 || !(2..=4096).contains(&n) {
            return Err(MeaError::format(
                "MEAD",
                format!("bad header: {count} samples of side {n}"),
            ));
        }
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let k = ScalarField::new(n, read_f32_values(r, n * n).map_err(truncated)?)?;
            let temperature = match r.read_u8().map_err(truncated)? {
                0 => None,
                1 => Some(ScalarField::new(
                    n,
                    read_f32_values(r, n * n).map_err(truncated)?,
                )?),
                f => {
                    return Err(MeaError::format(
                        "MEAD",
                        format!("sample {i} has flag byte {f}"),
                    ))
                }
            };
            samples.push(DatasetSample { k, temperature });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(MeaError::format("MEAD", "trailing bytes after last sample"));
        }
        Ok(Self { n, samples })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.len() * (self.n * self.n * 8 + 1));
        self.write_to(&mut buf)
            .expect("writing to memory cannot fail");
        buf
    }

    /// Hex SHA-256 of the serialized container.
    pub fn hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn truncated(e: std::io::Error) -> MeaError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        MeaError::format("MEAD", "truncated file")
    } else {
        MeaError::Io(e)
    }
}

/// Sidecar written next to a `MEAD` file as `<name>.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sample_count: usize,
    pub n: usize,
    pub labeled: bool,
    pub k_in: f64,
    pub k_out: f64,
    pub discarded: usize,
    pub dataset_hash: String,
    /// Absent for datasets not produced by the sweep generator.
    pub sweep: Option<SweepConfig>,
}

impl Manifest {
    pub fn describe(dataset: &Dataset, sweep: Option<&SweepConfig>, discarded: usize) -> Self {
        let (k_in, k_out) = match sweep {
            Some(s) => (s.k_in, s.k_out),
            None => dataset
                .conductivities()
                .fold((f64::INFINITY, 0.0f64), |acc, k| {
                    (acc.0.min(k.min()), acc.1.max(k.max()))
                }),
        };
        Self {
            sample_count: dataset.len(),
            n: dataset.n(),
            labeled: dataset.is_labeled(),
            k_in,
            k_out,
            discarded,
            dataset_hash: dataset.hash(),
            sweep: sweep.cloned(),
        }
    }

    pub fn path_for(dataset_path: impl AsRef<Path>) -> PathBuf {
        dataset_path.as_ref().with_extension("toml")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| MeaError::format("manifest", e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| MeaError::format("manifest", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microgen::two_slab;

    fn small() -> Dataset {
        let a = two_slab(11, 1.0, 0.1).unwrap();
        let b = two_slab(11, 0.1, 1.0).unwrap();
        Dataset::from_fields(vec![a, b]).unwrap()
    }

    #[test]
    fn round_trip_with_and_without_labels() {
        let mut d = small();
        let bytes = d.to_bytes();
        assert_eq!(bytes.len(), 16 + 2 * (121 * 4 + 1));
        assert_eq!(Dataset::read_from(&mut bytes.as_slice()).unwrap(), d);
        d.label_fem(&BoundaryCondition::default()).unwrap();
        assert!(d.is_labeled());
        let bytes = d.to_bytes();
        let back = Dataset::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.hash(), d.hash());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = small().to_bytes();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(Dataset::read_from(&mut bad.as_slice()).is_err());
        let mut flag = bytes.clone();
        flag[16 + 121 * 4] = 7;
        assert!(Dataset::read_from(&mut flag.as_slice()).is_err());
        assert!(Dataset::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Dataset::read_from(&mut long.as_slice()).is_err());
    }

    #[test]
    fn seeded_subsample() {
        let fields = (0..10)
            .map(|i| ScalarField::constant(3, 1.0 + i as f64).unwrap())
            .collect();
        let d = Dataset::from_fields(fields).unwrap();
        let a = d.sample(4, 9).unwrap();
        assert_eq!(a, d.sample(4, 9).unwrap());
        assert_eq!(a.len(), 4);
        let mut seen: Vec<f64> = a.conductivities().map(|k| k.get(0, 0)).collect();
        seen.dedup();
        assert_eq!(seen.len(), 4);
        assert!(d.sample(11, 0).is_err());
    }

    #[test]
    fn pairs_need_labels() {
        let d = Dataset::from_fields(vec![two_slab(101, 1.0, 0.1).unwrap()]).unwrap();
        let solver = crate::fol::FemCoarseSolver::default();
        assert!(matches!(
            d.training_pairs(&solver),
            Err(MeaError::Precondition(_))
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let d = small();
        let m = Manifest::describe(&d, Some(&SweepConfig::default()), 3);
        let text = toml::to_string_pretty(&m).unwrap();
        assert_eq!(toml::from_str::<Manifest>(&text).unwrap(), m);
        let plain = Manifest::describe(&d, None, 0);
        assert_eq!((plain.k_in, plain.k_out), (0.1f32 as f64, 1.0));
    }
}
