//! Seeded train/validation splits and per-epoch batch orders.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MeaError, Result};

pub const VALIDATION_FRACTION: f64 = 0.2;

/// Shuffles `0..n` with `seed` and holds out `round(val_fraction * n)`
/// indices (at least one when `n >= 2`).
pub fn train_val_split(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(MeaError::Config(format!(
            "validation fraction {val_fraction} outside [0, 1)"
        )));
    }
    if n < 2 {
        return Err(MeaError::Config(format!(
            "need at least 2 samples to split, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val =
        ((val_fraction * n as f64).round() as usize).clamp(usize::from(val_fraction > 0.0), n - 1);
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

/// Mini-batches of `indices` in a fresh random order; the last batch may be short.
pub fn batches(indices: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_a_seeded_partition() {
        let (t, v) = train_val_split(100, 0.2, 5).unwrap();
        assert_eq!((t.len(), v.len()), (80, 20));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(train_val_split(100, 0.2, 5).unwrap(), (t.clone(), v));
        assert_ne!(train_val_split(100, 0.2, 6).unwrap().0, t);
        assert!(train_val_split(1, 0.2, 0).is_err());
        assert_eq!(train_val_split(3, 0.2, 0).unwrap().1.len(), 1);
    }

    #[test]
    fn batches_cover_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = batches(&[3, 4, 5, 6, 7], 2, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
    }
}
