//! Binary PPM (P6) renderings of fields.
//!
//! Values are mapped linearly from the field's own `[min, max]` onto a
//! 256-entry colormap built by linear interpolation between five anchor
//! colours of the viridis palette: #440154, #3B528B, #21908C, #5DC963,
//! #FDE725. Luminance increases monotonically along the map.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{MeaError, Result};
use crate::field::ScalarField;

const ANCHORS: [[u8; 3]; 5] = [
    [0x44, 0x01, 0x54],
    [0x3b, 0x52, 0x8b],
    [0x21, 0x90, 0x8c],
    [0x5d, 0xc9, 0x63],
    [0xfd, 0xe7, 0x25],
];

pub fn colormap() -> [[u8; 3]; 256] {
    let mut map = [[0u8; 3]; 256];
    for (i, entry) in map.iter_mut().enumerate() {
        let t = i as f64 / 255.0 * (ANCHORS.len() - 1) as f64;
        let k = (t.floor() as usize).min(ANCHORS.len() - 2);
        let f = t - k as f64;
        for c in 0..3 {
            let (a, b) = (ANCHORS[k][c] as f64, ANCHORS[k + 1][c] as f64);
            entry[c] = (a + (b - a) * f).round() as u8;
        }
    }
    map
}

/// Colormap index per node; a constant field maps to index 0.
pub fn color_indices(field: &ScalarField) -> Vec<u8> {
    let (lo, hi) = (field.min(), field.max());
    let span = hi - lo;
    field
        .values()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// The encoded P6 image, row 0 at the top.
pub fn encode_ppm(field: &ScalarField) -> Vec<u8> {
    let n = field.n();
    let map = colormap();
    let mut out = format!("P6\n{n} {n}\n255\n").into_bytes();
    out.reserve(3 * n * n);
    for i in color_indices(field) {
        out.extend_from_slice(&map[i as usize]);
    }
    out
}

pub fn render_heatmap(field: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_ppm(field))?;
    w.flush()?;
    Ok(())
}

/// Heatmap of `|pred − truth|`.
pub fn render_error_map(
    pred: &ScalarField,
    truth: &ScalarField,
    path: impl AsRef<Path>,
) -> Result<()> {
    if pred.n() != truth.n() {
        return Err(MeaError::invalid(format!(
            "resolution mismatch: prediction {} vs truth {}",
            pred.n(),
            truth.n()
        )));
    }
    let err = ScalarField::new(
        pred.n(),
        pred.values()
            .iter()
            .zip(truth.values())
            .map(|(p, t)| (p - t).abs())
            .collect(),
    )?;
    render_heatmap(&err, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn luminance(c: [u8; 3]) -> f64 {
        0.2126 * c[0] as f64 + 0.7152 * c[1] as f64 + 0.0722 * c[2] as f64
    }

    #[test]
    fn colormap_is_monotone_in_luminance() {
        let map = colormap();
        assert_eq!(map[0], ANCHORS[0]);
        assert_eq!(map[255], ANCHORS[4]);
        // per-channel rounding can dip by a fraction of one level
        assert!(map
            .windows(2)
            .all(|w| luminance(w[1]) >= luminance(w[0]) - 0.25));
    }

    #[test]
    fn constant_field_is_one_colour() {
        let img = encode_ppm(&ScalarField::constant(101, 0.3).unwrap());
        let header = b"P6\n101 101\n255\n";
        assert_eq!(header.len(), 15);
        assert_eq!(&img[..15], header);
        assert_eq!(img.len(), 15 + 3 * 101 * 101);
        assert!(img[15..].chunks(3).all(|p| p == img[15..18].to_vec()));
    }

    #[test]
    fn ramp_gives_horizontal_gradient() {
        let f = ScalarField::from_fn(101, |x, _| x).unwrap();
        let idx = color_indices(&f);
        for r in 0..101 {
            let row = &idx[r * 101..(r + 1) * 101];
            assert_eq!(row, &idx[..101]);
            assert!(row.windows(2).all(|w| w[1] >= w[0]));
        }
        assert_eq!((idx[0], idx[100]), (0, 255));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let f = ScalarField::constant(3, 1.0).unwrap();
        assert!(matches!(
            render_heatmap(&f, "/nonexistent-dir/x.ppm"),
            Err(MeaError::Io(_))
        ));
    }
}
