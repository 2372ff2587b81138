//! Difference maps between two embedding matrices and region-of-interest
//! selection by quantile threshold.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::KernelError;

/// Per-token Euclidean distances between two equal-shape embedding matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffMap {
    pub distances: Vec<f64>,
    /// Optional (height, width) mapping tokens to an image patch grid.
    pub grid_shape: Option<(usize, usize)>,
}

/// Row-wise Euclidean distance between corresponding tokens.
pub fn diff_map(e_in: &Matrix, e_out: &Matrix) -> Result<DiffMap, KernelError> {
    if !e_in.same_shape(e_out) {
        return Err(KernelError::Shape(format!(
            "diff_map shape mismatch: {}x{} vs {}x{}",
            e_in.rows(),
            e_in.cols(),
            e_out.rows(),
            e_out.cols()
        )));
    }
    let distances = (0..e_in.rows())
        .map(|r| {
            e_in.row(r)
                .iter()
                .zip(e_out.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(DiffMap {
        distances,
        grid_shape: None,
    })
}

/// Nearest-rank quantile: the value at 1-based rank ceil(q * n) of the
/// ascending sort.
fn quantile_threshold(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Token indices whose distance reaches the q-quantile. Zero-distance tokens
/// are never of interest, so an all-zero map yields the empty set; otherwise
/// the result is non-empty and threshold ties are all included.
pub fn roi(map: &DiffMap, q: f64) -> Result<Vec<usize>, KernelError> {
    if !(0.0 < q && q < 1.0) {
        return Err(KernelError::Shape(format!("quantile {q} outside (0, 1)")));
    }
    if map.distances.is_empty() {
        return Err(KernelError::Shape("empty difference map".into()));
    }
    if map.distances.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(KernelError::NonFinite {
            locus: "difference map".into(),
        });
    }
    if map.distances.iter().all(|d| *d == 0.0) {
        return Ok(Vec::new());
    }
    let threshold = quantile_threshold(&map.distances, q);
    Ok(map
        .distances
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0 && **d >= threshold)
        .map(|(i, _)| i)
        .collect())
}

/// Writes the map as a binary PGM heat image, 8-bit, max distance at white.
/// Without a grid shape the tokens form a single row.
pub fn write_pgm(map: &DiffMap, path: &Path) -> Result<(), KernelError> {
    let (h, w) = map.grid_shape.unwrap_or((1, map.distances.len()));
    if h * w != map.distances.len() {
        return Err(KernelError::Shape(format!(
            "grid {h}x{w} does not cover {} tokens",
            map.distances.len()
        )));
    }
    let max = map.distances.iter().cloned().fold(0.0f64, f64::max);
    let mut out = fs::File::create(path)?;
    write!(out, "P5\n{w} {h}\n255\n")?;
    let pixels: Vec<u8> = map
        .distances
        .iter()
        .map(|d| {
            if max == 0.0 {
                0
            } else {
                ((d / max) * 255.0).round() as u8
            }
        })
        .collect();
    out.write_all(&pixels)?;
    Ok(())
}
