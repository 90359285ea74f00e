//! Uniform affine group quantization: `q = s * (w_int - z)` with
//! `w_int = clamp(round(w / s) + z, 0, 2^b - 1)`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statistics::GroupPartition;
use crate::tensor_io::{load_tensor, save_tensor, QuantizedFiles, Tensor};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;
pub const DEGENERATE_EPS: f64 = 1e-8;

/// Largest integer code, `2^b - 1`.
pub fn max_code(bits: u32) -> i32 {
    debug_assert!((1..=30).contains(&bits));
    (1i32 << bits) - 1
}

pub fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::Config(format!(
            "bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}"
        )));
    }
    Ok(())
}

/// Min-max scale shrunk by `beta`, and the matching zero-point.
///
/// The range is widened to contain 0 so that `z` always lies in `[0, 2^b - 1]`
/// without clipping one-signed segments. A constant segment gets `s = max(|w|, eps) / (2^b - 1)` with `z` placed so
/// the constant dequantizes exactly.
pub fn scale_from_beta(w_seg: &[f64], beta: f64, bits: u32) -> (f64, i32) {
    debug_assert!(!w_seg.is_empty());
    let maxq = max_code(bits);
    let (lo, hi) = w_seg
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if hi == lo {
        let s = lo.abs().max(DEGENERATE_EPS) / f64::from(maxq);
        let z = if lo < 0.0 { maxq } else { 0 };
        return (s, z);
    }
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let s = beta * (hi - lo) / f64::from(maxq);
    let z = (-(beta * lo / s).round_ties_even()).clamp(0.0, f64::from(maxq)) as i32;
    (s, z)
}

#[inline]
pub fn quantize_value(w: f64, s: f64, z: i32, maxq: i32) -> i32 {
    ((w / s).round_ties_even() + f64::from(z)).clamp(0.0, f64::from(maxq)) as i32
}

#[inline]
pub fn dequantize_value(w_int: i32, s: f64, z: i32) -> f64 {
    s * f64::from(w_int - z)
}

pub fn quantize_group(w_seg: &[f64], s: f64, z: i32, bits: u32) -> Vec<i32> {
    let maxq = max_code(bits);
    w_seg.iter().map(|&w| quantize_value(w, s, z, maxq)).collect()
}

pub fn dequantize(w_int: &[i32], s: f64, z: i32) -> Vec<f64> {
    w_int.iter().map(|&q| dequantize_value(q, s, z)).collect()
}

/// `v = w_int - z`, the integer direction that `s` multiplies.
pub fn effective_int(w_int: &[i32], z: i32) -> Vec<f64> {
    w_int.iter().map(|&q| f64::from(q - z)).collect()
}

/// Per-(row, group) scales and zero-points for a weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGrid {
    pub bits: u32,
    pub partition: GroupPartition,
    pub symmetric: bool,
    n_rows: usize,
    scales: Vec<f64>,
    zeros: Vec<i32>,
}

impl GroupGrid {
    pub fn new(
        bits: u32,
        partition: GroupPartition,
        symmetric: bool,
        n_rows: usize,
        scales: Vec<f64>,
        zeros: Vec<i32>,
    ) -> Result<Self> {
        check_bits(bits)?;
        let n_g = partition.n_groups();
        if scales.len() != n_rows * n_g || zeros.len() != n_rows * n_g {
            return Err(Error::ShapeMismatch(format!(
                "grid for {n_rows} rows x {n_g} groups got {} scales and {} zeros",
                scales.len(),
                zeros.len()
            )));
        }
        if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidTensor(format!("non-positive scale {s}")));
        }
        let maxq = max_code(bits);
        if let Some(z) = zeros.iter().find(|z| !(0..=maxq).contains(*z)) {
            return Err(Error::InvalidTensor(format!("zero-point {z} outside [0, {maxq}]")));
        }
        Ok(Self {
            bits,
            partition,
            symmetric,
            n_rows,
            scales,
            zeros,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_groups(&self) -> usize {
        self.partition.n_groups()
    }

    pub fn max_code(&self) -> i32 {
        max_code(self.bits)
    }

    pub fn scales_row(&self, r: usize) -> &[f64] {
        let n_g = self.n_groups();
        &self.scales[r * n_g..(r + 1) * n_g]
    }

    pub fn zeros_row(&self, r: usize) -> &[i32] {
        let n_g = self.n_groups();
        &self.zeros[r * n_g..(r + 1) * n_g]
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zeros(&self) -> &[i32] {
        &self.zeros
    }

    /// Same zeros and partition, new scales.
    pub fn with_scales(&self, scales: Vec<f64>) -> Result<Self> {
        Self::new(
            self.bits,
            self.partition,
            self.symmetric,
            self.n_rows,
            scales,
            self.zeros.clone(),
        )
    }

    /// Round-to-nearest codes for one row on this grid.
    pub fn quantize_row(&self, r: usize, w: &[f64]) -> Vec<i32> {
        let (s, z) = (self.scales_row(r), self.zeros_row(r));
        let maxq = self.max_code();
        w.iter()
            .enumerate()
            .map(|(c, &x)| {
                let g = self.partition.group_of(c);
                quantize_value(x, s[g], z[g], maxq)
            })
            .collect()
    }

    pub fn dequantize_row(&self, r: usize, w_int: &[i32]) -> Vec<f64> {
        let (s, z) = (self.scales_row(r), self.zeros_row(r));
        w_int
            .iter()
            .enumerate()
            .map(|(c, &q)| {
                let g = self.partition.group_of(c);
                dequantize_value(q, s[g], z[g])
            })
            .collect()
    }
}

/// Frozen integer codes plus the grid that maps them back to reals.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    w_int: Vec<i32>,
    pub grid: GroupGrid,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerSidecar {
    bits: u32,
    group_size: usize,
    symmetric: bool,
}

impl QuantizedLayer {
    pub fn new(w_int: Vec<i32>, grid: GroupGrid) -> Result<Self> {
        let d = grid.partition.d();
        if w_int.len() != grid.n_rows() * d {
            return Err(Error::ShapeMismatch(format!(
                "{} integer codes for a {} x {d} layer",
                w_int.len(),
                grid.n_rows()
            )));
        }
        let maxq = grid.max_code();
        if let Some(q) = w_int.iter().find(|q| !(0..=maxq).contains(*q)) {
            return Err(Error::InvalidTensor(format!("code {q} outside [0, {maxq}]")));
        }
        Ok(Self { w_int, grid })
    }

    pub fn n_rows(&self) -> usize {
        self.grid.n_rows()
    }

    pub fn d(&self) -> usize {
        self.grid.partition.d()
    }

    pub fn w_int(&self) -> &[i32] {
        &self.w_int
    }

    pub fn row_ints(&self, r: usize) -> &[i32] {
        let d = self.d();
        &self.w_int[r * d..(r + 1) * d]
    }

    pub fn dequantize_row(&self, r: usize) -> Vec<f64> {
        self.grid.dequantize_row(r, self.row_ints(r))
    }

    /// Dequantized weight matrix (n_rows x d).
    pub fn dequantize(&self) -> DMatrix<f64> {
        let (n, d) = (self.n_rows(), self.d());
        let mut out = DMatrix::zeros(n, d);
        for r in 0..n {
            for (c, v) in self.dequantize_row(r).into_iter().enumerate() {
                out[(r, c)] = v;
            }
        }
        out
    }

    pub fn files(stem: &str) -> QuantizedFiles {
        QuantizedFiles {
            w_int_path: format!("{stem}.wint.qt"),
            scales_path: format!("{stem}.scales.qt"),
            zeros_path: format!("{stem}.zeros.qt"),
            sidecar_path: format!("{stem}.json"),
        }
    }

    /// Persists codes (i32), scales (f32), zeros (i32) and the JSON sidecar.
    pub fn save(&self, dir: impl AsRef<Path>, files: &QuantizedFiles) -> Result<()> {
        let dir = dir.as_ref();
        let (n, d, n_g) = (self.n_rows(), self.d(), self.grid.n_groups());
        save_tensor(
            &Tensor::from_int_matrix(n, d, self.w_int.clone())?,
            dir.join(&files.w_int_path),
        )?;
        let scales_f32 = self.grid.scales.iter().map(|&s| s as f32).collect();
        save_tensor(
            &Tensor::from_f32(vec![n, n_g], scales_f32)?,
            dir.join(&files.scales_path),
        )?;
        save_tensor(
            &Tensor::from_int_matrix(n, n_g, self.grid.zeros.clone())?,
            dir.join(&files.zeros_path),
        )?;
        let sidecar = LayerSidecar {
            bits: self.grid.bits,
            group_size: self.grid.partition.group_size(),
            symmetric: self.grid.symmetric,
        };
        let path = dir.join(&files.sidecar_path);
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>, files: &QuantizedFiles) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(&files.sidecar_path);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: LayerSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;

        let w_int_t = load_tensor(dir.join(&files.w_int_path))?;
        let [n, d] = w_int_t.shape()[..] else {
            return Err(Error::ShapeMismatch("integer weights must be 2-D".into()));
        };
        let w_int = w_int_t
            .as_i32()
            .ok_or_else(|| Error::InvalidTensor("integer weights must be i32".into()))?
            .to_vec();
        let scales = load_tensor(dir.join(&files.scales_path))?.to_f64_vec();
        let zeros = load_tensor(dir.join(&files.zeros_path))?
            .as_i32()
            .ok_or_else(|| Error::InvalidTensor("zero-points must be i32".into()))?
            .to_vec();
        let partition = GroupPartition::new(d, sidecar.group_size)?;
        let grid = GroupGrid::new(sidecar.bits, partition, sidecar.symmetric, n, scales, zeros)?;
        Self::new(w_int, grid)
    }
}

/// Independent round-to-nearest on `grid` for every row of `w`.
pub fn rtn_quantize_layer(w: &DMatrix<f64>, grid: &GroupGrid) -> Result<QuantizedLayer> {
    if w.shape() != (grid.n_rows(), grid.partition.d()) {
        return Err(Error::ShapeMismatch(format!(
            "weights {:?} vs grid ({}, {})",
            w.shape(),
            grid.n_rows(),
            grid.partition.d()
        )));
    }
    let mut w_int = Vec::with_capacity(w.len());
    for r in 0..w.nrows() {
        w_int.extend(grid.quantize_row(r, &crate::linalg::row_vec(w, r)));
    }
    QuantizedLayer::new(w_int, grid.clone())
}
