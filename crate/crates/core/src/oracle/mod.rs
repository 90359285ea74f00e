//! Brute-force reference computations used to check the fast paths.
//!
//! Nothing here is on the quantization path. The scan minimizers evaluate
//! [`layer_loss`] directly on a lattice of scales, the sample loss works from
//! raw activations instead of second-moment statistics, and the integer search
//! enumerates every code assignment.

pub mod suite;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::quad_form;
use crate::quantizer::GroupGrid;
use crate::stage2::{layer_loss, RefineState, MIN_SCALE};

pub const EXHAUSTIVE_STATE_CAP: u64 = 1_000_000;
pub const DEFAULT_SCAN_RESOLUTION: f64 = 1e-6;

// lattice coarsening factor between levels of the hierarchical scan
const LEVEL_FACTOR: i64 = 16;

/// A lattice `center + k * resolution`, `|k * resolution| <= radius`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanSpec {
    pub center: f64,
    pub radius: f64,
    pub resolution: f64,
}

impl ScanSpec {
    /// Default lattice around the current scale: radius `2 max(1, |s|)`, step `1e-6`.
    pub fn around(s: f64) -> Self {
        Self {
            center: s,
            radius: 2.0 * s.abs().max(1.0),
            resolution: DEFAULT_SCAN_RESOLUTION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) || !(self.radius >= self.resolution) || !self.center.is_finite() {
            return Err(Error::Config(format!(
                "scan needs resolution > 0 and radius >= resolution, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Admissible lattice indices. Points below `MIN_SCALE` are outside the
    /// feasible domain of a scale and are dropped.
    fn index_range(&self) -> (i64, i64) {
        let k_max = (self.radius / self.resolution).floor() as i64;
        let k_feasible = ((MIN_SCALE - self.center) / self.resolution).ceil() as i64;
        (k_feasible.max(-k_max).min(k_max), k_max)
    }

    fn point(&self, k: i64) -> f64 {
        self.center + k as f64 * self.resolution
    }
}

fn loss_at(probe: &mut RefineState, i: usize, s: f64) -> f64 {
    probe.set_scale(i, s);
    layer_loss(probe)
}

/// Lattice argmin over the given indices. A function that is exactly flat over
/// the lattice yields `None`; otherwise ties go to the smallest index.
fn argmin_over(probe: &mut RefineState, i: usize, spec: &ScanSpec, ks: impl Iterator<Item = i64>) -> Option<i64> {
    let mut best: Option<(i64, f64)> = None;
    let mut first = None;
    let mut flat = true;
    for k in ks {
        let l = loss_at(probe, i, spec.point(k));
        match first {
            None => first = Some(l),
            Some(f) if f != l => flat = false,
            _ => {}
        }
        if best.map_or(true, |(_, b)| l < b) {
            best = Some((k, l));
        }
    }
    if flat {
        None
    } else {
        best.map(|(k, _)| k)
    }
}

/// Evaluates `layer_loss` at every lattice point along `s_i`, others fixed.
/// Returns the argmin, ties to the smallest scale, or the center when the loss
/// is identical at every point.
pub fn dense_scan_minimize_scale(state: &RefineState, i: usize, spec: &ScanSpec) -> Result<f64> {
    spec.validate()?;
    let mut probe = state.clone();
    let (lo, hi) = spec.index_range();
    Ok(argmin_over(&mut probe, i, spec, lo..=hi).map_or(spec.center, |k| spec.point(k)))
}

/// Same answer as [`dense_scan_minimize_scale`] for losses that are convex
/// along `s_i` (true of `layer_loss`, a quadratic with curvature
/// `v_i^T H_ii v_i >= 0`), but searches the lattice coarse to fine: the
/// minimizer on a lattice of step `h` is within one coarse step of the
/// minimizer on the coarser lattice.
pub fn scan_minimize_scale(state: &RefineState, i: usize, spec: &ScanSpec) -> Result<f64> {
    spec.validate()?;
    let mut probe = state.clone();
    let (lo, hi) = spec.index_range();

    let mut step = 1i64;
    while (hi - lo) / step > 4 * LEVEL_FACTOR {
        step *= LEVEL_FACTOR;
    }
    let (mut win_lo, mut win_hi) = (lo, hi);
    let mut top = true;
    loop {
        let first = win_lo.div_euclid(step) * step;
        let mut ks: Vec<i64> = (0..)
            .map(|j| first + j * step)
            .take_while(|&k| k <= win_hi)
            .filter(|&k| k >= win_lo)
            .collect();
        // always keep the window ends so the boundary minimizer is reachable
        if ks.first() != Some(&win_lo) {
            ks.insert(0, win_lo);
        }
        if ks.last() != Some(&win_hi) {
            ks.push(win_hi);
        }
        let best = match argmin_over(&mut probe, i, spec, ks.into_iter()) {
            Some(k) => k,
            // a convex function equal at three or more points is constant
            None if top => return Ok(spec.center),
            None => win_lo,
        };
        if step == 1 {
            return Ok(spec.point(best));
        }
        win_lo = (best - step).max(lo);
        win_hi = (best + step).min(hi);
        step /= LEVEL_FACTOR;
        top = false;
    }
}

/// `mean_n (q . x_n - w . x_fp_n)^2` with samples as rows of `x` and `x_fp`.
pub fn sample_loss(q: &[f64], w: &[f64], x: &DMatrix<f64>, x_fp: &DMatrix<f64>) -> Result<f64> {
    check_samples(q.len(), w.len(), x, x_fp)?;
    let n = x.nrows();
    let total: f64 = (0..n)
        .map(|r| {
            let a: f64 = (0..q.len()).map(|c| q[c] * x[(r, c)]).sum();
            let b: f64 = (0..w.len()).map(|c| w[c] * x_fp[(r, c)]).sum();
            (a - b) * (a - b)
        })
        .sum();
    Ok(total / n as f64)
}

/// `mean_n (w . (x_n - x_fp_n))^2`, the part of [`sample_loss`] independent of `q`.
pub fn deviation_constant(w: &[f64], x: &DMatrix<f64>, x_fp: &DMatrix<f64>) -> Result<f64> {
    check_samples(w.len(), w.len(), x, x_fp)?;
    let n = x.nrows();
    let total: f64 = (0..n)
        .map(|r| {
            let t: f64 = (0..w.len()).map(|c| w[c] * (x[(r, c)] - x_fp[(r, c)])).sum();
            t * t
        })
        .sum();
    Ok(total / n as f64)
}

fn check_samples(q: usize, w: usize, x: &DMatrix<f64>, x_fp: &DMatrix<f64>) -> Result<()> {
    if x.shape() != x_fp.shape() || x.ncols() != q || w != q {
        return Err(Error::ShapeMismatch(format!(
            "q {q}, w {w}, x {:?}, x_fp {:?}",
            x.shape(),
            x_fp.shape()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::EmptyCalibration);
    }
    Ok(())
}

/// Minimizes `(q - w)^T H (q - w)` over every code assignment for row `r` of
/// `grid`. Returns the lexicographically first minimizer and its loss.
pub fn exhaustive_best_integers(w: &[f64], grid: &GroupGrid, r: usize, h: &DMatrix<f64>) -> Result<(Vec<i32>, f64)> {
    let d = w.len();
    if d != grid.partition.d() || h.shape() != (d, d) {
        return Err(Error::ShapeMismatch(format!(
            "w has {d} entries, grid {} columns, H {:?}",
            grid.partition.d(),
            h.shape()
        )));
    }
    if r >= grid.n_rows() {
        return Err(Error::IndexOutOfRange(format!("row {r} of {}", grid.n_rows())));
    }
    let levels = grid.max_code() as u64 + 1;
    let states = (levels as f64).powi(d as i32);
    if states > EXHAUSTIVE_STATE_CAP as f64 {
        return Err(Error::InstanceTooLarge {
            states,
            cap: EXHAUSTIVE_STATE_CAP,
        });
    }

    let maxq = grid.max_code();
    let mut codes = vec![0i32; d];
    let mut best = (codes.clone(), f64::INFINITY);
    loop {
        let e: Vec<f64> = grid
            .dequantize_row(r, &codes)
            .iter()
            .zip(w)
            .map(|(q, w)| q - w)
            .collect();
        let loss = quad_form(h, &e);
        if loss < best.1 {
            best = (codes.clone(), loss);
        }
        // odometer with the last column varying fastest
        let mut c = d;
        loop {
            if c == 0 {
                return Ok(best);
            }
            c -= 1;
            if codes[c] < maxq {
                codes[c] += 1;
                break;
            }
            codes[c] = 0;
        }
    }
}
