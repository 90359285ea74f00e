//! Coordinate-descent refinement of group scales with the integer codes frozen.
//!
//! For one output channel with codes `v_i = w_int,i - z_i` the objective
//!
//! ```text
//! L(s) = (q - w)^T H (q - w) + 2 w^T R (q - w),    q_i = s_i v_i
//! ```
//!
//! is quadratic in each `s_i`, and its exact coordinate minimizer is
//!
//! ```text
//! s_i* = s_i + (v_i^T H_{i,:} (w - q) - w^T R_{:,i} v_i) / (v_i^T H_ii v_i)
//! ```
//!
//! Without `R` (first layer, no upstream deviation) the second numerator term
//! is dropped.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{bilinear, block_bilinear, col_block_bilinear, quad_form, row_block_bilinear, row_vec};
use crate::quantizer::{effective_int, QuantizedLayer};
use crate::statistics::{GroupPartition, LayerStats};

pub const MIN_SCALE: f64 = 1e-8;
const SKIP_RTOL: f64 = 1e-12;
pub const MONOTONE_RTOL: f64 = 1e-9;

/// One output channel under refinement.
#[derive(Debug, Clone)]
pub struct RefineState<'a> {
    w: Vec<f64>,
    w_int: Vec<i32>,
    zeros: Vec<i32>,
    scales: Vec<f64>,
    q: Vec<f64>,
    v: Vec<f64>,
    stats: &'a LayerStats,
    partition: GroupPartition,
}

impl<'a> RefineState<'a> {
    pub fn new(
        w: Vec<f64>,
        w_int: Vec<i32>,
        zeros: Vec<i32>,
        scales: Vec<f64>,
        stats: &'a LayerStats,
        partition: GroupPartition,
    ) -> Result<Self> {
        let d = partition.d();
        let n_g = partition.n_groups();
        if w.len() != d || w_int.len() != d || zeros.len() != n_g || scales.len() != n_g || stats.d() != d {
            return Err(Error::ShapeMismatch(format!(
                "refine state: d={d}, n_g={n_g}, w={}, w_int={}, zeros={}, scales={}, stats d={}",
                w.len(),
                w_int.len(),
                zeros.len(),
                scales.len(),
                stats.d()
            )));
        }
        if stats.r.as_ref().is_some_and(|r| r.shape() != (d, d)) {
            return Err(Error::ShapeMismatch("deviation correlation has wrong shape".into()));
        }
        let mut v = Vec::with_capacity(d);
        for (i, range) in partition.ranges().enumerate() {
            v.extend(effective_int(&w_int[range], zeros[i]));
        }
        let mut state = Self {
            w,
            w_int,
            zeros,
            scales,
            q: vec![0.0; d],
            v,
            stats,
            partition,
        };
        for i in 0..n_g {
            state.refresh_group(i);
        }
        Ok(state)
    }

    /// State for row `r` of a quantized layer whose full-precision weights are `w`.
    pub fn from_layer(layer: &QuantizedLayer, w: &DMatrix<f64>, r: usize, stats: &'a LayerStats) -> Result<Self> {
        Self::new(
            row_vec(w, r),
            layer.row_ints(r).to_vec(),
            layer.grid.zeros_row(r).to_vec(),
            layer.grid.scales_row(r).to_vec(),
            stats,
            layer.grid.partition,
        )
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn w_int(&self) -> &[i32] {
        &self.w_int
    }

    pub fn zeros(&self) -> &[i32] {
        &self.zeros
    }

    pub fn stats(&self) -> &LayerStats {
        self.stats
    }

    pub fn partition(&self) -> &GroupPartition {
        &self.partition
    }

    pub fn n_groups(&self) -> usize {
        self.partition.n_groups()
    }

    /// Sets `s_i` and recomputes that group's slice of `q`.
    pub fn set_scale(&mut self, i: usize, s: f64) {
        self.scales[i] = s;
        self.refresh_group(i);
    }

    fn refresh_group(&mut self, i: usize) {
        let s = self.scales[i];
        for c in self.partition.range(i) {
            self.q[c] = s * self.v[c];
        }
    }

    /// Recomputes `q` from scratch and checks it against the incremental copy.
    pub fn q_is_consistent(&self) -> bool {
        self.partition.ranges().enumerate().all(|(i, range)| {
            let full = crate::quantizer::dequantize(&self.w_int[range.clone()], self.scales[i], self.zeros[i]);
            full.iter().zip(&self.q[range]).all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }
}

/// `(q - w)^T H (q - w) + 2 w^T R (q - w)`; the R term is omitted when R is absent.
pub fn layer_loss(state: &RefineState) -> f64 {
    let e: Vec<f64> = state.q.iter().zip(&state.w).map(|(q, w)| q - w).collect();
    let mut loss = quad_form(&state.stats.h, &e);
    if let Some(r) = &state.stats.r {
        loss += 2.0 * bilinear(r, &state.w, &e);
    }
    loss
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateOutcome {
    Updated,
    /// The curvature `v_i^T H_ii v_i` was numerically zero.
    Skipped,
    /// The unconstrained minimizer was not positive; `MIN_SCALE` was used instead.
    Clamped { unconstrained: f64 },
}

/// Closed-form exact minimization of `layer_loss` along `s_i`. Returns the new
/// scale and what happened.
pub fn cd_update_scale(state: &mut RefineState, i: usize) -> (f64, UpdateOutcome) {
    let range = state.partition.range(i);
    let off = range.start;
    let v_i = &state.v[range.clone()];
    let h = &state.stats.h;

    let curvature = block_bilinear(h, off, v_i, v_i);
    let v_norm2: f64 = v_i.iter().map(|x| x * x).sum();
    let h_scale = (h.diagonal().sum() / h.nrows() as f64).abs();
    if !(curvature > SKIP_RTOL * v_norm2 * h_scale) {
        return (state.scales[i], UpdateOutcome::Skipped);
    }

    let resid: Vec<f64> = state.w.iter().zip(&state.q).map(|(w, q)| w - q).collect();
    let mut numer = row_block_bilinear(h, off, v_i, &resid);
    if let Some(r) = &state.stats.r {
        numer -= col_block_bilinear(r, off, &state.w, v_i);
    }
    let candidate = state.scales[i] + numer / curvature;

    let (s_new, outcome) = if candidate > MIN_SCALE {
        (candidate, UpdateOutcome::Updated)
    } else {
        (MIN_SCALE, UpdateOutcome::Clamped { unconstrained: candidate })
    };
    state.set_scale(i, s_new);
    debug_assert!(state.q_is_consistent());
    (s_new, outcome)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub loss_before: f64,
    pub loss_after: f64,
    /// `loss(after update) - loss(before update)` for each coordinate step, in order.
    pub deltas: Vec<f64>,
    /// Loss before each coordinate step, aligned with `deltas`.
    pub losses: Vec<f64>,
    pub skips: usize,
    pub clamps: usize,
}

impl RefineReport {
    /// Largest relative loss increase over the individual updates (<= 0 when monotone).
    pub fn max_relative_increase(&self) -> f64 {
        self.deltas
            .iter()
            .zip(&self.losses)
            .map(|(d, l)| d / l.abs().max(f64::MIN_POSITIVE))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_monotone(&self) -> bool {
        self.deltas
            .iter()
            .zip(&self.losses)
            .all(|(d, l)| *d <= MONOTONE_RTOL * l.abs())
    }
}

/// `sweeps` ascending passes of [`cd_update_scale`] over all groups.
pub fn refine_scales(state: &mut RefineState, sweeps: usize) -> Result<RefineReport> {
    if sweeps == 0 {
        return Err(Error::Config("refinement needs at least one sweep".into()));
    }
    let loss_before = layer_loss(state);
    let mut report = RefineReport {
        loss_before,
        ..Default::default()
    };
    let mut current = loss_before;
    for _ in 0..sweeps {
        for i in 0..state.n_groups() {
            let (_, outcome) = cd_update_scale(state, i);
            match outcome {
                UpdateOutcome::Skipped => report.skips += 1,
                UpdateOutcome::Clamped { .. } => report.clamps += 1,
                UpdateOutcome::Updated => {}
            }
            let next = layer_loss(state);
            report.losses.push(current);
            report.deltas.push(next - current);
            current = next;
        }
    }
    report.loss_after = current;
    Ok(report)
}

/// Aggregate of per-row refinement for one layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerRefineReport {
    pub loss_before: f64,
    pub loss_after: f64,
    pub n_updates: usize,
    pub n_skips: usize,
    pub n_clamps: usize,
    pub rows_improved: usize,
    pub max_relative_increase: f64,
    #[serde(skip)]
    pub rows: Vec<RefineReport>,
}

/// Refines every row independently. Only the scales change.
pub fn refine_layer(
    quantized: &QuantizedLayer,
    w: &DMatrix<f64>,
    stats: &LayerStats,
    sweeps: usize,
) -> Result<(QuantizedLayer, LayerRefineReport)> {
    if w.shape() != (quantized.n_rows(), quantized.d()) {
        return Err(Error::ShapeMismatch(format!(
            "weights {:?} vs quantized layer ({}, {})",
            w.shape(),
            quantized.n_rows(),
            quantized.d()
        )));
    }
    let results: Vec<(Vec<f64>, RefineReport)> = (0..quantized.n_rows())
        .into_par_iter()
        .map(|r| {
            let mut state = RefineState::from_layer(quantized, w, r, stats)?;
            let report = refine_scales(&mut state, sweeps)?;
            Ok((state.scales, report))
        })
        .collect::<Result<_>>()?;

    let mut scales = Vec::with_capacity(quantized.grid.scales().len());
    let mut summary = LayerRefineReport {
        max_relative_increase: f64::NEG_INFINITY,
        ..Default::default()
    };
    for (row_scales, report) in results {
        scales.extend(row_scales);
        summary.loss_before += report.loss_before;
        summary.loss_after += report.loss_after;
        summary.n_updates += report.deltas.len();
        summary.n_skips += report.skips;
        summary.n_clamps += report.clamps;
        if report.loss_after < report.loss_before {
            summary.rows_improved += 1;
        }
        summary.max_relative_increase = summary.max_relative_increase.max(report.max_relative_increase());
        summary.rows.push(report);
    }
    let grid = quantized.grid.with_scales(scales)?;
    Ok((QuantizedLayer::new(quantized.w_int().to_vec(), grid)?, summary))
}

/// Sum over rows of `layer_loss` for a quantized layer.
pub fn total_layer_loss(quantized: &QuantizedLayer, w: &DMatrix<f64>, stats: &LayerStats) -> Result<f64> {
    let losses = (0..quantized.n_rows())
        .into_par_iter()
        .map(|r| RefineState::from_layer(quantized, w, r, stats).map(|s| layer_loss(&s)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats(h: DMatrix<f64>, r: Option<DMatrix<f64>>) -> LayerStats {
        LayerStats {
            h,
            r,
            n_samples: 1,
            damp_lambda: 0.0,
        }
    }

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    fn loss_at(state: &RefineState, i: usize, s: f64) -> f64 {
        let mut probe = state.clone();
        probe.set_scale(i, s);
        layer_loss(&probe)
    }

    #[test]
    fn loss_is_zero_at_exact_weights() {
        let p = GroupPartition::new(4, 2).unwrap();
        let st = stats(DMatrix::identity(4, 4), None);
        let w = vec![0.0, 1.0, -1.0, 0.5];
        let state = RefineState::new(w.clone(), vec![1, 2, 0, 3], vec![1, 2], vec![1.0, 0.5], &st, p).unwrap();
        assert_eq!(state.q(), &w[..]);
        assert_eq!(layer_loss(&state), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let st_r = stats(DMatrix::identity(4, 4), Some(DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0))));
        let state = RefineState::new(w, vec![1, 2, 0, 3], vec![1, 2], vec![1.0, 0.5], &st_r, p).unwrap();
        assert_eq!(layer_loss(&state), 0.0);
    }

    #[test]
    fn optimal_state_is_fixed_point() {
        let p = GroupPartition::new(4, 2).unwrap();
        let st = stats(DMatrix::identity(4, 4), None);
        let mut state =
            RefineState::new(vec![0.0, 1.0, -1.0, 0.5], vec![1, 2, 0, 3], vec![1, 2], vec![1.0, 0.5], &st, p).unwrap();
        let (s, outcome) = cd_update_scale(&mut state, 0);
        assert_eq!((s, outcome), (1.0, UpdateOutcome::Updated));
        let report = refine_scales(&mut state, 1).unwrap();
        assert_eq!(state.scales(), &[1.0, 0.5]);
        assert_eq!(report.loss_after - report.loss_before, 0.0);
    }

    #[test]
    fn single_group_least_squares_projection() {
        let p = GroupPartition::new(2, 2).unwrap();
        let st = stats(DMatrix::identity(2, 2), None);
        for start in [0.01, 1.0, 7.5] {
            let mut state = RefineState::new(vec![2.0, 4.0], vec![1, 1], vec![0], vec![start], &st, p).unwrap();
            let (s, _) = cd_update_scale(&mut state, 0);
            assert_eq!(s, 3.0);
        }
    }

    #[test]
    fn update_is_coordinate_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = GroupPartition::new(4, 2).unwrap();
        let h = random_spd(&mut rng, 4);
        let r = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-0.3..0.3));
        let st = stats(h, Some(r));
        let w: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w_int = crate::quantizer::quantize_group(&w, 0.4, 2, 2);
        let mut state = RefineState::new(w, w_int, vec![2, 2], vec![0.4, 0.4], &st, p).unwrap();
        for i in 0..2 {
            let (s, outcome) = cd_update_scale(&mut state, i);
            assert_eq!(outcome, UpdateOutcome::Updated);
            let l = layer_loss(&state);
            let h_step = 1e-6 * s.abs().max(1.0);
            let fd = (loss_at(&state, i, s + h_step) - loss_at(&state, i, s - h_step)) / (2.0 * h_step);
            assert!(fd.abs() <= 1e-4 * l.abs().max(1.0), "derivative {fd}");
            for delta in [-0.1, -1e-3, 1e-3, 0.1] {
                assert!(loss_at(&state, i, s + delta) >= l - 1e-12);
            }
        }
    }

    #[test]
    fn zero_group_is_skipped() {
        let p = GroupPartition::new(4, 2).unwrap();
        let st = stats(DMatrix::identity(4, 4), None);
        // group 0 codes equal its zero-point: v = 0
        let mut state = RefineState::new(vec![0.3, -0.2, 1.0, 2.0], vec![2, 2, 1, 2], vec![2, 0], vec![0.7, 1.0], &st, p).unwrap();
        let (s, outcome) = cd_update_scale(&mut state, 0);
        assert_eq!((s, outcome), (0.7, UpdateOutcome::Skipped));
        let report = refine_scales(&mut state, 1).unwrap();
        assert_eq!(report.skips, 1);
    }

    #[test]
    fn negative_minimizer_is_clamped() {
        let p = GroupPartition::new(2, 2).unwrap();
        let st = stats(DMatrix::identity(2, 2), None);
        // w points against the codes, so the unconstrained optimum is -1
        let mut state = RefineState::new(vec![-1.0, -1.0], vec![1, 1], vec![0], vec![0.5], &st, p).unwrap();
        let before = layer_loss(&state);
        let (s, outcome) = cd_update_scale(&mut state, 0);
        assert_eq!(s, MIN_SCALE);
        assert!(matches!(outcome, UpdateOutcome::Clamped { unconstrained } if (unconstrained + 1.0).abs() < 1e-12));
        assert!(layer_loss(&state) <= before);
    }

    #[test]
    fn sweeps_are_monotone_and_diminishing() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let d = 64;
        let p = GroupPartition::new(d, 16).unwrap();
        let x = DMatrix::from_fn(256, d, |_, c| rng.gen_range(-1.0..1.0) * (1.0 + (c % 7) as f64) + rng.gen_range(-0.2..0.2));
        let st = stats(crate::statistics::estimate_hessian(&x).unwrap(), None);
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w_int: Vec<i32> = (0..d).map(|_| rng.gen_range(0..4)).collect();
        let mut state = RefineState::new(w, w_int, vec![1; 4], vec![0.3; 4], &st, p).unwrap();
        let report = refine_scales(&mut state, 2).unwrap();
        assert!(report.is_monotone());
        let first: f64 = report.deltas[..4].iter().sum();
        let second: f64 = report.deltas[4..].iter().sum();
        assert!(first <= 0.0 && second <= 0.0);
        assert!(second.abs() <= first.abs());
    }

    #[test]
    fn refine_layer_preserves_codes_and_zeros() {
        use crate::quantizer::GroupGrid;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = GroupPartition::new(8, 4).unwrap();
        let w = DMatrix::from_fn(3, 8, |_, _| rng.gen_range(-1.0..1.0));
        let grid = crate::stage1::init_layer_scales_identity(&w, &p, 2, false, &Default::default()).unwrap();
        let layer = crate::quantizer::rtn_quantize_layer(&w, &grid).unwrap();
        let h = random_spd(&mut rng, 8);
        let absent = stats(h.clone(), None);
        let zero_r = stats(h, Some(DMatrix::zeros(8, 8)));
        let (a, rep) = refine_layer(&layer, &w, &absent, 1).unwrap();
        let (b, _) = refine_layer(&layer, &w, &zero_r, 1).unwrap();
        assert_eq!(a.w_int(), layer.w_int());
        assert_eq!(a.grid.zeros(), layer.grid.zeros());
        let bits = |g: &GroupGrid| g.scales().iter().map(|s| s.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.grid), bits(&b.grid));
        assert!(rep.loss_after <= rep.loss_before);
        assert_eq!(rep.n_updates, 6);
    }
}
