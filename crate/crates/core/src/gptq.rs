//! GPTQ column-by-column quantization with Hessian-based error compensation.
//!
//! Each row is processed independently. After column `c` is rounded onto its
//! group's grid, the scaled error is pushed into the not-yet-quantized columns
//! through row `c` of the upper Cholesky factor of `H^-1`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{row_vec, symmetrize};
use crate::quantizer::{dequantize_value, quantize_value, GroupGrid, QuantizedLayer};
use crate::statistics::LayerStats;

/// Column processing order. Only natural order is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColumnOrder {
    #[default]
    Natural,
}

#[derive(Debug, Clone)]
pub struct CompensationContext {
    /// Upper-triangular `U` with `U^T U = H^-1`.
    pub chol_inv: DMatrix<f64>,
    pub order: ColumnOrder,
    // chol_inv transposed, so row `c` of U is a contiguous column here
    lower: DMatrix<f64>,
}

impl CompensationContext {
    pub fn d(&self) -> usize {
        self.chol_inv.nrows()
    }
}

pub fn prepare_compensation(h_damped: &DMatrix<f64>) -> Result<CompensationContext> {
    let d = h_damped.nrows();
    if h_damped.ncols() != d {
        return Err(Error::ShapeMismatch(format!("Hessian is {:?}", h_damped.shape())));
    }
    let chol = h_damped
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Factorization("Hessian is not positive definite".into()))?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    let lower = inv
        .cholesky()
        .ok_or_else(|| Error::Factorization("inverse Hessian is not positive definite".into()))?
        .unpack();
    Ok(CompensationContext {
        chol_inv: lower.transpose(),
        order: ColumnOrder::Natural,
        lower,
    })
}

/// Quantizes row `r` of a layer: `w` is that row's full-precision weights.
pub fn gptq_quantize_row(w: &[f64], grid: &GroupGrid, r: usize, ctx: &CompensationContext) -> Vec<i32> {
    let d = w.len();
    debug_assert_eq!(d, ctx.d());
    let (scales, zeros) = (grid.scales_row(r), grid.zeros_row(r));
    let maxq = grid.max_code();
    let mut work = w.to_vec();
    let mut out = Vec::with_capacity(d);
    for c in 0..d {
        let g = grid.partition.group_of(c);
        let code = quantize_value(work[c], scales[g], zeros[g], maxq);
        out.push(code);
        let u_row = ctx.lower.column(c);
        let err = (work[c] - dequantize_value(code, scales[g], zeros[g])) / u_row[c];
        for j in (c + 1)..d {
            work[j] -= err * u_row[j];
        }
    }
    out
}

/// GPTQ over all rows with a shared compensation context. Row order of the
/// output matches the input regardless of thread scheduling.
pub fn gptq_quantize_with(w: &DMatrix<f64>, grid: &GroupGrid, ctx: &CompensationContext) -> Result<QuantizedLayer> {
    if w.shape() != (grid.n_rows(), grid.partition.d()) || ctx.d() != w.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "weights {:?}, grid ({}, {}), Hessian {}",
            w.shape(),
            grid.n_rows(),
            grid.partition.d(),
            ctx.d()
        )));
    }
    let rows: Vec<Vec<i32>> = (0..w.nrows())
        .into_par_iter()
        .map(|r| gptq_quantize_row(&row_vec(w, r), grid, r, ctx))
        .collect();
    QuantizedLayer::new(rows.concat(), grid.clone())
}

pub fn gptq_quantize_layer(w: &DMatrix<f64>, grid: &GroupGrid, stats: &LayerStats) -> Result<QuantizedLayer> {
    let ctx = prepare_compensation(&stats.damped_hessian())?;
    gptq_quantize_with(w, grid, &ctx)
}
