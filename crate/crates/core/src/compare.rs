//! Side-by-side runs of the four stage combinations on identical inputs.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pipeline::{quantize_model, Method, PipelineConfig, QuantizedModel, RunReport};
use crate::tensor_io::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    /// Per-layer `mean_n ||Q x_n - W x_fp_n||^2` on the calibration set.
    pub layer_output_error: Vec<f64>,
    pub total_output_error: f64,
    /// Per-layer Hessian-form objective (no constant); depends on this
    /// method's own upstream layers, so compare across methods with care.
    pub layer_loss: Vec<f64>,
    pub held_out_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config: PipelineConfig,
    pub rows: Vec<MethodRow>,
    /// Method with the lowest total output error (first in row order on ties).
    pub best: Method,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonCsvRow {
    pub method: Method,
    pub layer: usize,
    pub output_error: f64,
    pub layer_loss: f64,
}

impl ComparisonReport {
    pub fn row(&self, method: Method) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn csv_rows(&self) -> Vec<ComparisonCsvRow> {
        self.rows
            .iter()
            .flat_map(|r| {
                r.layer_output_error
                    .iter()
                    .zip(&r.layer_loss)
                    .enumerate()
                    .map(move |(layer, (&output_error, &layer_loss))| ComparisonCsvRow {
                        method: r.method,
                        layer,
                        output_error,
                        layer_loss,
                    })
            })
            .collect()
    }

    /// Aligned text table: one row per method, one column per layer.
    pub fn render_table(&self) -> String {
        let n_layers = self.rows.first().map_or(0, |r| r.layer_output_error.len());
        let mut header = vec!["method".to_string()];
        header.extend((0..n_layers).map(|k| format!("layer_{k}")));
        header.push("total".into());
        header.push("held_out_mse".into());

        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.method.to_string()];
                cells.extend(r.layer_output_error.iter().map(|e| format!("{e:.6e}")));
                cells.push(format!("{:.6e}", r.total_output_error));
                cells.push(r.held_out_mse.map_or("-".into(), |m| format!("{m:.6e}")));
                cells
            })
            .collect();

        let widths: Vec<usize> = (0..header.len())
            .map(|c| body.iter().map(|row| row[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in std::iter::once(&header).chain(&body) {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, &w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// Runs every [`Method`] with `base`'s other settings. Also returns each run's
/// quantized model and full report, in [`Method::ALL`] order.
pub fn compare_methods(
    model: &Model,
    calibration: &DMatrix<f64>,
    base: &PipelineConfig,
    held_out: Option<&DMatrix<f64>>,
) -> Result<(ComparisonReport, Vec<(QuantizedModel, RunReport)>)> {
    let mut runs = Vec::with_capacity(Method::ALL.len());
    let mut rows = Vec::with_capacity(Method::ALL.len());
    for method in Method::ALL {
        let config = PipelineConfig { method, ..*base };
        log::info!("comparing: running {method}");
        let (quantized, report) = quantize_model(model, calibration, &config, held_out)?;
        rows.push(MethodRow {
            method,
            layer_output_error: report.layers.iter().map(|l| l.output_error).collect(),
            total_output_error: report.total_output_error,
            layer_loss: report.layers.iter().map(|l| l.loss_after_stage2).collect(),
            held_out_mse: report.held_out.as_ref().map(|m| m.final_mse),
        });
        runs.push((quantized, report));
    }
    let best = rows
        .iter()
        .fold(None::<&MethodRow>, |best, r| match best {
            Some(b) if b.total_output_error <= r.total_output_error => Some(b),
            _ => Some(r),
        })
        .map(|r| r.method)
        .expect("four rows");
    Ok((
        ComparisonReport {
            config: *base,
            rows,
            best,
        },
        runs,
    ))
}
