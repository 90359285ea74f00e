//! Whole-model quantization, layer by layer.
//!
//! For layer `k` the calibration set is pushed through both the full-precision
//! prefix (giving `x_fp`) and the already-quantized prefix (giving `x`). The
//! Hessian comes from `x`, the deviation correlation from `(x, x_fp)`, and the
//! next layer sees the output of the quantized layer `k`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gptq::{gptq_quantize_with, prepare_compensation};
use crate::quantizer::{check_bits, QuantizedLayer};
use crate::stage1::{init_layer_scales, init_layer_scales_identity, GridSearchSpec};
use crate::stage2::{refine_layer, total_layer_loss, LayerRefineReport};
use crate::statistics::{GroupPartition, LayerStats, DEFAULT_DAMP_FRAC};
use crate::tensor_io::{Activation, Model, ModelManifest, MANIFEST_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GptqDefault,
    TwoStage,
    Stage1Only,
    Stage2Only,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::GptqDefault,
        Method::Stage1Only,
        Method::Stage2Only,
        Method::TwoStage,
    ];

    pub fn stage1(self) -> bool {
        matches!(self, Method::TwoStage | Method::Stage1Only)
    }

    pub fn stage2(self) -> bool {
        matches!(self, Method::TwoStage | Method::Stage2Only)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::GptqDefault => "gptq_default",
            Method::TwoStage => "two_stage",
            Method::Stage1Only => "stage1_only",
            Method::Stage2Only => "stage2_only",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method '{s}' (expected gptq_default, two_stage, stage1_only or stage2_only)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub bits: u32,
    pub group_size: usize,
    pub symmetric: bool,
    pub damp_frac: f64,
    pub grid: GridSearchSpec,
    pub sweeps: usize,
    pub method: Method,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bits: 2,
            group_size: 64,
            symmetric: false,
            damp_frac: DEFAULT_DAMP_FRAC,
            grid: GridSearchSpec::default(),
            sweeps: 1,
            method: Method::TwoStage,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.group_size == 0 {
            return Err(Error::Config("group size must be >= 1".into()));
        }
        if !(self.damp_frac > 0.0) || !self.damp_frac.is_finite() {
            return Err(Error::Config(format!("damping fraction must be > 0, got {}", self.damp_frac)));
        }
        if self.sweeps == 0 {
            return Err(Error::Config("sweeps must be >= 1".into()));
        }
        self.grid.validate()
    }

    pub fn stage1(&self) -> bool {
        self.method.stage1()
    }

    pub fn stage2(&self) -> bool {
        self.method.stage2()
    }
}

/// Per-layer losses. All `loss_*` values are sums over output rows of the
/// Hessian-form objective under this run's statistics (without the constant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    /// GPTQ on the weight-space (H = I) grid.
    pub loss_gptq_grid: f64,
    /// GPTQ on the grid this method uses (equals `loss_gptq_grid` without stage 1).
    pub loss_after_stage1_grid: f64,
    /// Final codes and scales (equals `loss_after_stage1_grid` without stage 2).
    pub loss_after_stage2: f64,
    /// `mean_n ||Q x_n - W x_fp_n||^2` on the calibration set.
    pub output_error: f64,
    /// `mean_n ||W (x_n - x_fp_n)||^2`, the part of `output_error` no choice of `Q` removes.
    pub deviation_constant: f64,
    pub skips: usize,
    pub clamps: usize,
    /// Whether refinement left codes and zero-points bit-identical (absent without stage 2).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codes_frozen: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine: Option<LayerRefineReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean squared error of the final model output, over all elements.
    pub final_mse: f64,
    /// `mean_n ||Q_k x_n - W_k x_fp_n||^2` per layer.
    pub layer_output_error: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stats_s: f64,
    pub stage1_s: f64,
    pub gptq_s: f64,
    pub stage2_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub layers: Vec<StageTiming>,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub layers: Vec<LayerReport>,
    /// Sum of `loss_after_stage2` over layers.
    pub total_layer_loss: f64,
    /// Sum of `output_error` over layers.
    pub total_output_error: f64,
    pub held_out: Option<EvalMetrics>,
    pub timing: Timing,
}

#[derive(Debug, Clone, Serialize)]
pub struct CsvRow {
    pub layer: usize,
    pub method: Method,
    pub loss_gptq_grid: f64,
    pub loss_after_stage1_grid: f64,
    pub loss_after_stage2: f64,
    pub output_error: f64,
    pub deviation_constant: f64,
    pub skips: usize,
    pub clamps: usize,
}

impl RunReport {
    pub fn csv_rows(&self) -> Vec<CsvRow> {
        self.layers
            .iter()
            .map(|l| CsvRow {
                layer: l.index,
                method: self.config.method,
                loss_gptq_grid: l.loss_gptq_grid,
                loss_after_stage1_grid: l.loss_after_stage1_grid,
                loss_after_stage2: l.loss_after_stage2,
                output_error: l.output_error,
                deviation_constant: l.deviation_constant,
                skips: l.skips,
                clamps: l.clamps,
            })
            .collect()
    }

    /// Report as JSON with the `timing` section removed.
    pub fn without_timing(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v.as_object_mut().unwrap().remove("timing");
        v
    }
}

/// A quantized model: the source manifest, one quantized layer per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub manifest: ModelManifest,
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedModel {
    /// Model whose weights are the dequantized matrices.
    pub fn to_dense(&self) -> Result<Model> {
        Model::new(
            self.manifest.clone(),
            self.layers.iter().map(QuantizedLayer::dequantize).collect(),
        )
    }

    /// Writes `manifest.json`, the dequantized weights (f64, under each
    /// layer's `weight_path`) and the integer/scale/zero files.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = self.manifest.clone();
        for (k, (entry, layer)) in manifest.layers.iter_mut().zip(&self.layers).enumerate() {
            let files = QuantizedLayer::files(&format!("layer_{k}"));
            layer.save(dir, &files)?;
            entry.weight_path = format!("layer_{k}.dequant.qt");
            entry.quantized = Some(files);
        }
        let dense = Model::new(manifest, self.layers.iter().map(QuantizedLayer::dequantize).collect())?;
        dense.save(dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = ModelManifest::load(dir.join(MANIFEST_FILE))?;
        let layers = manifest
            .layers
            .iter()
            .enumerate()
            .map(|(k, entry)| {
                let files = entry
                    .quantized
                    .as_ref()
                    .ok_or_else(|| Error::Manifest(format!("layer {k} has no quantized files")))?;
                QuantizedLayer::load(dir, files)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, layers })
    }
}

/// Activations of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `inputs[k]` is what layer `k` receives (N x in_dim).
    pub inputs: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

fn apply_layer(x: &DMatrix<f64>, w: &DMatrix<f64>, act: Activation) -> DMatrix<f64> {
    let mut y = x * w.transpose();
    act.apply_in_place(&mut y);
    y
}

/// Runs `inputs` (N x d_in) through the model and records every layer's input.
pub fn forward(model: &Model, inputs: &DMatrix<f64>) -> Result<ForwardTrace> {
    if inputs.ncols() != model.manifest.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "inputs have {} features, model expects {}",
            inputs.ncols(),
            model.manifest.input_dim()
        )));
    }
    let mut trace = Vec::with_capacity(model.weights.len());
    let mut x = inputs.clone();
    for (w, act) in model.weights.iter().zip(model.activations()) {
        let next = apply_layer(&x, w, act);
        trace.push(x);
        x = next;
    }
    Ok(ForwardTrace {
        inputs: trace,
        output: x,
    })
}

/// `mean_n ||a_n - b_n||^2` over rows.
fn mean_row_sq_dist(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm_squared() / a.nrows() as f64
}

pub fn evaluate(fp: &Model, quantized: &Model, inputs: &DMatrix<f64>) -> Result<EvalMetrics> {
    if fp.manifest.layers.len() != quantized.manifest.layers.len()
        || fp.weights.iter().zip(&quantized.weights).any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::ShapeMismatch("full-precision and quantized models differ in shape".into()));
    }
    if inputs.nrows() == 0 {
        return Err(Error::EmptyCalibration);
    }
    let fp_trace = forward(fp, inputs)?;
    let q_trace = forward(quantized, inputs)?;
    let layer_output_error = (0..fp.weights.len())
        .map(|k| {
            let y_q = &q_trace.inputs[k] * quantized.weights[k].transpose();
            let y_fp = &fp_trace.inputs[k] * fp.weights[k].transpose();
            mean_row_sq_dist(&y_q, &y_fp)
        })
        .collect();
    let final_mse = (&q_trace.output - &fp_trace.output).norm_squared() / q_trace.output.len() as f64;
    Ok(EvalMetrics {
        final_mse,
        layer_output_error,
    })
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn quantize_one_layer(
    k: usize,
    w: &DMatrix<f64>,
    x_q: &DMatrix<f64>,
    x_fp: &DMatrix<f64>,
    config: &PipelineConfig,
    timing: &mut StageTiming,
) -> Result<(QuantizedLayer, LayerReport)> {
    let t = Instant::now();
    // first layer: both streams are the calibration set, so R is left absent
    let stats = LayerStats::from_samples(x_q, (k > 0).then_some(x_fp), config.damp_frac)?;
    let ctx = prepare_compensation(&stats.damped_hessian())?;
    timing.stats_s = secs(t);

    let partition = GroupPartition::new(w.ncols(), config.group_size)?;
    let t = Instant::now();
    let base_grid = init_layer_scales_identity(w, &partition, config.bits, config.symmetric, &config.grid)?;
    let stage1_grid = if config.stage1() {
        Some(init_layer_scales(w, &stats.h, &partition, config.bits, config.symmetric, &config.grid)?)
    } else {
        None
    };
    timing.stage1_s = secs(t);

    let t = Instant::now();
    let base = gptq_quantize_with(w, &base_grid, &ctx)?;
    let gptq_out = match &stage1_grid {
        Some(grid) => gptq_quantize_with(w, grid, &ctx)?,
        None => base.clone(),
    };
    timing.gptq_s = secs(t);

    let loss_gptq_grid = total_layer_loss(&base, w, &stats)?;
    let loss_after_stage1_grid = total_layer_loss(&gptq_out, w, &stats)?;

    let t = Instant::now();
    let (final_layer, refine, codes_frozen) = if config.stage2() {
        let (refined, mut rep) = refine_layer(&gptq_out, w, &stats, config.sweeps)?;
        if rep.n_updates == 0 {
            rep.max_relative_increase = 0.0;
        }
        let frozen = refined.w_int() == gptq_out.w_int() && refined.grid.zeros() == gptq_out.grid.zeros();
        (refined, Some(rep), Some(frozen))
    } else {
        (gptq_out, None, None)
    };
    timing.stage2_s = secs(t);
    // refinement never touches integer codes
    debug_assert!(config.stage1() || final_layer.w_int() == base.w_int());

    let loss_after_stage2 = total_layer_loss(&final_layer, w, &stats)?;
    let q = final_layer.dequantize();
    let y_fp = x_fp * w.transpose();
    let output_error = mean_row_sq_dist(&(x_q * q.transpose()), &y_fp);
    let deviation_constant = mean_row_sq_dist(&(x_q * w.transpose()), &y_fp);

    let report = LayerReport {
        index: k,
        loss_gptq_grid,
        loss_after_stage1_grid,
        loss_after_stage2,
        output_error,
        deviation_constant,
        skips: refine.as_ref().map_or(0, |r| r.n_skips),
        clamps: refine.as_ref().map_or(0, |r| r.n_clamps),
        codes_frozen,
        refine,
    };
    Ok((final_layer, report))
}

/// Quantizes every layer in order. `held_out` inputs, when given, are used for
/// the end-to-end metrics in the report.
pub fn quantize_model(
    model: &Model,
    calibration: &DMatrix<f64>,
    config: &PipelineConfig,
    held_out: Option<&DMatrix<f64>>,
) -> Result<(QuantizedModel, RunReport)> {
    config.validate()?;
    if calibration.nrows() == 0 {
        return Err(Error::EmptyCalibration);
    }
    if calibration.ncols() != model.manifest.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "calibration has {} features, model expects {}",
            calibration.ncols(),
            model.manifest.input_dim()
        )));
    }
    let start = Instant::now();
    let mut x_fp = calibration.clone();
    let mut x_q = calibration.clone();
    let mut layers = Vec::with_capacity(model.weights.len());
    let mut reports = Vec::with_capacity(model.weights.len());
    let mut timing = Timing::default();

    for (k, (w, act)) in model.weights.iter().zip(model.activations()).enumerate() {
        let mut stage_timing = StageTiming::default();
        let (layer, report) =
            quantize_one_layer(k, w, &x_q, &x_fp, config, &mut stage_timing).map_err(|e| e.at_layer(k))?;
        log::info!(
            "layer {k}: gptq-grid loss {:.6e}, stage-1 grid loss {:.6e}, final loss {:.6e}",
            report.loss_gptq_grid,
            report.loss_after_stage1_grid,
            report.loss_after_stage2
        );
        x_fp = apply_layer(&x_fp, w, act);
        x_q = apply_layer(&x_q, &layer.dequantize(), act);
        layers.push(layer);
        reports.push(report);
        timing.layers.push(stage_timing);
    }

    let quantized = QuantizedModel {
        manifest: model.manifest.clone(),
        layers,
    };
    let held_out = held_out
        .map(|inputs| evaluate(model, &quantized.to_dense()?, inputs))
        .transpose()?;
    timing.total_s = secs(start);
    let report = RunReport {
        config: *config,
        total_layer_loss: reports.iter().map(|r| r.loss_after_stage2).sum(),
        total_output_error: reports.iter().map(|r| r.output_error).sum(),
        layers: reports,
        held_out,
        timing,
    };
    Ok((quantized, report))
}
