//! Command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 numerical failure
//! (including oracle violations in `verify`), 3 file or format error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::compare::compare_methods;
use crate::error::{Error, Result};
use crate::oracle::suite::run_verify;
use crate::pipeline::{evaluate, quantize_model, Method, PipelineConfig};
use crate::stage1::GridSearchSpec;
use crate::statistics::DEFAULT_DAMP_FRAC;
use crate::tensor_io::{gen_held_out, gen_synthetic, load_tensor, save_tensor, Model, SyntheticSpec, WeightDist};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "groupscale", version, about = "Group-wise weight-only quantization with scale refinement")]
pub struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Log filter for stderr, e.g. `warn`, `info`, `debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a model and write the quantized directory and a JSON report.
    Quantize(QuantizeArgs),
    /// Run all four stage combinations and print a comparison table.
    Compare(CompareArgs),
    /// Compare a quantized model against its full-precision source.
    Eval(EvalArgs),
    /// Write a seeded synthetic model with calibration and held-out inputs.
    GenSynthetic(GenArgs),
    /// Run the brute-force oracle checks.
    Verify(VerifyArgs),
}

/// Quantization settings. Unset flags fall back to `--config`, then to defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct QuantFlags {
    #[arg(long)]
    pub bits: Option<u32>,
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Force zero-points to 0.
    #[arg(long)]
    pub symmetric: bool,
    /// Hessian damping as a fraction of its mean diagonal [default: 0.01].
    #[arg(long)]
    pub damp: Option<f64>,
    /// Number of shrink steps in the scale grid search [default: 100].
    #[arg(long)]
    pub grid_m: Option<usize>,
    /// Largest shrink of the min-max range in the grid search [default: 0.8].
    #[arg(long)]
    pub max_shrink: Option<f64>,
    /// Coordinate-descent sweeps over the groups [default: 1].
    #[arg(long)]
    pub sweeps: Option<usize>,
    /// JSON file with any of the settings above; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Contents accepted by `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub bits: Option<u32>,
    pub group_size: Option<usize>,
    pub symmetric: Option<bool>,
    pub damp: Option<f64>,
    pub grid_m: Option<usize>,
    pub max_shrink: Option<f64>,
    pub sweeps: Option<usize>,
    pub method: Option<Method>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Held-out inputs for end-to-end metrics.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Per-layer CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// gptq_default, two_stage, stage1_only or stage2_only [default: two_stage].
    #[arg(long)]
    pub method: Option<String>,
    #[command(flatten)]
    pub quant: QuantFlags,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub quant: QuantFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Full-precision model directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Quantized (or any same-shaped) model directory.
    #[arg(long)]
    pub quantized: PathBuf,
    /// Input samples.
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Model directory; inputs are written as `calib.qt` and `heldout.qt` inside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 128)]
    pub d_in: usize,
    #[arg(long, default_value_t = 128)]
    pub d_out: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    /// Calibration samples.
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    /// Held-out samples (0 to skip).
    #[arg(long, default_value_t = 1024)]
    pub held_out: usize,
    /// gauss or gauss+outliers.
    #[arg(long, default_value = "gauss")]
    pub weight_dist: String,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per check.
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

impl QuantFlags {
    /// Merges flags over the `--config` file over defaults and validates.
    pub fn resolve(&self, method_flag: Option<&str>) -> Result<PipelineConfig> {
        let file = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str::<ConfigFile>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => ConfigFile::default(),
        };
        let defaults = PipelineConfig::default();
        let method = match method_flag {
            Some(m) => m.parse()?,
            None => file.method.unwrap_or(defaults.method),
        };
        let config = PipelineConfig {
            bits: self.bits.or(file.bits).unwrap_or(defaults.bits),
            group_size: self.group_size.or(file.group_size).unwrap_or(defaults.group_size),
            symmetric: self.symmetric || file.symmetric.unwrap_or(defaults.symmetric),
            damp_frac: self.damp.or(file.damp).unwrap_or(DEFAULT_DAMP_FRAC),
            grid: GridSearchSpec {
                n_candidates: self.grid_m.or(file.grid_m).unwrap_or(defaults.grid.n_candidates),
                max_shrink: self.max_shrink.or(file.max_shrink).unwrap_or(defaults.grid.max_shrink),
            },
            sweeps: self.sweeps.or(file.sweeps).unwrap_or(defaults.sweeps),
            method,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Maps an error to the documented exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config(_) | Error::ShapeMismatch(_) | Error::IndexOutOfRange(_) => EXIT_CONFIG,
        Error::EmptyCalibration
        | Error::DegenerateStats(_)
        | Error::Factorization(_)
        | Error::InstanceTooLarge { .. } => EXIT_NUMERIC,
        Error::Io { .. } | Error::Json { .. } | Error::Format { .. } | Error::InvalidTensor(_) | Error::Manifest(_) => {
            EXIT_IO
        }
        Error::Layer { .. } => unreachable!("root() unwraps layer context"),
    }
}

fn check_distinct(paths: &[Option<&Path>]) -> Result<()> {
    let present: Vec<&Path> = paths.iter().flatten().copied().collect();
    for (a, p) in present.iter().enumerate() {
        if present[a + 1..].contains(p) {
            return Err(Error::Config(format!("path {} is used for more than one role", p.display())));
        }
    }
    Ok(())
}

fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    load_tensor(path)?.to_matrix()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("CSV serialization failed for {}: {other:?}", path.display())),
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        writer.serialize(row).map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn cmd_quantize(args: &QuantizeArgs) -> Result<()> {
    check_distinct(&[
        Some(&args.model),
        Some(&args.calib),
        Some(&args.out),
        Some(&args.report),
        args.eval.as_deref(),
        args.csv.as_deref(),
    ])?;
    let config = args.quant.resolve(args.method.as_deref())?;
    let model = Model::load(&args.model)?;
    let calib = load_matrix(&args.calib)?;
    let held_out = args.eval.as_deref().map(load_matrix).transpose()?;
    let (quantized, report) = quantize_model(&model, &calib, &config, held_out.as_ref())?;
    quantized.save(&args.out)?;
    write_json(&args.report, &report)?;
    if let Some(csv) = &args.csv {
        write_csv(csv, &report.csv_rows())?;
    }
    log::info!(
        "{}: total output error {:.6e}, written to {}",
        config.method,
        report.total_output_error,
        args.out.display()
    );
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    check_distinct(&[
        Some(&args.model),
        Some(&args.calib),
        Some(&args.report),
        args.eval.as_deref(),
        args.csv.as_deref(),
    ])?;
    let config = args.quant.resolve(None)?;
    let model = Model::load(&args.model)?;
    let calib = load_matrix(&args.calib)?;
    let held_out = args.eval.as_deref().map(load_matrix).transpose()?;
    let (report, _) = compare_methods(&model, &calib, &config, held_out.as_ref())?;
    write_json(&args.report, &report)?;
    if let Some(csv) = &args.csv {
        write_csv(csv, &report.csv_rows())?;
    }
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    check_distinct(&[
        Some(&args.model),
        Some(&args.quantized),
        Some(&args.eval),
        args.report.as_deref(),
    ])?;
    let fp = Model::load(&args.model)?;
    let quantized = Model::load(&args.quantized)?;
    let inputs = load_matrix(&args.eval)?;
    let metrics = evaluate(&fp, &quantized, &inputs)?;
    log::info!("final output MSE {:.6e}", metrics.final_mse);
    for (k, e) in metrics.layer_output_error.iter().enumerate() {
        log::info!("layer {k}: output error {e:.6e}");
    }
    if let Some(report) = &args.report {
        write_json(report, &metrics)?;
    }
    Ok(())
}

fn cmd_gen_synthetic(args: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        d_in: args.d_in,
        d_out: args.d_out,
        n_layers: args.layers,
        n_samples: args.samples,
        weight_dist: args.weight_dist.parse::<WeightDist>()?,
        seed: args.seed,
    };
    let (model, calib) = gen_synthetic(&spec)?;
    model.save(&args.out)?;
    save_tensor(&calib, args.out.join("calib.qt"))?;
    if args.held_out > 0 {
        save_tensor(&gen_held_out(&spec, args.held_out)?, args.out.join("heldout.qt"))?;
    }
    log::info!("wrote synthetic model to {}", args.out.display());
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    if args.instances == 0 {
        return Err(Error::Config("verify needs at least one instance".into()));
    }
    let report = run_verify(args.seed, args.instances)?;
    for check in &report.checks {
        let verdict = match (check.passed, check.enforced) {
            (true, _) => "ok",
            (false, true) => "VIOLATED",
            (false, false) => "note",
        };
        log::info!(
            "{verdict:>8} {} ({} instances): measured {:.3e}, tolerance {:.1e}; {}",
            check.name,
            check.instances,
            check.measured,
            check.tolerance,
            check.detail
        );
    }
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    Ok(report.passed)
}

fn init_logging(level: &str) {
    let _ = env_logger::Builder::new()
        .parse_filters(level)
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))
}

fn dispatch(cli: &Cli) -> Result<i32> {
    init_threads(cli.threads)?;
    match &cli.command {
        Command::Quantize(a) => cmd_quantize(a)?,
        Command::Compare(a) => cmd_compare(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::GenSynthetic(a) => cmd_gen_synthetic(a)?,
        Command::Verify(a) => {
            if !cmd_verify(a)? {
                log::error!("oracle checks reported violations");
                return Ok(EXIT_NUMERIC);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    init_logging(&cli.log_level);
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            exit_code(&e)
        }
    }
}
