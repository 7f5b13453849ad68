//! The `mccsr` command line: `train`, `upscale`, `evaluate` and `degrade`.
//!
//! Exit codes are 0 on success, 1 for usage errors and 2 for data, I/O or
//! format errors.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{require_parent, RunConfig};
use crate::dictionary::{joint_dictionary_learning_with, DictionaryPair};
use crate::error::{Error, Result};
use crate::image::{PlanarImage, FEATURE_MAPS};
use crate::metrics::{evaluate, MetricReport, DEFAULT_SAMPLES_PER_DEGREE};
use crate::operators::build_edge_operator;
use crate::pipeline::{build_training_set, degrade, super_resolve_detailed};
use crate::synthetic::add_gaussian_noise;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Environment variable read when `--threads` is not given.
pub const THREADS_ENV: &str = "MCCSR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mccsr", version, about = "Sparse-coding color image super-resolution")]
pub struct Cli {
    /// Worker threads for the numeric kernels. Defaults to $MCCSR_THREADS,
    /// then to the machine's parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn LR/HR color dictionaries from a set of PNG images.
    Train(TrainArgs),
    /// Super-resolve a PNG image with a trained dictionary.
    Upscale(UpscaleArgs),
    /// Compare a test image against a reference.
    Evaluate(EvaluateArgs),
    /// Make a low-resolution input by bicubic downsampling.
    Degrade(DegradeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file; flags override it.
    pub config: Option<PathBuf>,
    /// Training PNG or directory of PNGs; repeatable.
    #[arg(long)]
    pub input: Vec<PathBuf>,
    /// Dictionary file to write.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Objective log, appended to.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub atoms: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub outer_iterations: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Add Gaussian noise of this σ to the degraded training images.
    #[arg(long)]
    pub training_noise_sigma: Option<f64>,
    /// Any config key, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct UpscaleArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long, short)]
    pub dictionary: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to the dictionary's scale.
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau_max: Option<f64>,
    /// Input noise level; sets λ = σ/10 and damps τ.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Use this τ for every patch.
    #[arg(long)]
    pub force_tau: Option<f64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    pub reference: PathBuf,
    pub test: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SAMPLES_PER_DEGREE)]
    pub samples_per_degree: f64,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub scale: usize,
    /// Gaussian noise added after downsampling.
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("mccsr: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_usage() {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{THREADS_ENV}: cannot parse {v:?}"))),
        _ => Ok(None),
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let threads = thread_count(cli.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::param(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Train(a) => train(a),
        Command::Upscale(a) => upscale(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Degrade(a) => degrade_cmd(a),
    })
}

fn apply_overrides(cfg: &mut RunConfig, pairs: &[String]) -> Result<()> {
    for pair in pairs {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    apply_overrides(&mut cfg, &a.overrides)?;
    cfg.inputs.extend(a.input);
    if let Some(v) = a.output {
        cfg.output = Some(v);
    }
    if let Some(v) = a.log {
        cfg.log = Some(v);
    }
    let n = |v: Option<usize>| v.map(|v| v.to_string());
    let f = |v: Option<f64>| v.map(|v| v.to_string());
    for (key, value) in [
        ("atoms", n(a.atoms)),
        ("samples", n(a.samples)),
        ("outer_iterations", n(a.outer_iterations)),
        ("lambda", f(a.lambda)),
        ("tau", f(a.tau)),
        ("scale", n(a.scale)),
        ("seed", a.seed.map(|v| v.to_string())),
        ("training_noise_sigma", f(a.training_noise_sigma)),
    ] {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.validate_for_training()?;
    let output = cfg.output.clone().expect("validated");

    let images: Vec<PlanarImage> = cfg.training_files()?.iter().map(PlanarImage::read_png).collect::<Result<_>>()?;
    let ts = build_training_set(&images, &cfg.training_set)?;
    let s = build_edge_operator(cfg.training_set.patch_side)?;

    let mut log = match &cfg.log {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let t = &cfg.train;
    let header = format!(
        "# train images={} samples={} atoms={} lambda={} tau={} gamma={} rho={} seed={}",
        images.len(),
        ts.len(),
        t.atoms,
        t.lambda,
        t.tau,
        t.gamma,
        t.rho,
        t.seed
    );
    if let Some(f) = log.as_mut() {
        writeln!(f, "{header}")?;
    }
    eprintln!("{header}");
    let outcome = joint_dictionary_learning_with(&ts, &s, &cfg.train, |r| {
        let line = format!(
            "iteration={} objective={:.12e} after_coding={:.12e} after_lr={:.12e} replaced_atoms={} admm_iterations={} admm_residual={:.3e} admm_converged={}",
            r.iteration, r.after_hr, r.after_coding, r.after_lr, r.replaced_atoms, r.admm_iterations, r.admm_residual, r.admm_converged
        );
        eprintln!("{line}");
        if let Some(f) = log.as_mut() {
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        Ok(())
    })?;
    if let Some(f) = log.as_mut() {
        writeln!(f, "# initial_objective={:.12e}", outcome.initial_objective)?;
    }
    let dict = DictionaryPair::new(outcome.dl, outcome.dh, cfg.training_set.patch_side, cfg.training_set.scale, FEATURE_MAPS)?;
    dict.save(&output)?;
    println!("wrote {}", output.display());
    Ok(())
}

/// Counts of `values` in `bins` equal-width bins over `[min, max]`.
pub fn histogram(values: &[f64], bins: usize) -> (f64, f64, Vec<usize>) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; bins.max(1)];
    if values.is_empty() {
        return (0.0, 0.0, counts);
    }
    let last = counts.len() - 1;
    let width = (max - min) / counts.len() as f64;
    for &v in values {
        let i = if width > 0.0 { ((v - min) / width) as usize } else { 0 };
        counts[i.min(last)] += 1;
    }
    (min, max, counts)
}

fn upscale(a: UpscaleArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    apply_overrides(&mut cfg, &a.overrides)?;
    cfg.dictionary = Some(a.dictionary);
    cfg.output = Some(a.output);
    let dict_path = cfg.dictionary.clone().expect("set above");
    crate::config::require_exists(&dict_path)?;
    crate::config::require_exists(&a.input)?;
    let dict = DictionaryPair::load(&dict_path)?;
    cfg.sr.scale = a.scale.unwrap_or(dict.scale);
    cfg.sr.patch_side = dict.patch_side;
    if let Some(v) = a.lambda {
        cfg.sr.lambda = v;
    }
    if let Some(v) = a.tau_max {
        cfg.sr.tau_map.tau_max = v;
    }
    if a.noise_sigma.is_some() {
        cfg.sr.noise_sigma = a.noise_sigma;
    }
    if a.force_tau.is_some() {
        cfg.sr.tau_override = a.force_tau;
    }
    cfg.validate_for_upscale()?;
    if dict.scale != cfg.sr.scale {
        return Err(Error::Format(format!("dictionary was trained for scale {}, not {}", dict.scale, cfg.sr.scale)));
    }

    let lr = PlanarImage::read_png(&a.input)?;
    let report = super_resolve_detailed(&lr, &dict, &cfg.sr)?;
    let output = cfg.output.as_ref().expect("set above");
    report.image.write_png(output)?;

    let (lo, hi, counts) = histogram(&report.betas, 8);
    let width = (hi - lo) / counts.len() as f64;
    println!("beta histogram ({} patches, min {lo:.4}, max {hi:.4}):", report.betas.len());
    for (i, c) in counts.iter().enumerate() {
        println!("  [{:.4}, {:.4}) {c}", lo + i as f64 * width, lo + (i + 1) as f64 * width);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!(
        "mean_beta={:.6} mean_tau={:.6} lambda={} converged={}/{}",
        mean(&report.betas),
        mean(&report.taus),
        cfg.sr.effective_lambda(),
        report.converged,
        report.patches.len()
    );
    println!("wrote {}", output.display());
    Ok(())
}

/// The single machine-readable summary line.
pub fn metric_line(r: &MetricReport) -> String {
    format!("PSNR={:.9} SSIM={:.6} SCIELAB={:.6}", r.psnr_db, r.ssim, r.scielab_total)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    if !(a.samples_per_degree > 0.0) {
        return Err(Error::param("samples per degree must be > 0"));
    }
    let reference = PlanarImage::read_png(&a.reference)?;
    let test = PlanarImage::read_png(&a.test)?;
    let r = evaluate(&reference, &test, a.samples_per_degree)?;
    println!("{}", metric_line(&r));
    println!("reference: {}", a.reference.display());
    println!("test:      {}", a.test.display());
    println!("  PSNR      {:.4} dB", r.psnr_db);
    println!("  SSIM      {:.6}", r.ssim);
    println!("  S-CIELAB  {:.2} (sum of ΔE over {} pixels)", r.scielab_total, reference.width() * reference.height());
    Ok(())
}

fn degrade_cmd(a: DegradeArgs) -> Result<()> {
    if !(2..=4).contains(&a.scale) {
        return Err(Error::param(format!("scale must be 2, 3 or 4, got {}", a.scale)));
    }
    if !(a.noise_sigma >= 0.0) || !a.noise_sigma.is_finite() {
        return Err(Error::param(format!("noise σ must be ≥ 0, got {}", a.noise_sigma)));
    }
    require_parent(&a.output)?;
    let hr = PlanarImage::read_png(&a.input)?;
    let mut lr = degrade(&hr, a.scale)?;
    if a.noise_sigma > 0.0 {
        lr = add_gaussian_noise(&lr, a.noise_sigma, a.seed)?;
    }
    lr.write_png(&a.output)?;
    println!("wrote {} ({}x{})", a.output.display(), lr.width(), lr.height());
    Ok(())
}
