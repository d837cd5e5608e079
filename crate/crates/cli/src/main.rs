//! `tpm`: tied prototype model tools over feature-grid files.
//!
//! Exit status is 0 on success, 2 for invalid input and 3 for I/O failures.
//! `TPM_THREADS` caps the worker pool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tpm_core::report::ReportFormat;
use tpm_core::synth::BackgroundMode;
use tpm_core::TpmParams;

#[derive(Parser)]
#[command(name = "tpm", version, about = "Tied prototype model segmentation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene (features, mask and true prototypes).
    Synth(SynthArgs),
    /// Extract prototypes from a feature grid and mask.
    Protos(ProtosArgs),
    /// Segment a query grid from a support grid and mask.
    Segment(SegmentArgs),
    /// CE and Dice curves over thresholds or priors.
    Sweep(SweepArgs),
    /// Score a predicted mask against a reference.
    Eval(EvalArgs),
    /// Build ideal-prior training records from support/query pairs.
    Records(RecordsArgs),
    /// Fit the linear prior estimator to training records.
    FitLinest(FitLinestArgs),
}

#[derive(Args, Clone, Copy)]
struct ModelArgs {
    /// Foreground spread; derived from --sigma-b so that alpha is 20 when omitted.
    #[arg(long)]
    sigma_f: Option<f64>,
    #[arg(long, default_value_t = TpmParams::DEFAULT_SIGMA_B)]
    sigma_b: f64,
    /// Effective dimension in the density normalizer.
    #[arg(long, default_value_t = TpmParams::DEFAULT_DIM)]
    dim: f64,
    #[arg(long, default_value_t = TpmParams::DEFAULT_KAPPA)]
    kappa: f64,
}

impl ModelArgs {
    fn params(&self) -> anyhow::Result<TpmParams> {
        let params = match self.sigma_f {
            Some(sf) => TpmParams::new(sf, self.sigma_b, self.dim, self.kappa)?,
            None => TpmParams::from_delta(10.0, self.sigma_b, self.dim, self.kappa)?,
        };
        Ok(params)
    }
}

#[derive(Args, Clone, Copy)]
struct SceneArgs {
    #[arg(long, default_value_t = 64)]
    grid_h: usize,
    #[arg(long, default_value_t = 64)]
    grid_w: usize,
    #[arg(long, default_value_t = 3)]
    dims: usize,
    /// Number of foreground classes.
    #[arg(long, default_value_t = 1)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    clusters: usize,
    #[arg(long, default_value_t = 0.2)]
    sigma_fg: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_bg: f64,
    #[arg(long, default_value_t = 0.2)]
    fg_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    slice_loc: f64,
    #[arg(long, value_enum, default_value_t = Background::Tied)]
    background: Background,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Background {
    Tied,
    Uniform,
}

impl SceneArgs {
    fn config(&self) -> tpm_core::synth::SceneConfig {
        tpm_core::synth::SceneConfig {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            dims: self.dims,
            k_fg: self.classes,
            clusters_per_class: self.clusters,
            sigma_fg: self.sigma_fg,
            sigma_bg: self.sigma_bg,
            fg_fraction: self.fg_fraction,
            seed: self.seed,
            slice_loc: self.slice_loc,
            background: match self.background {
                Background::Tied => BackgroundMode::Tied,
                Background::Uniform => BackgroundMode::Uniform,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    out_features: PathBuf,
    #[arg(long)]
    out_mask: PathBuf,
    /// Optional JSON with the true prototypes and the configuration.
    #[arg(long)]
    out_protos: Option<PathBuf>,
}

#[derive(Args)]
struct ProtosArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Prototypes per class; above 1 runs EM on a binary mask.
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sp,
    Mp,
    Mc,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Fixed,
    Avgest,
    Linest,
    Ocp,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    support_features: PathBuf,
    #[arg(long)]
    support_mask: PathBuf,
    #[arg(long)]
    query_features: PathBuf,
    /// Query labels; required for --prior-source ocp and enables scoring.
    #[arg(long)]
    query_mask: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Sp)]
    mode: Mode,
    /// Prototypes for --mode mp.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, value_enum, default_value_t = PriorArg::Fixed)]
    prior_source: PriorArg,
    /// Training records (CSV or JSON) for avgest.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Fitted model JSON for linest.
    #[arg(long)]
    linest: Option<PathBuf>,
    /// Query slice location in [0, 1], used by linest.
    #[arg(long, default_value_t = 0.5)]
    slice_loc: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out_mask: PathBuf,
    /// Foreground probability grid as CSV, one row per grid row.
    #[arg(long)]
    out_prob: Option<PathBuf>,
    /// JSON summary with the prior and, given --query-mask, the scores.
    #[arg(long)]
    out_report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Threshold,
    Prior,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Prototype JSON from `protos`; defaults to pooling over --mask.
    #[arg(long)]
    protos: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SweepKind::Threshold)]
    kind: SweepKind,
    #[arg(long)]
    lo: Option<f64>,
    #[arg(long)]
    hi: Option<f64>,
    #[arg(long, default_value_t = 201)]
    steps: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Two-column CE curve for plotting.
    #[arg(long)]
    ce_curve: Option<PathBuf>,
    /// Two-column Dice curve for plotting.
    #[arg(long)]
    dice_curve: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Foreground probability CSV from `segment --out-prob`, for CE.
    #[arg(long)]
    prob: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct RecordsArgs {
    /// JSON list of pairs: support_features, support_mask, query_features,
    /// query_mask, slice_loc. Paths resolve against the manifest directory.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    manifest: Option<PathBuf>,
    /// Generate this many synthetic pairs instead.
    #[arg(long)]
    synthetic: Option<u64>,
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, value_enum, default_value_t = Mode::Sp)]
    mode: Mode,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct FitLinestArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long, default_value_t = tpm_core::threshold::LinEstModel::DEFAULT_CLAMP_EPS)]
    clamp_eps: f64,
    #[arg(long)]
    out: PathBuf,
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("TPM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("TPM_THREADS must be a positive integer, got {raw:?}"))?;
    if n == 0 {
        bail!("TPM_THREADS must be a positive integer, got 0");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("cannot configure the worker pool")?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Protos(a) => commands::protos(a),
        Command::Segment(a) => commands::segment(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Eval(a) => commands::eval(a),
        Command::Records(a) => commands::records(a),
        Command::FitLinest(a) => commands::fit_linest(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let io = err.chain().any(|e| {
        e.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() != std::io::ErrorKind::InvalidData)
            || e.downcast_ref::<tpm_core::Error>().is_some_and(tpm_core::Error::is_io)
    });
    if io {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
