//! `eit` command-line tool.
//!
//! Every subcommand prints one `key=value` summary line on success. Exit
//! codes: 0 success, 2 usage error, 3 I/O or file-format error, 4 numeric
//! failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use eit_core::{EitError, PhantomKind};

mod commands;
pub mod config;
pub mod export;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "eit", version, about = "Electrical impedance tomography toolkit", args_override_self = true)]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// File of `key = value` lines used as defaults for the command's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Directory that relative output paths are resolved against.
    #[arg(long = "out-dir", global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a disk mesh with electrodes on the boundary.
    Mesh(MeshArgs),
    /// Simulate electrode measurements for a phantom.
    Forward(ForwardArgs),
    /// Generate a train/val/test dataset of phantoms and measurements.
    Dataset(DatasetArgs),
    /// Levenberg-Marquardt reconstruction from measurements.
    Reconstruct(ReconstructArgs),
    /// Draw samples with a trained score net.
    Sample(SampleArgs),
    /// Compare reconstructed images against ground truth.
    Metrics(MetricsArgs),
    /// Train a score net on a toy mixture or on dataset images.
    ToyScore(ToyScoreArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Contact impedance of every electrode.
    #[arg(long, default_value_t = eit_core::fem::DEFAULT_CONTACT_IMPEDANCE)]
    pub impedance: f64,
    /// Injected current amplitude.
    #[arg(long, default_value_t = eit_core::fem::DEFAULT_CURRENT)]
    pub current: f64,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    #[arg(long, default_value_t = 16)]
    pub electrodes: usize,
    #[arg(long, default_value_t = eit_core::mesh::DEFAULT_REFINEMENT)]
    pub refinement: usize,
    /// Fraction of the boundary covered by electrodes.
    #[arg(long, default_value_t = eit_core::mesh::DEFAULT_COVERAGE)]
    pub coverage: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Two,
    Four,
}

impl From<KindArg> for PhantomKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Two => PhantomKind::Two,
            KindArg::Four => PhantomKind::Four,
        }
    }
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["phantom", "kind"]))]
pub struct ForwardArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    /// Phantom description (JSON).
    #[arg(long)]
    pub phantom: Option<PathBuf>,
    /// Draw a random phantom of this kind from the seed instead.
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// Signal-to-noise ratio in dB; `inf` for noiseless data.
    #[arg(long, default_value_t = f64::INFINITY)]
    pub snr: f64,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Measurement CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the phantom description used.
    #[arg(long)]
    pub phantom_out: Option<PathBuf>,
    /// Also export the rasterized phantom.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = eit_core::raster::DEFAULT_GRID)]
    pub side: usize,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = f64::INFINITY)]
    pub snr: f64,
    /// Train, validation and test record counts; 80/10/10 of `--count`
    /// when omitted.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, default_value_t = eit_core::raster::DEFAULT_GRID)]
    pub side: usize,
    #[arg(long, default_value_t = 16)]
    pub electrodes: usize,
    #[arg(long, default_value_t = eit_core::mesh::DEFAULT_REFINEMENT)]
    pub refinement: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InverseArgs {
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    /// Stop once the relative misfit reaches this level.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Homogeneous starting conductivity.
    #[arg(long, default_value_t = eit_core::fem::DEFAULT_BACKGROUND)]
    pub initial: f64,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub measurements: PathBuf,
    #[command(flatten)]
    pub inverse: InverseArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Per-element conductivities, one per line.
    #[arg(long)]
    pub out: PathBuf,
    /// Misfit trace as `iteration,misfit` rows.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Also export the rasterized reconstruction.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = eit_core::raster::DEFAULT_GRID)]
    pub side: usize,
    /// Value of pixels outside the disk.
    #[arg(long, default_value_t = eit_core::fem::DEFAULT_BACKGROUND)]
    pub background: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SampleMode {
    /// Unconditional predictor-corrector sampling.
    Pc,
    /// Gauss-Newton reconstruction refined by the last K′ reverse steps.
    CsdStar,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, value_enum)]
    pub mode: SampleMode,
    /// Score checkpoint.
    #[arg(long)]
    pub score: PathBuf,
    /// Steps of the full reverse time grid.
    #[arg(long, default_value_t = eit_core::dgm::sde::DEFAULT_STEPS)]
    pub k: usize,
    /// Reverse steps run after the hijack (csd-star).
    #[arg(long)]
    pub k_prime: Option<usize>,
    #[arg(long, default_value_t = eit_core::dgm::sde::DEFAULT_CORRECTOR_STEPS)]
    pub corrector_steps: usize,
    #[arg(long, default_value_t = eit_core::dgm::sde::DEFAULT_SNR)]
    pub corrector_snr: f64,
    /// Number of samples (pc).
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    #[arg(long)]
    pub measurements: Option<PathBuf>,
    #[command(flatten)]
    pub inverse: InverseArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = eit_core::fem::DEFAULT_BACKGROUND)]
    pub background: f64,
    /// Image file (csd-star) or CSV of samples, one per row (pc).
    #[arg(long)]
    pub out: PathBuf,
    /// Also export the Gauss-Newton image fed to the sampler.
    #[arg(long)]
    pub gn_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Reconstructed images (image stack or dataset file).
    #[arg(long)]
    pub recon: PathBuf,
    /// Ground-truth images, paired by position.
    #[arg(long)]
    pub gt: PathBuf,
    /// Per-pair CSV with mean and std rows.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TrainSet {
    /// Two-mode Gaussian mixture in the plane.
    Gmm2d,
    /// Images of a dataset file.
    Images,
}

#[derive(Debug, Args)]
pub struct ToyScoreArgs {
    #[arg(long, value_enum)]
    pub train: TrainSet,
    /// Dataset or image-stack file (images).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Hidden layer widths, comma separated.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long, default_value_t = eit_core::dgm::sde::DEFAULT_SIGMA_MAX)]
    pub sigma_max: f64,
    /// Reverse steps used for the sample report (gmm2d).
    #[arg(long, default_value_t = 500)]
    pub k: usize,
    /// Samples drawn for the report (gmm2d).
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    /// 2-D histogram of the report samples as CSV (gmm2d).
    #[arg(long)]
    pub hist: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Globals {
    /// Resolve an output path, creating its parent directory.
    pub fn output(&self, p: &Path) -> Result<PathBuf, EitError> {
        let path = match &self.out_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p.to_path_buf(),
        };
        if let Some(parent) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        Ok(path)
    }
}

/// Exit code for a failed command.
pub fn exit_code(e: &EitError) -> i32 {
    if e.is_usage() {
        EXIT_USAGE
    } else if e.is_io() {
        EXIT_IO
    } else {
        EXIT_NUMERIC
    }
}

fn category(code: i32) -> &'static str {
    match code {
        EXIT_USAGE => "usage",
        EXIT_IO => "io",
        _ => "numeric",
    }
}

fn parse_args(args: &[OsString]) -> Result<Cli, i32> {
    Cli::try_parse_from(args).map_err(|e| {
        let _ = e.print();
        if e.use_stderr() {
            EXIT_USAGE
        } else {
            0
        }
    })
}

/// Run the tool on `args` (including the program name), printing the
/// summary line to stdout, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let mut cli = match parse_args(&args) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(path) = cli.config.clone() {
        let entries = match config::read(&path) {
            Ok(e) => e,
            Err(e) => {
                let code = if e.is_usage() { EXIT_USAGE } else { EXIT_IO };
                eprintln!("error[{}]: config {}: {e}", category(code), path.display());
                return code;
            }
        };
        cli = match parse_args(&config::splice(&args, &entries)) {
            Ok(c) => c,
            Err(code) => return code,
        };
    }
    let globals = Globals {
        seed: cli.seed,
        out_dir: cli.out_dir.clone(),
    };
    match commands::execute(cli.command, &globals) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error[{}]: {e}", category(code));
            code
        }
    }
}
