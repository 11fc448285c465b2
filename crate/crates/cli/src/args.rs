use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pifs_sched::attractor::SuppressionAverage;
use pifs_sched::patches::Normalization;
use pifs_sched::regime::Interpolation;
use pifs_sched::schedule::Spacing;

#[derive(Parser, Debug)]
#[command(name = "pifs-sched", version, about = "Contraction and attractor geometry of diffusion noise schedules")]
#[command(args_override_self = true, propagate_version = true)]
pub struct Cli {
    /// Flat `key = value` file; keys are long flag names of the subcommand. Flags given on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Per-step geometry of one schedule.
    Schedule(ScheduleCmd),
    /// Threshold and information-gain comparison of preset schedules.
    Compare(CompareCmd),
    /// Moran root of the chain, optionally under a suppression table.
    Moran(MoranCmd),
    /// Lyapunov exponents and Kaplan-Yorke dimension for a patch spectrum.
    Ky(KyCmd),
    /// Place N sampling steps at equal contraction load.
    Allocate(AllocateCmd),
    /// Estimate per-patch covariance spectra from an image dataset.
    Patches(PatchesCmd),
    /// Run the exact-score linear chain or the flow-matching Euler chain.
    Simulate(SimulateCmd),
    /// Release times of patches under a suppression table.
    Regime(RegimeCmd),
    /// First-step noise and threshold of the cosine family across offsets.
    Offset(OffsetCmd),
    /// Count expansion-forcing steps per patch.
    Census(CensusCmd),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Linear,
    Cosine,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subsample {
    pub stride: usize,
    pub spacing: Spacing,
}

/// `stride:k` / `trailing:k` keep `{k, 2k, ..., T}`; `leading:k` keeps `{1, 1 + k, ...}`.
pub fn parse_subsample(text: &str) -> Result<Subsample, String> {
    let (mode, k) = text.split_once(':').ok_or_else(|| format!("expected MODE:K, got `{text}`"))?;
    let spacing = match mode {
        "stride" | "trailing" => Spacing::Trailing,
        "leading" => Spacing::Leading,
        other => return Err(format!("unknown subsample mode `{other}` (stride, trailing, leading)")),
    };
    let stride = k.parse::<usize>().map_err(|e| format!("bad stride `{k}`: {e}"))?;
    Ok(Subsample { stride, spacing })
}

fn parse_positive(text: &str) -> Result<f64, String> {
    let x = text.parse::<f64>().map_err(|e| e.to_string())?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("must be positive and finite, got {x}"))
    }
}

#[derive(Args, Debug, Clone)]
pub struct ScheduleArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    /// Number of diffusion steps.
    #[arg(long = "T", value_name = "STEPS", default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4, allow_negative_numbers = true)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.02, allow_negative_numbers = true)]
    pub beta_end: f64,
    /// Cosine offset s.
    #[arg(long, default_value_t = 0.008, allow_negative_numbers = true)]
    pub offset: f64,
    /// Disable the 0.999 beta clip of the cosine schedule.
    #[arg(long)]
    pub no_beta_clip: bool,
    /// DDIM subsampling, e.g. `stride:20` or `leading:20`.
    #[arg(long, value_parser = parse_subsample, value_name = "MODE:K")]
    pub subsample: Option<Subsample>,
    /// Shift logSNR for this resolution relative to `--base-resolution`.
    #[arg(long, value_parser = parse_positive)]
    pub resolution: Option<f64>,
    #[arg(long, value_parser = parse_positive, default_value_t = 64.0)]
    pub base_resolution: f64,
}

#[derive(Args, Debug, Clone)]
pub struct OutputArgs {
    /// Output file; stdout when absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interp {
    #[default]
    Linear,
    Nearest,
}

impl From<Interp> for Interpolation {
    fn from(i: Interp) -> Self {
        match i {
            Interp::Linear => Interpolation::Linear,
            Interp::Nearest => Interpolation::Nearest,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ScheduleCmd {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Export `f_t(lambda)` and `lambda*` for this variance instead of the geometry table.
    #[arg(long, value_parser = parse_positive)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Table1,
    Table2,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpacingArg {
    #[default]
    Trailing,
    Leading,
}

impl From<SpacingArg> for Spacing {
    fn from(s: SpacingArg) -> Self {
        match s {
            SpacingArg::Trailing => Spacing::Trailing,
            SpacingArg::Leading => Spacing::Leading,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct CompareCmd {
    #[arg(long, value_enum)]
    pub presets: Preset,
    /// Spacing of the stride-20 DDIM row.
    #[arg(long, value_enum, default_value_t = SpacingArg::Trailing)]
    pub spacing: SpacingArg,
    /// Patch spectrum CSV; required for `table2`.
    #[arg(long, value_name = "PATH")]
    pub spectrum: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AverageArg {
    #[default]
    PerPatch,
    PatchAveraged,
}

impl From<AverageArg> for SuppressionAverage {
    fn from(a: AverageArg) -> Self {
        match a {
            AverageArg::PerPatch => SuppressionAverage::PerPatch,
            AverageArg::PatchAveraged => SuppressionAverage::PatchAveraged,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct MoranCmd {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, value_parser = parse_positive, default_value_t = 1e-11)]
    pub tol: f64,
    /// Suppression table CSV (`patch,t,S`).
    #[arg(long, value_name = "PATH")]
    pub suppression: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AverageArg::PerPatch)]
    pub mode: AverageArg,
    /// Upper end of the suppressed root search.
    #[arg(long, value_parser = parse_positive, default_value_t = 500.0)]
    pub cap: f64,
    #[arg(long, value_enum, default_value_t = Interp::Linear)]
    pub interp: Interp,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
pub struct KyCmd {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, value_name = "PATH")]
    pub spectrum: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub suppression: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Interp::Linear)]
    pub interp: Interp,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
pub struct AllocateCmd {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Number of sampling steps to place.
    #[arg(long = "N", value_name = "STEPS")]
    pub n: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizationArg {
    /// `2 x / 255 - 1`.
    #[default]
    SignedUnit,
    /// `x / 255`.
    Unit,
}

impl From<NormalizationArg> for Normalization {
    fn from(n: NormalizationArg) -> Self {
        match n {
            NormalizationArg::SignedUnit => Normalization::SignedUnit,
            NormalizationArg::Unit => Normalization::Unit,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct PatchesCmd {
    /// CIFAR-10 binary batch files.
    #[arg(long, value_name = "PATH", num_args = 1.., value_delimiter = ',', conflicts_with = "raw", required_unless_present = "raw")]
    pub cifar: Vec<PathBuf>,
    /// Raw-f32 image file.
    #[arg(long, value_name = "PATH")]
    pub raw: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    #[arg(long, value_enum, default_value_t = NormalizationArg::SignedUnit)]
    pub normalization: NormalizationArg,
    /// Also compute full per-patch spectra by deflation.
    #[arg(long)]
    pub full_spectrum: bool,
    #[arg(long, value_parser = parse_positive, default_value_t = 1e-9)]
    pub power_tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
pub struct SimulateCmd {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Patch spectrum CSV for the DDIM chain.
    #[arg(long, value_name = "PATH", required_unless_present = "fm_mu")]
    pub spectrum: Option<PathBuf>,
    /// Run the flow-matching Euler chain with this curvature instead (uses `--T`).
    #[arg(long, conflicts_with = "spectrum", allow_negative_numbers = true)]
    pub fm_mu: Option<f64>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub fm_delta: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
pub struct RegimeCmd {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, value_name = "PATH")]
    pub suppression: PathBuf,
    /// Patch spectrum CSV; each patch's leading variance is its lambda.
    #[arg(long, value_name = "PATH")]
    pub spectrum: PathBuf,
    #[arg(long, value_enum, default_value_t = Interp::Linear)]
    pub interp: Interp,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
pub struct OffsetCmd {
    #[arg(long = "T", value_name = "STEPS", default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = vec![0.0, 0.008])]
    pub offsets: Vec<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
pub struct CensusCmd {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, value_name = "PATH")]
    pub spectrum: PathBuf,
    /// Drop the first and last steps from the count.
    #[arg(long)]
    pub exclude_boundary: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}
