use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Melodic interval and rhythmic ratio distributions from audio, and the
/// cross-country statistics built on them.
#[derive(Debug, Parser)]
#[command(name = "melrhy", version)]
pub struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Manifest sampling and validation.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Write a synthetic corpus (WAVs, manifest.csv, truth/*.json).
    Synth(SynthArgs),
    /// Extract per-song melodic and rhythmic densities.
    Extract(ExtractArgs),
    /// Mean distributions per group.
    Aggregate(AggregateArgs),
    /// Pairwise JSD between group means.
    Divergence(DivergenceArgs),
    /// Country-label permutation test and region contrast.
    Permtest(PermtestArgs),
    /// Within-country diversity indices.
    Diversity(DiversityArgs),
    /// Diversity and distance correlations.
    Correlate(CorrelateArgs),
    /// Figure CSVs and SVG charts.
    PlotData(PlotDataArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Keep exclusive songs, cap and drop countries; writes the sampled manifest.
    Sample {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Validate a manifest and optional side tables.
    Check {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        demographics: Option<PathBuf>,
        #[arg(long)]
        lingdist: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Corpus spec JSON, or a single song spec.
    #[arg(long)]
    pub spec: PathBuf,
    /// Songs to render when the spec describes a single song.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Use `<dir>/<song_id>/{vocals,drums}.wav` instead of HPSS.
    #[arg(long)]
    pub stems_dir: Option<PathBuf>,
    #[arg(long)]
    pub dump_pitch: bool,
    #[arg(long)]
    pub dump_onsets: bool,
    #[arg(long)]
    pub dump_stems: bool,
    /// Discard the journal and previous densities.
    #[arg(long)]
    pub fresh: bool,
    /// Stop after this many newly processed songs.
    #[arg(long)]
    pub max_songs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Melody,
    Rhythm,
    Both,
}

impl KindArg {
    pub fn kinds(self) -> Vec<melrhy::density::Kind> {
        use melrhy::density::Kind;
        match self {
            KindArg::Melody => vec![Kind::Melody],
            KindArg::Rhythm => vec![Kind::Rhythm],
            KindArg::Both => Kind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ByArg {
    All,
    Country,
    Region,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Extraction output directory.
    #[arg(long)]
    pub densities: PathBuf,
    #[arg(long, value_enum, default_value_t = ByArg::Country)]
    pub by: ByArg,
    #[arg(long, value_enum, default_value_t = KindArg::Both)]
    pub kind: KindArg,
}

#[derive(Debug, Args)]
pub struct DivergenceArgs {
    #[arg(long)]
    pub densities: PathBuf,
    #[arg(long, value_enum, default_value_t = ByArg::Country)]
    pub by: ByArg,
    #[arg(long, value_enum, default_value_t = KindArg::Melody)]
    pub kind: KindArg,
}

#[derive(Debug, Args)]
pub struct PermtestArgs {
    #[arg(long)]
    pub densities: PathBuf,
    #[arg(long, value_enum, default_value_t = KindArg::Melody)]
    pub kind: KindArg,
    #[arg(long, default_value_t = 1000)]
    pub n_perm: usize,
    /// Bootstrap resamples for the observed statistic's interval (0: none).
    #[arg(long, default_value_t = 0)]
    pub n_boot: usize,
    /// Permutations for the same- versus different-region contrast.
    #[arg(long, default_value_t = 10_000)]
    pub region_perm: usize,
}

#[derive(Debug, Args)]
pub struct DiversityArgs {
    #[arg(long)]
    pub densities: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// Output of `melrhy diversity`.
    #[arg(long)]
    pub diversity: PathBuf,
    #[arg(long)]
    pub demographics: Option<PathBuf>,
    /// Pairwise linguistic distances; needs `--densities`.
    #[arg(long)]
    pub lingdist: Option<PathBuf>,
    /// Extraction output directory, for the country JSD matrices.
    #[arg(long)]
    pub densities: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub n_boot: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n_perm: usize,
}

#[derive(Debug, Args)]
pub struct PlotDataArgs {
    #[arg(long)]
    pub densities: PathBuf,
    /// Output of `melrhy diversity`.
    #[arg(long)]
    pub diversity: Option<PathBuf>,
    /// Output of `melrhy correlate`.
    #[arg(long)]
    pub corr: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MELRHY_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.downcast_ref::<commands::ConfigError>().is_some() { 2 } else { 1 };
            log::error!("{e:#}");
            ExitCode::from(code)
        }
    }
}
