use clap::{Parser, Subcommand, ValueEnum};
use novscope::config::RunConfig;
use novscope::hypergraph::Channel;
use novscope::pipeline::{
    stage_build, stage_fit, stage_ingest, stage_metrics, stage_regress, stage_report,
    stage_score, stage_synth, PipelineCtx,
};
use std::path::PathBuf;

/// Measure the surprise and prescience of concept and reference combinations
/// in a publication corpus, and relate them to citation-based rewards.
#[derive(Parser)]
#[command(name = "novscope", version, about)]
struct Cli {
    /// Run configuration (TOML, one section per stage).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the fit/synth random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Which hypergraph channel(s) to process.
    #[arg(long, global = true, value_enum, default_value_t = ChannelArg::Both)]
    channel: ChannelArg,

    /// Years between publication-time and follow-up embeddings.
    #[arg(long, global = true)]
    horizon: Option<i32>,

    /// Worker threads for scoring.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Rebuild stale caches and override mixed-hash refusals.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelArg {
    Content,
    Context,
    Both,
}

impl ChannelArg {
    fn channels(self) -> Vec<Channel> {
        match self {
            ChannelArg::Content => vec![Channel::Content],
            ChannelArg::Context => vec![Channel::Context],
            ChannelArg::Both => vec![Channel::Content, Channel::Context],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known ground truth into the data dir.
    Synth,
    /// Validate and index the input corpus.
    Ingest,
    /// Build per-year hypergraph snapshots into the cache.
    Build,
    /// Fit the yearly embedding models.
    Fit,
    /// Score every paper: raw and percentile surprise/prescience.
    Score,
    /// Citation-based reward metrics: disruption, two-step credit, etc.
    Metrics,
    /// Run the configured regression specs on the joined analysis table.
    Regress,
    /// Export the joined analysis table and run the regression specs.
    Report,
}

fn run(cli: Cli) -> novscope::Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.fit.seed = seed;
        config.synth.seed = seed;
    }
    if let Some(horizon) = cli.horizon {
        config.score.horizon = horizon;
    }
    if let Some(threads) = cli.threads {
        config.score.threads = threads;
    }
    let ctx = PipelineCtx::new(config, cli.channel.channels(), cli.force);
    match cli.command {
        Command::Synth => stage_synth(&ctx),
        Command::Ingest => stage_ingest(&ctx),
        Command::Build => stage_build(&ctx),
        Command::Fit => stage_fit(&ctx),
        Command::Score => stage_score(&ctx),
        Command::Metrics => stage_metrics(&ctx),
        Command::Regress => stage_regress(&ctx),
        Command::Report => stage_report(&ctx),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
