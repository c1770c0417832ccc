use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "medaug",
    version,
    about = "Expand an Arabic patient–doctor QA seed corpus into a curated training corpus"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Pipeline configuration (JSON). Defaults to <out-dir>/run_config.json
    /// written by `plan`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides promptgen.master_seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Generation backend for every source, overriding the config.
    #[arg(long, global = true, value_enum)]
    pub provider: Option<ProviderChoice>,
    /// Overrides promptgen.n, rescaling the per-source quotas.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Combine artifacts even when their config digests differ.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderChoice {
    Mock,
    Http,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the request schedule from seeds and templates.
    Plan,
    /// Run the plan through the providers, resuming from the checkpoint.
    Generate,
    /// Parse, normalize, filter and deduplicate completions.
    Curate,
    /// Merge real and curated records, split and export.
    Assemble(AssembleArgs),
    /// Draw the human review sample from curated records.
    SampleReview,
    /// Serve the review sample over HTTP.
    ServeReview(ServeArgs),
    /// BERTScore-style scoring of predictions against references.
    Score(ScoreArgs),
    /// Render comparison tables from score CSVs.
    Report(ReportArgs),
    /// Per-stage acceptance rates from a curation report.
    FunnelStats(FunnelArgs),
}

#[derive(Debug, Clone, Args)]
pub struct AssembleArgs {
    /// Review verdict log; records with a reject verdict are excluded.
    /// Defaults to <out-dir>/verdicts.jsonl when present.
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Review sample JSONL. Defaults to <out-dir>/review_sample.jsonl.
    #[arg(long)]
    pub sample: Option<PathBuf>,
    #[arg(long, default_value_t = 8787)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Verdict log. Defaults to <out-dir>/verdicts.jsonl.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Require two reviewers per record.
    #[arg(long)]
    pub dual_review: bool,
    /// Allowed CORS origin for the reviewer UI; repeatable. Any origin when omitted.
    #[arg(long = "origin")]
    pub origins: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    /// JSONL of {"id", "output_text"}.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Reference records (JSONL); the answer field is the reference text.
    #[arg(long)]
    pub references: PathBuf,
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub configuration: String,
    /// Score CSV to append the aggregate row to.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Score CSVs, one table each.
    #[arg(long, num_args = 1.., required = true)]
    pub tables: Vec<PathBuf>,
    /// Captions, matched to tables by position.
    #[arg(long = "caption")]
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct FunnelArgs {
    /// Defaults to <out-dir>/curation_report.json.
    #[arg(long)]
    pub report: Option<PathBuf>,
}
