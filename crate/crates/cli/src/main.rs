use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod manifest;
mod report;

/// Wait/transfer subgraph discovery on a small arithmetic transformer.
#[derive(Debug, Clone, Parser)]
#[command(name = "af1", version)]
pub struct Cli {
    /// Directory all artifact paths are relative to.
    #[arg(long, global = true, default_value = "work")]
    pub workspace: PathBuf,

    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,

    /// Model weights, relative to the workspace.
    #[arg(long, global = true, default_value = "model.af1w")]
    pub model: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train the model from scratch.
    Train(TrainArgs),
    /// Sample an evaluation dataset, by default keeping only prompts the model answers correctly.
    Dataset(DatasetArgs),
    /// Mean-ablation caches.
    Cama {
        #[command(subcommand)]
        action: CamaAction,
    },
    /// Sweep faithfulness over (L_wait, L_transfer).
    Grid(GridArgs),
    /// Pick the minimal subgraph from a grid.
    Select(SelectArgs),
    /// Remove last-token attention one layer at a time.
    AblateLayer(AblateArgs),
    /// Greedy head pruning.
    PruneHeads(PruneArgs),
    /// Top-k logit lens on residuals and head outputs.
    LogitLens(LensArgs),
    /// Mean attention pattern of one head.
    AttnExport(AttnArgs),
    /// Score every wait mechanism on the same cells.
    CompareWaits(CompareArgs),
    /// Render report.md from the workspace artifacts.
    Report(ReportArgs),
    /// Re-execute a manifest and check its outputs are byte-identical.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TemplateArg {
    /// Prompt template, e.g. A+B or A+B-C.
    #[arg(long, default_value = "A+B")]
    pub template: String,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Override the configured number of steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArgs {
    #[command(flatten)]
    pub template: TemplateArg,
    /// Number of prompts (defaults to the configured size).
    #[arg(long)]
    pub n: Option<usize>,
    /// Keep prompts regardless of whether the model answers them.
    #[arg(long)]
    pub unfiltered: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum CamaAction {
    /// Build caches for a range of wait depths.
    Build(CamaArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CacheKind {
    Cama,
    Rtma,
    Both,
}

#[derive(Debug, Clone, Args)]
pub struct CamaArgs {
    #[command(flatten)]
    pub template: TemplateArg,
    /// Wait depths: `a..b` (inclusive), `a,b,c` or a single value.
    #[arg(long)]
    pub l_wait: Option<String>,
    #[arg(long, value_enum, default_value_t = CacheKind::Both)]
    pub kind: CacheKind,
    /// Enumerate every prefix instead of sampling.
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub template: TemplateArg,
    #[arg(long, default_value = "cama")]
    pub wait: String,
    #[arg(long)]
    pub l_wait: Option<String>,
    #[arg(long)]
    pub l_transfer: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub template: TemplateArg,
    #[arg(long, default_value = "cama")]
    pub wait: String,
    /// Qualifying fraction of the baseline score.
    #[arg(long)]
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub template: TemplateArg,
    /// Single layer; every layer when omitted.
    #[arg(long)]
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PruneModeArg {
    /// Faithfulness of the selected subgraph.
    Af1,
    /// Accuracy of the full model.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadModeArg {
    /// Last token may attend only to <BOS> and itself.
    Cross,
    /// Head output zeroed.
    Off,
}

#[derive(Debug, Clone, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub template: TemplateArg,
    #[arg(long, value_enum, default_value_t = PruneModeArg::Af1)]
    pub mode: PruneModeArg,
    /// Candidate layers (defaults to the transfer window, or all layers in full mode).
    #[arg(long)]
    pub layers: Option<String>,
    /// Removal mode in full-model pruning.
    #[arg(long, value_enum, default_value_t = HeadModeArg::Cross)]
    pub head_mode: HeadModeArg,
    #[arg(long, default_value = "cama")]
    pub wait: String,
    /// Subgraph depth; defaults to the selected cell.
    #[arg(long)]
    pub l_wait: Option<usize>,
    #[arg(long)]
    pub l_transfer: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct LensArgs {
    #[command(flatten)]
    pub template: TemplateArg,
    #[arg(long)]
    pub k: Option<usize>,
    /// Send head outputs through the final norm (`final`) or unembed them directly (`raw`).
    #[arg(long)]
    pub norm: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct AttnArgs {
    #[command(flatten)]
    pub template: TemplateArg,
    /// Head such as L3H1.
    #[arg(long)]
    pub head: String,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub template: TemplateArg,
    /// Cells as `w:t,w:t`; defaults to the selected cell and the full-transfer cell at its depth.
    #[arg(long)]
    pub cells: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Templates to summarise; every template with a dataset when omitted.
    #[arg(long, value_delimiter = ',')]
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    /// Manifest to replay.
    pub manifest: PathBuf,
    /// Worker threads for the replay (defaults to the recorded count).
    #[arg(long = "replay-workers")]
    pub replay_workers: Option<usize>,
}

fn error_record(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<af1_core::Error>())
        .map(af1_core::Error::kind)
        .unwrap_or("other");
    serde_json::json!({
        "error": kind,
        "message": err.to_string(),
        "chain": err.chain().skip(1).map(|e| e.to_string()).collect::<Vec<_>>(),
    })
}

fn run() -> Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse_from(&argv);
    commands::execute(cli, argv)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    if let Err(e) = Cli::try_parse_from(&argv) {
        if !e.use_stderr() {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        let record = serde_json::json!({
            "error": "usage",
            "message": e.render().to_string().trim(),
        });
        eprintln!("{record}");
        return ExitCode::from(2);
    }
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
