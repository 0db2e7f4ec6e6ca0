//! `slam`: mine contrastive SAE directions, generate keyed watermarked text and
//! detect it.
//!
//! Exit status is 0 on success, 2 on a usage error and 1 on any runtime
//! error, with the cause chain printed to stderr.

mod commands;
mod config;
mod io;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use slam_core::attacks::AttackKind;

#[derive(Debug, Parser)]
#[command(name = "slam", version, about = "Keyed SAE-direction watermarking")]
pub struct Cli {
    /// TOML configuration; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a deterministic synthetic world: backend spec, SAEs, contrastive
    /// pairs, lexicon, prompts and a baseline corpus.
    SynthWorld(SynthWorldArgs),
    /// Mine a direction bank from contrastive pair traces.
    Mine(MineArgs),
    /// Show the keyed feature selection for a document id.
    Select(SelectArgs),
    /// Fit null statistics on unwatermarked baseline texts.
    Calibrate(CalibrateArgs),
    /// Generate watermarked text.
    Generate(GenerateArgs),
    /// Score texts for the watermark.
    Detect(DetectArgs),
    /// Apply a text-level attack to a document directory.
    Attack(AttackArgs),
    /// Quality and detection metrics over document directories.
    Eval(EvalArgs),
    /// Grid over bank size, steering strength and features per document.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Synthetic,
    Bridge,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Synthetic world directory (from `synth-world`).
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Bridge executable for `--backend bridge`.
    #[arg(long)]
    pub bridge_program: Option<PathBuf>,
    /// Model name passed to the bridge.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct KeyArgs {
    /// Hex secret file; falls back to $SLAM_KEY_FILE.
    #[arg(long)]
    pub key_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectionArgs {
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub anchor_size: Option<usize>,
    #[arg(long)]
    pub selection_temperature: Option<f64>,
    /// Re-key the selection at every sentence boundary.
    #[arg(long)]
    pub sentence_level: bool,
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthWorldArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub pairs_per_domain: usize,
    #[arg(long, default_value_t = 200)]
    pub prompts: usize,
    #[arg(long, default_value_t = 100)]
    pub baseline: usize,
    #[arg(long, default_value_t = 16)]
    pub prompt_len: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    /// Pair directory (manifest.json plus traces).
    #[arg(long)]
    pub pairs: PathBuf,
    /// SAE file (slam.sae JSON).
    #[arg(long)]
    pub sae: PathBuf,
    /// Comma-separated layers; defaults to every SAE layer present in the traces.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Also mine with the pair sides swapped.
    #[arg(long, overrides_with = "no_bidirectional")]
    pub bidirectional: bool,
    #[arg(long)]
    pub no_bidirectional: bool,
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "slam-bank")]
    pub bank_id: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-unit mining report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[command(flatten)]
    pub key: KeyArgs,
    #[arg(long)]
    pub doc_id: String,
    /// Sentences to key in sentence-level mode.
    #[arg(long, default_value_t = 1)]
    pub sentences: usize,
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[command(flatten)]
    pub key: KeyArgs,
    #[arg(long)]
    pub baseline_dir: PathBuf,
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub nulls: PathBuf,
    #[command(flatten)]
    pub key: KeyArgs,
    /// Single prompt as a text file (needs --doc-id and --out).
    #[arg(long, conflicts_with = "prompts_dir", requires = "doc_id")]
    pub prompt_file: Option<PathBuf>,
    #[arg(long)]
    pub doc_id: Option<String>,
    /// Batch mode: a directory of documents whose prompts are continued.
    #[arg(long, required_unless_present = "prompt_file")]
    pub prompts_dir: Option<PathBuf>,
    /// Single mode: generation record. Batch mode: output document directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Batch mode: per-document generation records.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub min_tokens: Option<usize>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub nulls: PathBuf,
    #[command(flatten)]
    pub key: KeyArgs,
    /// A single document file.
    #[arg(long, conflicts_with = "in_dir")]
    pub doc: Option<PathBuf>,
    /// Bare continuation text; scored with an empty prompt (needs --doc-id).
    #[arg(long, conflicts_with_all = ["in_dir", "doc"], requires = "doc_id")]
    pub text_file: Option<PathBuf>,
    #[arg(long)]
    pub doc_id: Option<String>,
    /// Optional prompt text for --text-file.
    #[arg(long, requires = "text_file")]
    pub prompt_file: Option<PathBuf>,
    #[arg(long, required_unless_present_any = ["doc", "text_file"])]
    pub in_dir: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Include per-feature z-scores and the active set.
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long, value_parser = parse_attack)]
    pub kind: AttackKind,
    /// Defaults to the attack's standard rate.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Synonym lexicon (TSV), required for `--kind synonym`.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

fn parse_attack(s: &str) -> Result<AttackKind, String> {
    s.parse().map_err(|e: slam_core::Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Metric {
    Distinct,
    Selfbleu,
    Tpr,
    Ppl,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum, value_delimiter = ',', default_value = "distinct,selfbleu")]
    pub metrics: Vec<Metric>,
    /// Watermarked documents.
    #[arg(long)]
    pub wm: Option<PathBuf>,
    /// Unwatermarked documents.
    #[arg(long)]
    pub bl: Option<PathBuf>,
    /// Unsteered continuations of the watermarked prompts, paired by prompt
    /// text for perplexity ratios. Defaults to --bl.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Score files from `detect`; repeat for several.
    #[arg(long)]
    pub scores: Vec<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QualityFilter {
    On,
    Off,
    Both,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub alpha: Vec<f64>,
    #[arg(long = "features", value_delimiter = ',', default_value = "7")]
    pub features: Vec<usize>,
    #[arg(long, value_enum, default_value = "off")]
    pub quality_filter: QualityFilter,
    /// Steering strength used when probing quality weights.
    #[arg(long, default_value_t = 2.0)]
    pub quality_alpha: f64,
    /// Also run every cell with random unit directions in place of the bank.
    #[arg(long)]
    pub random_control: bool,
    /// Prompts generated per cell; defaults to all in the world.
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[command(flatten)]
    pub key: KeyArgs,
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
