mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Search, minimize and validate LLVM pass pipelines for binary size, and
/// build or score instruction-tuning datasets from the results.
#[derive(Debug, Parser)]
#[command(name = "passtune", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by all subcommands. Each falls back to an environment
/// variable and then to the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML file with defaults for any of these options.
    #[arg(long, global = true, env = "PASSTUNE_CONFIG")]
    pub config: Option<PathBuf>,
    /// `llvm`, `mock`, or `replay:<dir>`.
    #[arg(long, global = true, env = "PASSTUNE_BACKEND")]
    pub backend: Option<String>,
    /// Pass catalog file, one `name,Level` entry per line.
    #[arg(long, global = true, env = "PASSTUNE_CATALOG")]
    pub catalog: Option<PathBuf>,
    /// Directory of `.ll` modules.
    #[arg(long, global = true, env = "PASSTUNE_CORPUS")]
    pub corpus: Option<PathBuf>,
    /// Results store directory.
    #[arg(long, global = true, env = "PASSTUNE_STORE")]
    pub store: Option<PathBuf>,
    /// Random pass lists per program.
    #[arg(long, global = true, env = "PASSTUNE_TRIALS")]
    pub trials: Option<u64>,
    /// Maximum random pass list length.
    #[arg(long, global = true, env = "PASSTUNE_MAX_LEN")]
    pub max_len: Option<usize>,
    /// Per-compilation timeout in seconds.
    #[arg(long, global = true, env = "PASSTUNE_TIMEOUT")]
    pub timeout: Option<u64>,
    #[arg(long, global = true, env = "PASSTUNE_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "PASSTUNE_WORKERS")]
    pub workers: Option<usize>,
    /// Test-suite manifest for validation.
    #[arg(long, global = true, env = "PASSTUNE_SUITE")]
    pub suite: Option<PathBuf>,
    #[arg(long, global = true, env = "PASSTUNE_TOP_K")]
    pub top_k: Option<usize>,
    /// TOML file describing an inference server.
    #[arg(long, global = true, env = "PASSTUNE_ENDPOINT")]
    pub endpoint: Option<PathBuf>,
    /// Prompt token budget; larger modules are split per function.
    #[arg(long, global = true, env = "PASSTUNE_BUDGET_TOKENS")]
    pub budget_tokens: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long, global = true, env = "PASSTUNE_OUTPUT")]
    pub output: Option<PathBuf>,
    /// Report format.
    #[arg(long, global = true, value_enum, env = "PASSTUNE_FORMAT")]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Human,
    Jsonl,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Random search over pass lists for every module in the corpus.
    Autotune {
        /// Stop after this many new trials (the run can be resumed).
        #[arg(long, hide = true)]
        stop_after: Option<u64>,
    },
    /// Shrink every best list in the store.
    Minimize {
        #[arg(long, default_value_t = passtune::minimizer::DEFAULT_MAX_ROUNDS)]
        max_rounds: usize,
    },
    /// Check best lists against a test suite and revert rejected ones.
    Validate {
        /// Accepted alternatives to try before reverting to -Oz.
        #[arg(long, default_value_t = 8)]
        max_alternatives: usize,
    },
    /// Evaluate the most common best lists on every program.
    Broadcast,
    /// Score flag-tuning answers against -Oz.
    EvalFlags {
        /// JSON lines of `{program_id, candidate, oz}` sizes to score directly.
        #[arg(long, conflicts_with = "prompts")]
        results: Option<PathBuf>,
        /// Flag-tuning records from `emit-dataset`.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// JSON lines of `{program_id, reply}`; used instead of an endpoint.
        #[arg(long)]
        replies: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Style::Native)]
        style: Style,
        /// Programs that could not be evaluated; each scores as -Oz.
        #[arg(long, default_value_t = 0)]
        excluded: usize,
    },
    /// Score disassembly answers by round-tripping them to assembly.
    EvalDisasm {
        /// Disassembly records from `emit-dataset`.
        #[arg(long)]
        pairs: PathBuf,
        /// JSON lines of `{program_id, reply}`. Without replies or an
        /// endpoint the reference IR is scored.
        #[arg(long)]
        replies: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Style::Native)]
        style: Style,
    },
    /// Write instruction-tuning records for the corpus.
    EmitDataset {
        #[arg(long, value_enum, default_value_t = Task::All)]
        task: Task,
        /// Pipeline for emulation records.
        #[arg(long, default_value = "module(default<Oz>)")]
        pipeline: String,
        /// Fix the known template typos instead of reproducing them.
        #[arg(long)]
        corrected_wording: bool,
        #[arg(long, value_enum, default_value_t = DisasmSource::Oz)]
        disasm_source: DisasmSource,
        /// Command that reads a prompt on stdin and prints its token count.
        #[arg(long)]
        token_counter: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Style {
    Native,
    ThirdParty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    EmulateIr,
    EmulateAsm,
    FlagTune,
    Disassemble,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DisasmSource {
    Oz,
    AsEmitted,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
