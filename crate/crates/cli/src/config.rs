//! Settings resolution: command-line flags, then environment (both handled
//! by clap), then the TOML config file, then built-in defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use passtune::toolchain::ToolchainConfig;
use serde::Deserialize;

use crate::{Common, Format};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    backend: Option<String>,
    catalog: Option<PathBuf>,
    corpus: Option<PathBuf>,
    store: Option<PathBuf>,
    trials: Option<u64>,
    max_len: Option<usize>,
    timeout: Option<u64>,
    seed: Option<u64>,
    workers: Option<usize>,
    suite: Option<PathBuf>,
    top_k: Option<usize>,
    endpoint: Option<PathBuf>,
    budget_tokens: Option<usize>,
    output: Option<PathBuf>,
    format: Option<Format>,
    toolchain: ToolchainConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendKind {
    Llvm,
    Mock,
    Replay(PathBuf),
}

impl BackendKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "llvm" => BackendKind::Llvm,
            "mock" => BackendKind::Mock,
            _ => match s.strip_prefix("replay:") {
                Some(dir) if !dir.is_empty() => BackendKind::Replay(dir.into()),
                _ => bail!("unknown backend `{s}`; expected llvm, mock or replay:<dir>"),
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub backend: BackendKind,
    pub catalog: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub trials: u64,
    pub max_len: usize,
    pub timeout: Duration,
    pub seed: u64,
    pub workers: usize,
    pub suite: Option<PathBuf>,
    pub top_k: usize,
    pub endpoint: Option<PathBuf>,
    pub budget_tokens: usize,
    pub output: Option<PathBuf>,
    pub format: Format,
    pub toolchain: ToolchainConfig,
}

impl Settings {
    pub fn resolve(c: Common) -> Result<Self> {
        let file = match &c.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let backend = c.backend.or(file.backend).unwrap_or_else(|| "llvm".into());
        let timeout = c.timeout.or(file.timeout).unwrap_or(120);
        if timeout == 0 {
            bail!("--timeout must be positive");
        }
        let default_workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        Ok(Settings {
            backend: BackendKind::parse(&backend)?,
            catalog: c.catalog.or(file.catalog),
            corpus: c.corpus.or(file.corpus),
            store: c.store.or(file.store),
            trials: c.trials.or(file.trials).unwrap_or(100),
            max_len: c.max_len.or(file.max_len).unwrap_or(passtune::autotuner::DEFAULT_MAX_LIST_LEN),
            timeout: Duration::from_secs(timeout),
            seed: c.seed.or(file.seed).unwrap_or(0),
            workers: c.workers.or(file.workers).unwrap_or(default_workers).max(1),
            suite: c.suite.or(file.suite),
            top_k: c.top_k.or(file.top_k).unwrap_or(100),
            endpoint: c.endpoint.or(file.endpoint),
            budget_tokens: c
                .budget_tokens
                .or(file.budget_tokens)
                .unwrap_or(passtune::dataset::DEFAULT_TOKEN_BUDGET),
            output: c.output.or(file.output),
            format: c.format.or(file.format).unwrap_or(Format::Human),
            toolchain: ToolchainConfig::from_env()
                .or(file.toolchain)
                .or(ToolchainConfig::from_path()),
        })
    }

    pub fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        value.as_deref().with_context(|| format!("{flag} is required"))
    }
}
