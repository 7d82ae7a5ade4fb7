use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Once;

use anyhow::{bail, Context, Result};
use passtune::autotuner::{broadcast_top_k, Autotuner, SearchBudget, Store};
use passtune::dataset::{
    emit_disassembly_record, emit_emulation_record, emit_flag_tuning_record, flag_tuning_prompt_of,
    split_for_context, write_records, ByteEstimate, CommandCounter, DatasetError, DisassemblySource, EmitOptions,
    Flavor, PromptRecord, TaskKind, TokenCounter, Wording,
};
use passtune::evaluator::{
    round_trip, score_disassembly, score_flag_tuning, size_prediction_mape, RoundTripResult, SizePair,
};
use passtune::minimizer::minimize_store;
use passtune::model_client::{
    evaluate_with_fallback, generate_all, parse_code_block, parse_flag_tuning_reply, render_prompt, HttpClient,
    InferenceEndpoint, PromptStyle, TextGenerator,
};
use passtune::toolchain::{LlvmBackend, MockBackend, ReplayBackend};
use passtune::validator::{
    smoke_suite_path, validate_store, CheckedSuite, LlvmSuiteRunner, MockSuiteRunner, SuiteManifest, SuiteRunner,
    Validator,
};
use passtune::catalog::parse_pipeline_unchecked;
use passtune::{Backend, ModuleInput, PassCatalog, PassList};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{BackendKind, Settings};
use crate::{Cli, Command, DisasmSource, Format, Style, Task};

static STOP: AtomicBool = AtomicBool::new(false);

enum AnyBackend {
    Llvm(LlvmBackend),
    Mock(MockBackend),
    Replay(ReplayBackend),
}

impl AnyBackend {
    fn get(&self) -> &dyn Backend {
        match self {
            AnyBackend::Llvm(b) => b,
            AnyBackend::Mock(b) => b,
            AnyBackend::Replay(b) => b,
        }
    }
}

struct Ctx {
    s: Settings,
    backend: AnyBackend,
    catalog: PassCatalog,
}

impl Ctx {
    fn new(s: Settings) -> Result<Self> {
        let backend = match &s.backend {
            BackendKind::Llvm => AnyBackend::Llvm(LlvmBackend::new(s.toolchain.clone())?),
            BackendKind::Mock => AnyBackend::Mock(MockBackend),
            BackendKind::Replay(dir) => AnyBackend::Replay(
                ReplayBackend::load(dir).with_context(|| format!("loading replay set {}", dir.display()))?,
            ),
        };
        let catalog = match (&s.catalog, &backend) {
            (Some(path), _) => PassCatalog::load(Some(path))?,
            (None, AnyBackend::Mock(_)) => MockBackend::search_catalog(),
            (None, _) => PassCatalog::default_catalog(),
        };
        Ok(Ctx { s, backend, catalog })
    }

    fn backend(&self) -> &dyn Backend {
        self.backend.get()
    }

    fn store(&self) -> Result<Store> {
        let dir = Settings::require(&self.s.store, "--store")?;
        Ok(Store::open(dir)?)
    }

    fn runner(&self) -> Result<(Box<dyn SuiteRunner>, PathBuf)> {
        match &self.backend {
            AnyBackend::Llvm(b) => {
                let suite = self.s.suite.clone().unwrap_or_else(smoke_suite_path);
                Ok((Box::new(LlvmSuiteRunner::new(b.clone())), suite))
            }
            AnyBackend::Mock(_) => {
                let suite = Settings::require(&self.s.suite, "--suite")?.to_path_buf();
                Ok((Box::new(MockSuiteRunner), suite))
            }
            AnyBackend::Replay(_) => bail!("the replay backend cannot build test programs"),
        }
    }

    fn generator(&self) -> Result<Option<HttpClient>> {
        let Some(path) = &self.s.endpoint else {
            return Ok(None);
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let endpoint: InferenceEndpoint = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(Some(HttpClient::new(endpoint)?))
    }
}

/// Writes a report as either a text table or JSON lines.
struct Report {
    format: Format,
    out: Box<dyn Write>,
}

impl Report {
    fn new(format: Format, output: Option<&Path>) -> Result<Self> {
        let out: Box<dyn Write> = match output {
            Some(p) => Box::new(io::BufWriter::new(
                fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
            )),
            None => Box::new(io::stdout().lock()),
        };
        Ok(Report { format, out })
    }

    fn emit(mut self, human: &str, rows: &[Value]) -> Result<()> {
        match self.format {
            Format::Human => self.out.write_all(human.as_bytes())?,
            Format::Jsonl => {
                for r in rows {
                    writeln!(self.out, "{r}")?;
                }
            }
        }
        self.out.flush()?;
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(Settings::resolve(cli.common)?)?;
    match cli.command {
        Command::Autotune { stop_after } => autotune(&ctx, stop_after),
        Command::Minimize { max_rounds } => minimize(&ctx, max_rounds),
        Command::Validate { max_alternatives } => validate(&ctx, max_alternatives),
        Command::Broadcast => broadcast(&ctx),
        Command::EvalFlags {
            results,
            prompts,
            replies,
            style,
            excluded,
        } => eval_flags(&ctx, results, prompts, replies, style, excluded),
        Command::EvalDisasm { pairs, replies, style } => eval_disasm(&ctx, &pairs, replies, style),
        Command::EmitDataset {
            task,
            pipeline,
            corrected_wording,
            disasm_source,
            token_counter,
        } => emit_dataset(&ctx, task, &pipeline, corrected_wording, disasm_source, token_counter),
    }
}

/// Every `.ll` file directly inside `dir`, sorted; ids are file stems.
pub fn load_corpus(dir: &Path) -> Result<Vec<ModuleInput>> {
    let mut modules = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading corpus {}", dir.display()))? {
        let path = entry?.path();
        let Some(id) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".ll")) else {
            continue;
        };
        if path.is_file() {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            modules.push(ModuleInput::new(id, text));
        }
    }
    if modules.is_empty() {
        bail!("no .ll files in {}", dir.display());
    }
    modules.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(modules)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

/// Search settings recorded with a store so that a resumed run cannot mix
/// differently seeded trials.
#[derive(Debug, PartialEq, Eq, Serialize, Deserialize)]
struct SearchParams {
    seed: u64,
    max_len: usize,
    catalog: String,
}

fn check_search_params(store: &Store, params: &SearchParams) -> Result<()> {
    let path = store.dir().join("search.json");
    if path.exists() {
        let text = fs::read_to_string(&path)?;
        let old: SearchParams = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if &old != params {
            bail!(
                "store was tuned with seed {} and max length {} (or a different catalog); resume with the same settings",
                old.seed,
                old.max_len
            );
        }
    } else {
        fs::write(&path, serde_json::to_string_pretty(params)? + "\n")?;
    }
    Ok(())
}

fn install_interrupt_handler() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        if let Err(e) = ctrlc::set_handler(|| STOP.store(true, Ordering::SeqCst)) {
            log::warn!("cannot install interrupt handler: {e}");
        }
    });
}

fn autotune(ctx: &Ctx, stop_after: Option<u64>) -> Result<()> {
    let corpus = load_corpus(Settings::require(&ctx.s.corpus, "--corpus")?)?;
    let mut store = ctx.store()?;
    let catalog_text: Vec<String> = ctx.catalog.iter().map(|p| format!("{} {}", p.level().as_str(), p.name())).collect();
    check_search_params(
        &store,
        &SearchParams {
            seed: ctx.s.seed,
            max_len: ctx.s.max_len,
            catalog: catalog_text.join("\n"),
        },
    )?;
    for m in &corpus {
        store.save_program(m)?;
    }
    let budget = SearchBudget {
        trials_per_program: ctx.s.trials,
        max_list_len: ctx.s.max_len,
        timeout: ctx.s.timeout,
        seed: ctx.s.seed,
    };
    install_interrupt_handler();
    let mut tuner = Autotuner::new(ctx.backend(), &ctx.catalog, budget)
        .workers(ctx.s.workers)
        .stop_flag(&STOP);
    if let Some(n) = stop_after {
        tuner = tuner.stop_after(n);
    }
    let summary = tuner.run(&corpus, &mut store)?;

    let mut human = format!(
        "{:<24}{:>9}{:>9}{:>9}{:>5}  pipeline\n",
        "program", "-Oz", "best", "vs -Oz", "len"
    );
    let mut rows = Vec::new();
    for (id, p) in &store.state().programs {
        let (Some(base), Some(best)) = (p.baseline, &p.best) else {
            human.push_str(&format!("{id:<24} excluded: {}\n", p.excluded.as_deref().unwrap_or("no result")));
            rows.push(json!({"program_id": id, "excluded": p.excluded}));
            continue;
        };
        let gain = if base.total() == 0 { 0.0 } else { 1.0 - best.size.total() as f64 / base.total() as f64 };
        human.push_str(&format!(
            "{id:<24}{:>9}{:>9}{:>8.2}%{:>5}  {}\n",
            base.total(),
            best.size.total(),
            gain * 100.0,
            best.pass_list.len(),
            best.pass_list
        ));
        rows.push(json!({
            "program_id": id,
            "oz": base.total(),
            "best": best.size.total(),
            "pipeline": best.pass_list.to_pipeline(),
            "trials": p.trials_done,
        }));
    }
    human.push_str(&format!(
        "{} programs, {} trials ({} duplicates, {} failures){}\n",
        summary.programs,
        summary.trials_run,
        summary.duplicates,
        summary.failures,
        if summary.interrupted { ", interrupted: rerun to resume" } else { "" }
    ));
    rows.push(json!({"summary": {
        "programs": summary.programs,
        "trials_run": summary.trials_run,
        "duplicates": summary.duplicates,
        "failures": summary.failures,
        "excluded": summary.excluded.len(),
        "interrupted": summary.interrupted,
    }}));
    Report::new(ctx.s.format, ctx.s.output.as_deref())?.emit(&human, &rows)
}

fn minimize(ctx: &Ctx, max_rounds: usize) -> Result<()> {
    let mut store = ctx.store()?;
    let s = minimize_store(&mut store, ctx.backend(), &ctx.catalog, max_rounds, ctx.s.workers, ctx.s.timeout)?;
    let mut human = format!(
        "minimized {} programs ({} already minimal, {} failed, {} not converged)\nlength  programs\n",
        s.minimized,
        s.skipped,
        s.failed.len(),
        s.not_converged.len()
    );
    let top = s.length_histogram.values().copied().max().unwrap_or(1).max(1);
    for (len, n) in &s.length_histogram {
        let bar = "#".repeat((n * 40).div_ceil(top));
        human.push_str(&format!("{len:>6}  {n:>8}  {bar}\n"));
    }
    for (id, e) in &s.failed {
        human.push_str(&format!("failed {id}: {e}\n"));
    }
    let rows = vec![serde_json::to_value(&s)?];
    Report::new(ctx.s.format, ctx.s.output.as_deref())?.emit(&human, &rows)
}

fn validate(ctx: &Ctx, max_alternatives: usize) -> Result<()> {
    let mut store = ctx.store()?;
    let (runner, suite_path) = ctx.runner()?;
    let manifest = SuiteManifest::load(&suite_path)?;
    let suite = CheckedSuite::check(manifest.programs, runner.as_ref())?;
    let validator = Validator::new(runner.as_ref(), suite).workers(ctx.s.workers);
    let s = validate_store(&mut store, &validator, max_alternatives)?;
    let mut human = format!(
        "{} unique lists: {} accepted, {} rejected\n",
        s.unique_lists, s.accepted, s.rejected
    );
    for id in &s.reverted {
        let best = store.state().program(id).and_then(|p| p.best.as_ref());
        if let Some(b) = best {
            human.push_str(&format!("reverted {id} to `{}` ({} bytes)\n", b.pass_list, b.size.total()));
        }
    }
    let rows = vec![json!({
        "unique_lists": s.unique_lists,
        "accepted": s.accepted,
        "rejected": s.rejected,
        "reverted": s.reverted,
    })];
    Report::new(ctx.s.format, ctx.s.output.as_deref())?.emit(&human, &rows)
}

fn broadcast(ctx: &Ctx) -> Result<()> {
    let mut store = ctx.store()?;
    let programs = store.load_programs()?;
    let s = broadcast_top_k(&mut store, &programs, ctx.s.top_k, ctx.backend(), ctx.s.workers, ctx.s.timeout)?;
    let human = format!(
        "{} candidate lists, {} evaluations ({} failed), {} programs improved\nunique best lists: {} -> {}\n",
        s.candidates.len(),
        s.evaluations,
        s.failures,
        s.improved_programs,
        s.unique_before,
        s.unique_after
    );
    let rows = vec![json!({
        "candidates": s.candidates.len(),
        "evaluations": s.evaluations,
        "failures": s.failures,
        "improved_programs": s.improved_programs,
        "unique_before": s.unique_before,
        "unique_after": s.unique_after,
    })];
    Report::new(ctx.s.format, ctx.s.output.as_deref())?.emit(&human, &rows)
}

#[derive(Debug, Deserialize)]
struct Reply {
    program_id: String,
    reply: String,
}

fn prompt_style(style: Style) -> PromptStyle {
    match style {
        Style::Native => PromptStyle::Native,
        Style::ThirdParty => PromptStyle::ThirdParty,
    }
}

/// Replies for `records`, from a file or an endpoint, in record order.
fn replies_for(ctx: &Ctx, records: &[PromptRecord], replies: Option<PathBuf>, style: Style) -> Result<Option<Vec<String>>> {
    if let Some(path) = replies {
        let mut by_id: HashMap<String, String> =
            read_jsonl::<Reply>(&path)?.into_iter().map(|r| (r.program_id, r.reply)).collect();
        return Ok(Some(
            records
                .iter()
                .map(|r| {
                    by_id.remove(&r.meta.program_id).unwrap_or_else(|| {
                        log::warn!("no reply for {}", r.meta.program_id);
                        String::new()
                    })
                })
                .collect(),
        ));
    }
    let Some(client) = ctx.generator()? else {
        return Ok(None);
    };
    let prompts = records
        .iter()
        .map(|r| render_prompt(r, prompt_style(style)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(query(&client, &prompts, ctx.s.workers)))
}

fn query(client: &dyn TextGenerator, prompts: &[String], window: usize) -> Vec<String> {
    generate_all(client, prompts, window)
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.unwrap_or_else(|e| {
                log::warn!("request {i} failed: {e}");
                String::new()
            })
        })
        .collect()
}

fn records_of(path: &Path, task: TaskKind) -> Result<Vec<PromptRecord>> {
    let all: Vec<PromptRecord> = read_jsonl(path)?;
    let n = all.len();
    let kept: Vec<PromptRecord> = all.into_iter().filter(|r| r.task == task).collect();
    if kept.len() < n {
        log::info!("ignoring {} records of other tasks", n - kept.len());
    }
    Ok(kept)
}

fn eval_flags(
    ctx: &Ctx,
    results: Option<PathBuf>,
    prompts: Option<PathBuf>,
    replies: Option<PathBuf>,
    style: Style,
    mut excluded: usize,
) -> Result<()> {
    let mut rows = Vec::new();
    let mut predictions = Vec::new();
    let pairs: Vec<SizePair> = match (results, prompts) {
        (Some(path), _) => read_jsonl(&path)?,
        (None, Some(path)) => {
            let records = records_of(&path, TaskKind::FlagTune)?;
            let Some(replies) = replies_for(ctx, &records, replies, style)? else {
                bail!("--replies or --endpoint is required with --prompts");
            };
            let runner = match &ctx.s.suite {
                Some(_) => Some(ctx.runner()?),
                None => None,
            };
            let validator = match &runner {
                Some((runner, suite)) => {
                    let programs = SuiteManifest::load(suite)?.programs;
                    let checked = CheckedSuite::check(programs, runner.as_ref())?;
                    Some(Validator::new(runner.as_ref(), checked).workers(ctx.s.workers))
                }
                None => None,
            };
            let mut pairs = Vec::new();
            for (record, reply) in records.iter().zip(&replies) {
                let id = &record.meta.program_id;
                let Ok(code) = parse_code_block(&record.prompt) else {
                    log::warn!("{id}: prompt has no code block");
                    excluded += 1;
                    continue;
                };
                let module = ModuleInput::new(id, format!("{code}\n"));
                let oz = match passtune::autotuner::oz_baseline(&module, ctx.backend(), ctx.s.timeout) {
                    Ok(size) => size,
                    Err(e) => {
                        log::warn!("{e}");
                        excluded += 1;
                        continue;
                    }
                };
                let parsed = parse_flag_tuning_reply(reply, &ctx.catalog);
                let eff = evaluate_with_fallback(&parsed, &module, oz, ctx.backend(), validator.as_ref(), ctx.s.timeout)?;
                if let (None, Some(p)) = (&eff.substituted, parsed.predicted_after) {
                    predictions.push((p, eff.size.total()));
                }
                rows.push(json!({
                    "program_id": id,
                    "pipeline": eff.pass_list.to_pipeline(),
                    "candidate": eff.size.total(),
                    "oz": oz.total(),
                    "substituted": eff.substituted,
                    "predicted_after": parsed.predicted_after,
                    "diagnostics": parsed.diagnostics,
                }));
                pairs.push(SizePair {
                    program_id: id.clone(),
                    candidate: eff.size.total(),
                    oz: oz.total(),
                });
            }
            pairs
        }
        (None, None) => bail!("one of --results or --prompts is required"),
    };
    let score = score_flag_tuning(&pairs, excluded);
    let mut human = score.to_table();
    for w in &score.warnings {
        human.push_str(&format!("warning: {w}\n"));
    }
    let mut summary = serde_json::to_value(&score)?;
    if !predictions.is_empty() {
        let mape = size_prediction_mape(&predictions);
        if let Some(v) = mape.value {
            human.push_str(&format!("size prediction MAPE {v:.3} over {} answers\n", mape.pairs));
        }
        summary["size_mape"] = serde_json::to_value(mape)?;
    }
    rows.push(json!({ "summary": summary }));
    Report::new(ctx.s.format, ctx.s.output.as_deref())?.emit(&human, &rows)
}

fn eval_disasm(ctx: &Ctx, pairs: &Path, replies: Option<PathBuf>, style: Style) -> Result<()> {
    let records = records_of(pairs, TaskKind::Disassemble)?;
    let replies = replies_for(ctx, &records, replies, style)?;
    let mut results = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let id = &record.meta.program_id;
        let asm = parse_code_block(&record.prompt)
            .map_err(|e| anyhow::anyhow!("{id}: prompt: {e}"))?
            .to_string();
        let candidate = match &replies {
            Some(r) => parse_code_block(&r[i]).map(str::to_string),
            None => parse_code_block(&record.label).map(str::to_string),
        };
        results.push(match candidate {
            Ok(ir) => round_trip(id, &asm, &ir, ctx.backend(), ctx.s.timeout)?,
            Err(e) => RoundTripResult {
                sample_id: id.clone(),
                round_trip_ok: false,
                bleu: 0.0,
                exact_match: false,
                diagnostics: format!("reply: {e}"),
            },
        });
    }
    let score = score_disassembly(&results);
    let mut rows: Vec<Value> = results.iter().map(serde_json::to_value).collect::<Result<_, _>>()?;
    rows.push(json!({ "summary": score }));
    Report::new(ctx.s.format, ctx.s.output.as_deref())?.emit(&score.to_table(), &rows)
}

fn emit_dataset(
    ctx: &Ctx,
    task: Task,
    pipeline: &str,
    corrected: bool,
    disasm_source: DisasmSource,
    token_counter: Option<String>,
) -> Result<()> {
    let corpus = load_corpus(Settings::require(&ctx.s.corpus, "--corpus")?)?;
    let emulation_list = parse_pipeline_unchecked(pipeline).with_context(|| format!("--pipeline `{pipeline}`"))?;
    let store = ctx.s.store.as_ref().map(Store::open).transpose()?;
    let opts = EmitOptions {
        wording: if corrected { Wording::Corrected } else { Wording::Verbatim },
        disassembly_source: match disasm_source {
            DisasmSource::Oz => DisassemblySource::OzOptimized,
            DisasmSource::AsEmitted => DisassemblySource::AsEmitted,
        },
        timeout: ctx.s.timeout,
    };
    let counter: Box<dyn TokenCounter> = match token_counter {
        Some(cmd) => {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts.next().context("--token-counter is empty")?;
            Box::new(CommandCounter {
                program: program.into(),
                args: parts.collect(),
            })
        }
        None => Box::new(ByteEstimate),
    };
    let tasks: &[TaskKind] = match task {
        Task::EmulateIr => &[TaskKind::EmulateIr],
        Task::EmulateAsm => &[TaskKind::EmulateAsm],
        Task::FlagTune => &[TaskKind::FlagTune],
        Task::Disassemble => &[TaskKind::Disassemble],
        Task::All => &[TaskKind::EmulateIr, TaskKind::EmulateAsm, TaskKind::FlagTune, TaskKind::Disassemble],
    };

    let backend = ctx.backend();
    let mut records = Vec::new();
    let mut skipped: BTreeMap<String, String> = BTreeMap::new();
    let mut excluded = Vec::new();
    for m in &corpus {
        let split = split_for_context(m, ctx.s.budget_tokens, counter.as_ref(), backend, &flag_tuning_prompt_of)?;
        excluded.extend(split.excluded);
        let best = store
            .as_ref()
            .and_then(|s| s.state().program(&m.id))
            .and_then(|p| p.best.as_ref())
            .map(|b| b.pass_list.clone());
        for piece in &split.modules {
            for &t in tasks {
                let r = match t {
                    TaskKind::EmulateIr => emit_emulation_record(piece, &emulation_list, Flavor::Ir, backend, &opts),
                    TaskKind::EmulateAsm => emit_emulation_record(piece, &emulation_list, Flavor::Asm, backend, &opts),
                    TaskKind::FlagTune => {
                        // Bests belong to whole modules; split pieces use -Oz.
                        let pl = best.clone().filter(|_| piece.id == m.id).unwrap_or_else(PassList::oz);
                        emit_flag_tuning_record(piece, &pl, backend, &opts)
                    }
                    TaskKind::Disassemble => emit_disassembly_record(piece, backend, &opts),
                };
                match r {
                    Ok(r) => records.push(r),
                    Err(DatasetError::Skipped { program, reason }) => {
                        log::warn!("skipping {t:?} for {program}: {reason}");
                        skipped.insert(format!("{program} {t:?}"), reason);
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
    let n = records.len();
    let mut out: Box<dyn Write> = match &ctx.s.output {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    write_records(&mut out, records)?;
    eprintln!(
        "wrote {n} records ({} skipped, {} modules over the token budget)",
        skipped.len(),
        excluded.len()
    );
    for (id, reason) in &excluded {
        log::warn!("excluded {id}: {reason}");
    }
    Ok(())
}
