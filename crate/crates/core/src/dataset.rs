//! Instruction-tuning records for compiler emulation, flag tuning and
//! disassembly.
//!
//! [`Wording::Verbatim`] reproduces the established prompt bytes exactly,
//! quirks included: emulation answers say "binary sise", and the flag-tuning
//! prompt of a record that shows an improvement has no space after
//! `[/INST]`. [`Wording::Corrected`] fixes both for fresh datasets.

use std::path::PathBuf;
use std::process::Command;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::PassList;
use crate::toolchain::{run_with_timeout, Backend, BinarySize, Emit, ModuleInput, ToolchainError, DEFAULT_TIMEOUT};

pub const DEFAULT_TOKEN_BUDGET: usize = 15_000;

#[derive(Debug, Error)]
pub enum DatasetError {
    /// The program cannot produce this record; not fatal for a corpus run.
    #[error("skipping {program}: {reason}")]
    Skipped { program: String, reason: String },
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error("token counter failed: {0}")]
    Counter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    EmulateIr,
    EmulateAsm,
    FlagTune,
    Disassemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    Ir,
    Asm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Wording {
    #[default]
    Verbatim,
    Corrected,
}

/// Which IR a disassembly record pairs with its assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DisassemblySource {
    /// The module after `-Oz`.
    #[default]
    OzOptimized,
    /// The module exactly as given.
    AsEmitted,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub program_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_before: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_after: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructions_before: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructions_after: Option<usize>,
    /// For flag tuning: whether the label shows a size reduction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improved: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub task: TaskKind,
    pub prompt: String,
    pub label: String,
    #[serde(flatten)]
    pub meta: RecordMeta,
}

impl PromptRecord {
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("records serialize");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmitOptions {
    pub wording: Wording,
    pub disassembly_source: DisassemblySource,
    pub timeout: Duration,
}

impl Default for EmitOptions {
    fn default() -> Self {
        EmitOptions {
            wording: Wording::Verbatim,
            disassembly_source: DisassemblySource::OzOptimized,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

fn language(flavor: Flavor) -> &'static str {
    match flavor {
        Flavor::Ir => "LLVM-IR",
        Flavor::Asm => "assembly",
    }
}

fn size_word(wording: Wording) -> &'static str {
    match wording {
        Wording::Verbatim => "sise",
        Wording::Corrected => "size",
    }
}

pub fn emulation_prompt(flavor: Flavor, pipeline: &str, ir: &str, instructions: usize, size: u64) -> String {
    format!(
        "[INST] Give the {} for the following code when optimized using opt -p '{pipeline}':\n\n<code>{ir}</code>\n\nThe input code has instruction count {instructions} and binary size {size} bytes. [/INST] ",
        language(flavor)
    )
}

pub fn emulation_label(flavor: Flavor, wording: Wording, code: &str, instructions: usize, size: u64) -> String {
    format!(
        "The {} will have instruction count {instructions} and binary {} {size} bytes:\n\n<code>{code}</code>",
        language(flavor),
        size_word(wording)
    )
}

fn trim_newline(s: &str) -> &str {
    s.strip_suffix('\n').unwrap_or(s)
}

pub fn flag_tuning_prompt(ir: &str, improved: bool, wording: Wording) -> String {
    let close = if improved && wording == Wording::Verbatim { " [/INST]" } else { " [/INST] " };
    format!(
        "[INST] Tell me how to optimize this LLVM-IR for object file size:\n\n<code>{}</code>{close}",
        trim_newline(ir)
    )
}

pub fn flag_tuning_label(before: u64, after: u64, pipeline: &str, optimized_ir: &str) -> String {
    format!(
        "The code has object file size of {before} which can be reduced to {after} by running:\n\n`opt -p '{pipeline}'`\n\nThis will produce code:\n\n<code>{}</code>",
        trim_newline(optimized_ir)
    )
}

pub fn no_improvement_label(size: u64) -> String {
    format!("The code has object file size of {size} which cannot be reduced further")
}

pub fn disassembly_prompt(asm: &str) -> String {
    format!("[INST] Disassemble this code to LLVM-IR:\n\n<code>{asm}</code> [/INST] ")
}

pub fn disassembly_label(ir: &str) -> String {
    format!("<code>{ir}</code>")
}

fn skipped(m: &ModuleInput, reason: impl Into<String>) -> DatasetError {
    DatasetError::Skipped {
        program: m.id.clone(),
        reason: reason.into(),
    }
}

/// Compiles and returns (optimized IR, size, instruction count).
fn measured<B: Backend + ?Sized>(
    m: &ModuleInput,
    pl: &PassList,
    backend: &B,
    timeout: Duration,
) -> Result<(String, BinarySize, usize), DatasetError> {
    let out = backend.compile(m, pl, timeout)?;
    match (out.is_ok(), out.text(), out.size, out.ir_instruction_count) {
        (true, Some(ir), Some(size), Some(n)) => Ok((ir.to_string(), size, n)),
        _ => Err(skipped(
            m,
            format!("`{}` failed ({:?}): {}", pl, out.status, out.diagnostics.trim()),
        )),
    }
}

fn assembly_of<B: Backend + ?Sized>(m: &ModuleInput, ir: &str, backend: &B, timeout: Duration) -> Result<String, DatasetError> {
    let out = backend.lower(ir, Emit::Assembly, timeout)?;
    match out.text().filter(|_| out.is_ok()) {
        Some(asm) => Ok(asm.to_string()),
        None => Err(skipped(m, format!("lowering to assembly failed: {}", out.diagnostics.trim()))),
    }
}

pub fn emit_emulation_record<B: Backend + ?Sized>(
    m: &ModuleInput,
    pl: &PassList,
    flavor: Flavor,
    backend: &B,
    opts: &EmitOptions,
) -> Result<PromptRecord, DatasetError> {
    let (_, size_in, n_in) = measured(m, &PassList::empty(), backend, opts.timeout)?;
    let (ir_out, size_out, n_out) = measured(m, pl, backend, opts.timeout)?;
    let code = match flavor {
        Flavor::Ir => ir_out,
        Flavor::Asm => assembly_of(m, &ir_out, backend, opts.timeout)?,
    };
    let pipeline = pl.to_pipeline();
    Ok(PromptRecord {
        task: match flavor {
            Flavor::Ir => TaskKind::EmulateIr,
            Flavor::Asm => TaskKind::EmulateAsm,
        },
        prompt: emulation_prompt(flavor, &pipeline, &m.ir_text, n_in, size_in.total()),
        label: emulation_label(flavor, opts.wording, &code, n_out, size_out.total()),
        meta: RecordMeta {
            program_id: m.id.clone(),
            pipeline: Some(pipeline),
            size_before: Some(size_in.total()),
            size_after: Some(size_out.total()),
            instructions_before: Some(n_in),
            instructions_after: Some(n_out),
            improved: None,
        },
    })
}

/// The full answer when `best` beats the unoptimized size of `m`, otherwise
/// the "cannot be reduced further" answer.
pub fn emit_flag_tuning_record<B: Backend + ?Sized>(
    m: &ModuleInput,
    best: &PassList,
    backend: &B,
    opts: &EmitOptions,
) -> Result<PromptRecord, DatasetError> {
    let (_, size_in, n_in) = measured(m, &PassList::empty(), backend, opts.timeout)?;
    let (ir_out, size_out, n_out) = measured(m, best, backend, opts.timeout)?;
    let improved = size_out.total() < size_in.total();
    let pipeline = best.to_pipeline();
    let label = if improved {
        flag_tuning_label(size_in.total(), size_out.total(), &pipeline, &ir_out)
    } else {
        no_improvement_label(size_in.total())
    };
    Ok(PromptRecord {
        task: TaskKind::FlagTune,
        prompt: flag_tuning_prompt(&m.ir_text, improved, opts.wording),
        label,
        meta: RecordMeta {
            program_id: m.id.clone(),
            pipeline: improved.then_some(pipeline),
            size_before: Some(size_in.total()),
            size_after: Some(if improved { size_out.total() } else { size_in.total() }),
            instructions_before: Some(n_in),
            instructions_after: Some(if improved { n_out } else { n_in }),
            improved: Some(improved),
        },
    })
}

pub fn emit_disassembly_record<B: Backend + ?Sized>(
    m: &ModuleInput,
    backend: &B,
    opts: &EmitOptions,
) -> Result<PromptRecord, DatasetError> {
    let ir = match opts.disassembly_source {
        DisassemblySource::AsEmitted => m.ir_text.clone(),
        DisassemblySource::OzOptimized => {
            let out = backend.apply_passes(m, &PassList::oz(), opts.timeout)?;
            match out.text().filter(|_| out.is_ok()) {
                Some(ir) => ir.to_string(),
                None => return Err(skipped(m, format!("-Oz failed: {}", out.diagnostics.trim()))),
            }
        }
    };
    let asm = assembly_of(m, &ir, backend, opts.timeout)?;
    Ok(PromptRecord {
        task: TaskKind::Disassemble,
        prompt: disassembly_prompt(&asm),
        label: disassembly_label(&ir),
        meta: RecordMeta {
            program_id: m.id.clone(),
            pipeline: match opts.disassembly_source {
                DisassemblySource::AsEmitted => None,
                DisassemblySource::OzOptimized => Some(PassList::oz().to_pipeline()),
            },
            ..RecordMeta::default()
        },
    })
}

/// Counts model tokens in a prompt.
pub trait TokenCounter {
    fn count(&self, text: &str) -> Result<usize, DatasetError>;
}

/// Approximates one token per four bytes, rounding up.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteEstimate;

impl TokenCounter for ByteEstimate {
    fn count(&self, text: &str) -> Result<usize, DatasetError> {
        Ok(text.len().div_ceil(4))
    }
}

/// Runs an external command with the text on stdin; it must print the count.
#[derive(Debug, Clone)]
pub struct CommandCounter {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl TokenCounter for CommandCounter {
    fn count(&self, text: &str) -> Result<usize, DatasetError> {
        let mut cmd = Command::new(&self.program);
        cmd.args(&self.args);
        let out = run_with_timeout(cmd, Some(text.as_bytes()), Duration::from_secs(60))
            .map_err(|e| DatasetError::Counter(format!("{}: {e}", self.program.display())))?;
        if !out.success() {
            return Err(DatasetError::Counter(format!(
                "{} ({}): {}",
                self.program.display(),
                out.exit_description(),
                out.stderr_lossy().trim()
            )));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        stdout
            .trim()
            .parse()
            .map_err(|_| DatasetError::Counter(format!("expected an integer, got `{}`", stdout.trim())))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub modules: Vec<ModuleInput>,
    /// Modules (or functions) that do not fit even on their own.
    pub excluded: Vec<(String, String)>,
}

/// Passes modules whose prompt fits `max_tokens` through unchanged and splits
/// the rest into one module per function.
pub fn split_for_context<B: Backend + ?Sized>(
    m: &ModuleInput,
    max_tokens: usize,
    counter: &dyn TokenCounter,
    backend: &B,
    prompt_of: &dyn Fn(&ModuleInput) -> String,
) -> Result<Split, DatasetError> {
    let mut split = Split::default();
    let fits = |x: &ModuleInput| -> Result<(bool, usize), DatasetError> {
        let n = counter.count(&prompt_of(x))?;
        Ok((n <= max_tokens, n))
    };
    let (ok, n) = fits(m)?;
    if ok {
        split.modules.push(m.clone());
        return Ok(split);
    }
    let children = backend.extract_functions(m);
    if children.len() <= 1 {
        split
            .excluded
            .push((m.id.clone(), format!("prompt has {n} tokens and the module cannot be split further")));
        return Ok(split);
    }
    for child in children {
        match child {
            Ok(c) => {
                let (ok, n) = fits(&c)?;
                if ok {
                    split.modules.push(c);
                } else {
                    split.excluded.push((c.id.clone(), format!("prompt has {n} tokens")));
                }
            }
            Err(e) => split.excluded.push((m.id.clone(), e.to_string())),
        }
    }
    Ok(split)
}

/// Default prompt used for budget checks: the flag-tuning prompt.
pub fn flag_tuning_prompt_of(m: &ModuleInput) -> String {
    flag_tuning_prompt(&m.ir_text, false, Wording::Verbatim)
}

/// Writes records as JSON lines, sorted by program id then task.
pub fn write_records<W: std::io::Write>(out: &mut W, mut records: Vec<PromptRecord>) -> std::io::Result<()> {
    records.sort_by(|a, b| {
        (a.meta.program_id.as_str(), a.task as u8).cmp(&(b.meta.program_id.as_str(), b.task as u8))
    });
    for r in records {
        out.write_all(r.to_json_line().as_bytes())?;
    }
    out.flush()
}
