//! Backend contract for every compiler interaction.
//!
//! [`LlvmBackend`] drives `opt`, `clang`, `size` and `llvm-extract` as
//! subprocesses. [`MockBackend`] is a token-rewriting model small enough to
//! brute-force. [`ReplayBackend`] serves recorded toolchain outputs so
//! fixture-driven tests run without LLVM installed.

mod ir;
mod llvm;
pub mod mock;
mod process;
mod replay;
mod size;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::PassList;

pub use ir::{count_ir_instructions, defined_functions};
pub use llvm::{find_in_path, llvm_major_version, LlvmBackend, ToolchainConfig, REQUIRED_LLVM_MAJOR};
pub use mock::{MockBackend, MockItem, MockModule};
pub use process::{run_with_timeout, ProcessOutput};
pub use replay::ReplayBackend;
pub use size::{berkeley_size_of_elf, parse_berkeley_output, SyntheticObject};

/// Default wall-clock limit for one compiler invocation.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error)]
pub enum ToolchainError {
    #[error("tool `{0}` is not configured")]
    MissingTool(&'static str),
    #[error("{tool} reports LLVM {found}, expected major version {expected}")]
    VersionMismatch {
        tool: String,
        found: String,
        expected: u32,
    },
    #[error("failed to run {tool}: {message}")]
    Spawn { tool: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot measure object: {0}")]
    BadObject(String),
    #[error("cannot parse IR: {0}")]
    BadIr(String),
    #[error("extracting `{function}` failed: {message}")]
    Extract { function: String, message: String },
}

/// `.text + .data` of a lowered object. `.bss` is never counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct BinarySize {
    pub text_bytes: u64,
    pub data_bytes: u64,
}

impl BinarySize {
    pub fn new(text_bytes: u64, data_bytes: u64) -> Self {
        BinarySize {
            text_bytes,
            data_bytes,
        }
    }

    pub fn total(&self) -> u64 {
        self.text_bytes + self.data_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompileStatus {
    Ok,
    CompilerError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Artifact {
    Ir(String),
    Assembly(String),
    Object(Vec<u8>),
}

impl Artifact {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            Artifact::Ir(s) | Artifact::Assembly(s) => Some(s),
            Artifact::Object(_) => None,
        }
    }
}

/// Result of one backend invocation.
///
/// `artifact` is present iff `status` is `Ok`; `size` is only ever present on
/// `Ok` outcomes that were lowered to an object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompilationOutcome {
    pub status: CompileStatus,
    pub size: Option<BinarySize>,
    pub ir_instruction_count: Option<usize>,
    pub artifact: Option<Artifact>,
    pub diagnostics: String,
}

impl CompilationOutcome {
    pub fn ok(artifact: Artifact) -> Self {
        CompilationOutcome {
            status: CompileStatus::Ok,
            size: None,
            ir_instruction_count: None,
            artifact: Some(artifact),
            diagnostics: String::new(),
        }
    }

    pub fn compiler_error(diagnostics: impl Into<String>) -> Self {
        CompilationOutcome {
            status: CompileStatus::CompilerError,
            size: None,
            ir_instruction_count: None,
            artifact: None,
            diagnostics: diagnostics.into(),
        }
    }

    pub fn timeout(diagnostics: impl Into<String>) -> Self {
        CompilationOutcome {
            status: CompileStatus::Timeout,
            size: None,
            ir_instruction_count: None,
            artifact: None,
            diagnostics: diagnostics.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == CompileStatus::Ok
    }

    pub fn with_size(mut self, size: BinarySize) -> Self {
        self.size = Some(size);
        self
    }

    pub fn with_instruction_count(mut self, n: usize) -> Self {
        self.ir_instruction_count = Some(n);
        self
    }

    pub fn text(&self) -> Option<&str> {
        self.artifact.as_ref().and_then(Artifact::as_text)
    }

    pub fn object_bytes(&self) -> Option<&[u8]> {
        match &self.artifact {
            Some(Artifact::Object(b)) => Some(b),
            _ => None,
        }
    }
}

/// Unoptimized IR for one program, as emitted by the frontend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleInput {
    pub id: String,
    pub ir_text: String,
}

impl ModuleInput {
    pub fn new(id: impl Into<String>, ir_text: impl Into<String>) -> Self {
        let ir_text = ir_text.into();
        assert!(!ir_text.is_empty(), "module IR must be non-empty");
        ModuleInput {
            id: id.into(),
            ir_text,
        }
    }

    /// Id of the module holding only `function`.
    pub fn child_id(&self, function: &str) -> String {
        format!("{}:{}", self.id, function)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emit {
    Object,
    Assembly,
}

/// Operations every compiler backend provides.
///
/// `Err` is reserved for infrastructure failures (a tool cannot be spawned,
/// the scratch directory is unwritable). Compiler crashes and timeouts are
/// ordinary outcomes.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    /// Runs the optimizer. An empty list returns the input IR unchanged.
    fn apply_passes(
        &self,
        module: &ModuleInput,
        passes: &PassList,
        timeout: Duration,
    ) -> Result<CompilationOutcome, ToolchainError>;

    /// Lowers IR to an object (with its size) or to textual assembly.
    fn lower(&self, ir: &str, emit: Emit, timeout: Duration) -> Result<CompilationOutcome, ToolchainError>;

    fn measure_binary_size(&self, object: &[u8]) -> Result<BinarySize, ToolchainError>;

    fn count_ir_instructions(&self, ir: &str) -> Result<usize, ToolchainError>;

    /// One module per defined function. Failures are reported per function.
    fn extract_functions(&self, module: &ModuleInput) -> Vec<Result<ModuleInput, ToolchainError>>;

    /// Optimizes, lowers to an object, and measures it. On success the
    /// artifact is the optimized IR and both size and instruction count are
    /// set.
    fn compile(
        &self,
        module: &ModuleInput,
        passes: &PassList,
        timeout: Duration,
    ) -> Result<CompilationOutcome, ToolchainError> {
        let optimized = self.apply_passes(module, passes, timeout)?;
        if !optimized.is_ok() {
            return Ok(optimized);
        }
        let ir = optimized.text().unwrap_or_default().to_string();
        let lowered = self.lower(&ir, Emit::Object, timeout)?;
        if !lowered.is_ok() {
            return Ok(lowered);
        }
        let size = match lowered.size {
            Some(size) => size,
            None => self.measure_binary_size(lowered.object_bytes().unwrap_or_default())?,
        };
        let count = match optimized.ir_instruction_count {
            Some(n) => n,
            None => self.count_ir_instructions(&ir)?,
        };
        Ok(CompilationOutcome {
            status: CompileStatus::Ok,
            size: Some(size),
            ir_instruction_count: Some(count),
            artifact: Some(Artifact::Ir(ir)),
            diagnostics: optimized.diagnostics,
        })
    }

    /// Size of `module` when lowered without running the optimizer.
    fn size_unoptimized(&self, module: &ModuleInput, timeout: Duration) -> Result<CompilationOutcome, ToolchainError> {
        self.compile(module, &PassList::empty(), timeout)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn apply_passes(&self, m: &ModuleInput, p: &PassList, t: Duration) -> Result<CompilationOutcome, ToolchainError> {
        (**self).apply_passes(m, p, t)
    }
    fn lower(&self, ir: &str, emit: Emit, t: Duration) -> Result<CompilationOutcome, ToolchainError> {
        (**self).lower(ir, emit, t)
    }
    fn measure_binary_size(&self, object: &[u8]) -> Result<BinarySize, ToolchainError> {
        (**self).measure_binary_size(object)
    }
    fn count_ir_instructions(&self, ir: &str) -> Result<usize, ToolchainError> {
        (**self).count_ir_instructions(ir)
    }
    fn extract_functions(&self, m: &ModuleInput) -> Vec<Result<ModuleInput, ToolchainError>> {
        (**self).extract_functions(m)
    }
    fn compile(&self, m: &ModuleInput, p: &PassList, t: Duration) -> Result<CompilationOutcome, ToolchainError> {
        (**self).compile(m, p, t)
    }
}
