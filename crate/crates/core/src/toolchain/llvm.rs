//! Subprocess backend for an installed LLVM toolchain.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use log::debug;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::ir;
use super::process::run_with_timeout;
use super::size::{berkeley_size_of_elf, parse_berkeley_output};
use super::{Artifact, Backend, BinarySize, CompilationOutcome, Emit, ModuleInput, ToolchainError};
use crate::catalog::PassList;

pub const REQUIRED_LLVM_MAJOR: u32 = 17;

const VERSION_TIMEOUT: Duration = Duration::from_secs(30);

/// Tool locations. Every field is optional so that sources can be layered.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolchainConfig {
    pub opt: Option<PathBuf>,
    pub clang: Option<PathBuf>,
    pub clangxx: Option<PathBuf>,
    pub size: Option<PathBuf>,
    pub llvm_extract: Option<PathBuf>,
    pub scratch_dir: Option<PathBuf>,
    pub allow_version_mismatch: bool,
}

impl ToolchainConfig {
    pub const ENV_OPT: &'static str = "PASSTUNE_OPT";
    pub const ENV_CLANG: &'static str = "PASSTUNE_CLANG";
    pub const ENV_CLANGXX: &'static str = "PASSTUNE_CLANGXX";
    pub const ENV_SIZE: &'static str = "PASSTUNE_SIZE";
    pub const ENV_LLVM_EXTRACT: &'static str = "PASSTUNE_LLVM_EXTRACT";
    pub const ENV_SCRATCH: &'static str = "PASSTUNE_SCRATCH";
    pub const ENV_ALLOW_MISMATCH: &'static str = "PASSTUNE_ALLOW_VERSION_MISMATCH";

    pub fn from_env() -> Self {
        let path = |k: &str| std::env::var_os(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        ToolchainConfig {
            opt: path(Self::ENV_OPT),
            clang: path(Self::ENV_CLANG),
            clangxx: path(Self::ENV_CLANGXX),
            size: path(Self::ENV_SIZE),
            llvm_extract: path(Self::ENV_LLVM_EXTRACT),
            scratch_dir: path(Self::ENV_SCRATCH),
            allow_version_mismatch: std::env::var(Self::ENV_ALLOW_MISMATCH)
                .map(|v| matches!(v.as_str(), "1" | "true" | "yes"))
                .unwrap_or(false),
        }
    }

    /// Fills unset fields of `self` from `fallback`.
    pub fn or(self, fallback: ToolchainConfig) -> Self {
        ToolchainConfig {
            opt: self.opt.or(fallback.opt),
            clang: self.clang.or(fallback.clang),
            clangxx: self.clangxx.or(fallback.clangxx),
            size: self.size.or(fallback.size),
            llvm_extract: self.llvm_extract.or(fallback.llvm_extract),
            scratch_dir: self.scratch_dir.or(fallback.scratch_dir),
            allow_version_mismatch: self.allow_version_mismatch || fallback.allow_version_mismatch,
        }
    }

    /// Looks tools up on `PATH`, preferring the `-17` suffixed names.
    pub fn from_path() -> Self {
        let v = REQUIRED_LLVM_MAJOR;
        ToolchainConfig {
            opt: find_in_path(&[&format!("opt-{v}"), "opt"]),
            clang: find_in_path(&[&format!("clang-{v}"), "clang"]),
            clangxx: find_in_path(&[&format!("clang++-{v}"), "clang++"]),
            size: find_in_path(&[&format!("llvm-size-{v}"), "llvm-size", "size"]),
            llvm_extract: find_in_path(&[&format!("llvm-extract-{v}"), "llvm-extract"]),
            scratch_dir: None,
            allow_version_mismatch: false,
        }
    }

    /// Environment first, then `PATH`.
    pub fn discover() -> Self {
        Self::from_env().or(Self::from_path())
    }
}

pub fn find_in_path(names: &[&str]) -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    for name in names {
        for dir in std::env::split_paths(&path) {
            let candidate = dir.join(name);
            if candidate.is_file() {
                return Some(candidate);
            }
        }
    }
    None
}

/// Reads the major version from `tool --version`.
pub fn llvm_major_version(tool: &Path) -> Result<(u32, String), ToolchainError> {
    let mut cmd = Command::new(tool);
    cmd.arg("--version");
    let out = run_with_timeout(cmd, None, VERSION_TIMEOUT).map_err(|e| ToolchainError::Spawn {
        tool: tool.display().to_string(),
        message: e.to_string(),
    })?;
    let text = String::from_utf8_lossy(&out.stdout);
    let re = Regex::new(r"version (\d+)\.(\d+)(?:\.(\d+))?").unwrap();
    let caps = re.captures(&text).ok_or_else(|| ToolchainError::Spawn {
        tool: tool.display().to_string(),
        message: "no version string in --version output".into(),
    })?;
    let major = caps[1].parse().unwrap_or(0);
    Ok((major, caps[0].trim_start_matches("version ").to_string()))
}

#[derive(Debug, Clone)]
pub struct LlvmBackend {
    config: ToolchainConfig,
}

impl LlvmBackend {
    /// Validates the configured `opt` and `clang` against LLVM 17 unless the
    /// override is set. Tools that are not configured fail when first used.
    pub fn new(config: ToolchainConfig) -> Result<Self, ToolchainError> {
        if !config.allow_version_mismatch {
            for tool in [&config.opt, &config.clang].into_iter().flatten() {
                let (major, found) = llvm_major_version(tool)?;
                if major != REQUIRED_LLVM_MAJOR {
                    return Err(ToolchainError::VersionMismatch {
                        tool: tool.display().to_string(),
                        found,
                        expected: REQUIRED_LLVM_MAJOR,
                    });
                }
            }
        }
        Ok(LlvmBackend { config })
    }

    pub fn config(&self) -> &ToolchainConfig {
        &self.config
    }

    /// True when `opt`, `clang` and `size` are configured at LLVM 17.
    pub fn probe_llvm17() -> Option<LlvmBackend> {
        let config = ToolchainConfig::discover();
        config.opt.as_ref()?;
        config.clang.as_ref()?;
        let config = ToolchainConfig {
            allow_version_mismatch: false,
            ..config
        };
        LlvmBackend::new(config).ok()
    }

    pub(crate) fn tool(&self, which: &'static str) -> Result<&Path, ToolchainError> {
        let p = match which {
            "opt" => &self.config.opt,
            "clang" => &self.config.clang,
            "clang++" => &self.config.clangxx,
            "size" => &self.config.size,
            "llvm-extract" => &self.config.llvm_extract,
            _ => &None,
        };
        p.as_deref().ok_or(ToolchainError::MissingTool(which))
    }

    /// `clang++`, falling back to the sibling of the configured `clang`.
    pub(crate) fn clangxx(&self) -> Result<PathBuf, ToolchainError> {
        if let Some(p) = &self.config.clangxx {
            return Ok(p.clone());
        }
        let clang = self.tool("clang")?;
        let name = clang
            .file_name()
            .map(|n| n.to_string_lossy().replacen("clang", "clang++", 1))
            .ok_or(ToolchainError::MissingTool("clang++"))?;
        Ok(clang.with_file_name(name))
    }

    pub(crate) fn scratch(&self) -> Result<tempfile::TempDir, ToolchainError> {
        let dir = match &self.config.scratch_dir {
            Some(root) => {
                std::fs::create_dir_all(root)?;
                tempfile::Builder::new().prefix("passtune-").tempdir_in(root)?
            }
            None => tempfile::Builder::new().prefix("passtune-").tempdir()?,
        };
        Ok(dir)
    }

    fn run(
        &self,
        tool: &Path,
        cmd: Command,
        stdin: Option<&[u8]>,
        timeout: Duration,
    ) -> Result<super::ProcessOutput, ToolchainError> {
        debug!("running {:?}", cmd);
        run_with_timeout(cmd, stdin, timeout).map_err(|e| ToolchainError::Spawn {
            tool: tool.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn failure_outcome(out: &super::ProcessOutput, what: &str) -> CompilationOutcome {
    if out.timed_out() {
        CompilationOutcome::timeout(format!("{what} timed out"))
    } else {
        CompilationOutcome::compiler_error(format!(
            "{what} failed ({}): {}",
            out.exit_description(),
            out.stderr_lossy()
        ))
    }
}

impl Backend for LlvmBackend {
    fn name(&self) -> &str {
        "llvm"
    }

    fn apply_passes(
        &self,
        module: &ModuleInput,
        passes: &PassList,
        timeout: Duration,
    ) -> Result<CompilationOutcome, ToolchainError> {
        if passes.is_empty() {
            let count = ir::count_ir_instructions(&module.ir_text).ok();
            let mut out = CompilationOutcome::ok(Artifact::Ir(module.ir_text.clone()));
            out.ir_instruction_count = count;
            return Ok(out);
        }
        let opt = self.tool("opt")?;
        let dir = self.scratch()?;
        let input = dir.path().join("input.ll");
        let output = dir.path().join("output.ll");
        std::fs::write(&input, &module.ir_text)?;
        let mut cmd = Command::new(opt);
        cmd.arg(&input)
            .arg("-S")
            .arg("-o")
            .arg(&output)
            .arg("-p")
            .arg(passes.to_pipeline());
        let out = self.run(opt, cmd, None, timeout)?;
        if !out.success() {
            return Ok(failure_outcome(&out, "opt"));
        }
        let ir_text = std::fs::read_to_string(&output)?;
        let count = ir::count_ir_instructions(&ir_text).ok();
        let mut outcome = CompilationOutcome::ok(Artifact::Ir(ir_text));
        outcome.ir_instruction_count = count;
        outcome.diagnostics = out.stderr_lossy();
        Ok(outcome)
    }

    fn lower(&self, ir: &str, emit: Emit, timeout: Duration) -> Result<CompilationOutcome, ToolchainError> {
        let clang = self.tool("clang")?;
        match emit {
            Emit::Assembly => {
                let mut cmd = Command::new(clang);
                cmd.args(["-xir", "-", "-o", "-", "-S"]);
                let out = self.run(clang, cmd, Some(ir.as_bytes()), timeout)?;
                if !out.success() {
                    return Ok(failure_outcome(&out, "clang"));
                }
                let asm = String::from_utf8_lossy(&out.stdout).into_owned();
                Ok(CompilationOutcome::ok(Artifact::Assembly(asm)))
            }
            Emit::Object => {
                let dir = self.scratch()?;
                let input = dir.path().join("output.ll");
                let object = dir.path().join("output.o");
                std::fs::write(&input, ir)?;
                let mut cmd = Command::new(clang);
                cmd.args(["-c", "-x", "ir"]).arg(&input).arg("-o").arg(&object);
                let out = self.run(clang, cmd, None, timeout)?;
                if !out.success() {
                    return Ok(failure_outcome(&out, "clang"));
                }
                let size = self.measure_path(&object)?;
                let bytes = std::fs::read(&object)?;
                Ok(CompilationOutcome::ok(Artifact::Object(bytes)).with_size(size))
            }
        }
    }

    fn measure_binary_size(&self, object: &[u8]) -> Result<BinarySize, ToolchainError> {
        if self.config.size.is_none() {
            return berkeley_size_of_elf(object);
        }
        let dir = self.scratch()?;
        let path = dir.path().join("output.o");
        std::fs::write(&path, object)?;
        self.measure_path(&path)
    }

    fn count_ir_instructions(&self, ir: &str) -> Result<usize, ToolchainError> {
        ir::count_ir_instructions(ir)
    }

    fn extract_functions(&self, module: &ModuleInput) -> Vec<Result<ModuleInput, ToolchainError>> {
        let names = ir::defined_functions(&module.ir_text);
        let setup = (|| -> Result<(tempfile::TempDir, PathBuf, PathBuf), ToolchainError> {
            let tool = self.tool("llvm-extract")?.to_path_buf();
            let dir = self.scratch()?;
            let input = dir.path().join("input.ll");
            std::fs::write(&input, &module.ir_text)?;
            Ok((dir, input, tool))
        })();
        let (dir, input, tool) = match setup {
            Ok(s) => s,
            Err(e) => {
                let msg = e.to_string();
                return names
                    .into_iter()
                    .map(|f| {
                        Err(ToolchainError::Extract {
                            function: f,
                            message: msg.clone(),
                        })
                    })
                    .collect();
            }
        };
        names
            .into_iter()
            .enumerate()
            .map(|(i, name)| {
                let output = dir.path().join(format!("func{i}.ll"));
                let mut cmd = Command::new(&tool);
                cmd.arg("-S")
                    .arg(format!("--func={name}"))
                    .arg(&input)
                    .arg("-o")
                    .arg(&output);
                let out = self.run(&tool, cmd, None, super::DEFAULT_TIMEOUT)?;
                if !out.success() {
                    return Err(ToolchainError::Extract {
                        function: name,
                        message: out.stderr_lossy(),
                    });
                }
                let text = std::fs::read_to_string(&output)?;
                Ok(ModuleInput::new(module.child_id(&name), text))
            })
            .collect()
    }
}

impl LlvmBackend {
    fn measure_path(&self, object: &Path) -> Result<BinarySize, ToolchainError> {
        let Ok(size_tool) = self.tool("size") else {
            return berkeley_size_of_elf(&std::fs::read(object)?);
        };
        let mut cmd = Command::new(size_tool);
        cmd.args(["--format=berkeley", "--radix=10"]).arg(object);
        let out = self.run(size_tool, cmd, None, VERSION_TIMEOUT)?;
        if !out.success() {
            return Err(ToolchainError::BadObject(out.stderr_lossy()));
        }
        parse_berkeley_output(&String::from_utf8_lossy(&out.stdout))
    }
}
