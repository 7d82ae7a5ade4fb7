//! Serves recorded toolchain outputs.
//!
//! A replay directory holds IR/assembly files and a `replay.json` manifest
//! mapping (input, pipeline) to optimized output and IR to its lowering.
//! Anything not recorded is reported as a compiler error.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;

use super::size::SyntheticObject;
use super::{ir, Artifact, Backend, BinarySize, CompilationOutcome, Emit, ModuleInput, ToolchainError};
use crate::catalog::PassList;

#[derive(Debug, Deserialize)]
struct Manifest {
    #[serde(default)]
    optimizations: Vec<RecordedOptimization>,
    #[serde(default)]
    lowerings: Vec<RecordedLowering>,
}

#[derive(Debug, Deserialize)]
struct RecordedOptimization {
    input: String,
    pipeline: String,
    output: String,
}

#[derive(Debug, Deserialize)]
struct RecordedLowering {
    ir: String,
    assembly: String,
    text: u64,
    data: u64,
    #[serde(default)]
    bss: u64,
}

#[derive(Debug, Clone)]
struct Lowering {
    assembly: String,
    object: SyntheticObject,
}

#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    optimized: HashMap<(String, String), String>,
    lowered: HashMap<String, Lowering>,
}

impl ReplayBackend {
    pub fn load(dir: &Path) -> Result<Self, ToolchainError> {
        let manifest_text = std::fs::read_to_string(dir.join("replay.json"))?;
        let manifest: Manifest = serde_json::from_str(&manifest_text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let read = |name: &str| std::fs::read_to_string(dir.join(name));
        let mut backend = ReplayBackend::default();
        for o in manifest.optimizations {
            backend
                .optimized
                .insert((read(&o.input)?, o.pipeline), read(&o.output)?);
        }
        for l in manifest.lowerings {
            backend.lowered.insert(
                read(&l.ir)?,
                Lowering {
                    assembly: read(&l.assembly)?,
                    object: SyntheticObject {
                        text: l.text,
                        data: l.data,
                        bss: l.bss,
                    },
                },
            );
        }
        Ok(backend)
    }
}

impl Backend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    fn apply_passes(
        &self,
        module: &ModuleInput,
        passes: &PassList,
        _timeout: Duration,
    ) -> Result<CompilationOutcome, ToolchainError> {
        let output = if passes.is_empty() {
            Some(module.ir_text.clone())
        } else {
            self.optimized
                .get(&(module.ir_text.clone(), passes.to_pipeline()))
                .cloned()
        };
        Ok(match output {
            Some(ir_text) => {
                let n = ir::count_ir_instructions(&ir_text).ok();
                let mut out = CompilationOutcome::ok(Artifact::Ir(ir_text));
                out.ir_instruction_count = n;
                out
            }
            None => CompilationOutcome::compiler_error(format!(
                "no recording of `{}` applied to {}",
                passes.to_pipeline(),
                module.id
            )),
        })
    }

    fn lower(&self, ir: &str, emit: Emit, _timeout: Duration) -> Result<CompilationOutcome, ToolchainError> {
        let Some(l) = self.lowered.get(ir) else {
            return Ok(CompilationOutcome::compiler_error("error: no recorded lowering for this IR"));
        };
        Ok(match emit {
            Emit::Assembly => CompilationOutcome::ok(Artifact::Assembly(l.assembly.clone())),
            Emit::Object => CompilationOutcome::ok(Artifact::Object(l.object.encode())).with_size(l.object.binary_size()),
        })
    }

    fn measure_binary_size(&self, object: &[u8]) -> Result<BinarySize, ToolchainError> {
        SyntheticObject::decode(object).map(|o| o.binary_size())
    }

    fn count_ir_instructions(&self, ir_text: &str) -> Result<usize, ToolchainError> {
        ir::count_ir_instructions(ir_text)
    }

    fn extract_functions(&self, module: &ModuleInput) -> Vec<Result<ModuleInput, ToolchainError>> {
        let names = ir::defined_functions(&module.ir_text);
        if names.len() == 1 {
            return vec![Ok(ModuleInput::new(module.child_id(&names[0]), module.ir_text.clone()))];
        }
        names
            .into_iter()
            .map(|function| {
                Err(ToolchainError::Extract {
                    function,
                    message: "no recorded extraction".into(),
                })
            })
            .collect()
    }
}
