//! Pass-ordering autotuning for LLVM `opt` pipelines.
//!
//! The crate covers the whole non-learned side of flag tuning for code size:
//! random search over pass lists ([`autotuner`]), minimization of the winners
//! ([`minimizer`]), semantic validation against self-checking programs
//! ([`validator`]), scoring ([`evaluator`]), and emission of
//! instruction-tuning records ([`dataset`]) that a text-generation service can
//! be driven with ([`model_client`]).

pub mod autotuner;
pub mod catalog;
pub mod dataset;
pub mod evaluator;
pub mod fixtures;
pub mod minimizer;
pub mod model_client;
mod pool;
pub mod toolchain;
pub mod validator;

pub use catalog::{parse_pipeline, serialize_pipeline, Pass, PassCatalog, PassLevel, PassList};
pub use toolchain::{Backend, BinarySize, CompilationOutcome, CompileStatus, Emit, ModuleInput};
