//! The bundled `add_two` fixture: an unoptimized module, its `-Oz` result,
//! both lowerings, and a replay manifest recording how they relate.

use std::path::PathBuf;

use crate::toolchain::{ModuleInput, ReplayBackend};

pub const ADD_TWO_IR: &str = include_str!("../fixtures/add_two/add_two.ll");
pub const ADD_TWO_OZ_IR: &str = include_str!("../fixtures/add_two/add_two.oz.ll");
pub const ADD_TWO_ASM: &str = include_str!("../fixtures/add_two/add_two.s");
pub const ADD_TWO_OZ_ASM: &str = include_str!("../fixtures/add_two/add_two.oz.s");

pub fn add_two_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("add_two")
}

pub fn add_two() -> ModuleInput {
    ModuleInput::new("add_two", ADD_TWO_IR)
}

pub fn add_two_oz() -> ModuleInput {
    ModuleInput::new("add_two.oz", ADD_TWO_OZ_IR)
}

pub fn add_two_replay() -> ReplayBackend {
    ReplayBackend::load(&add_two_dir()).expect("bundled replay manifest is valid")
}
