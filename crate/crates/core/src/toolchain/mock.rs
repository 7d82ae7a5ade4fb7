//! A deterministic stand-in compiler.
//!
//! Mock IR is a list of lines:
//!
//! ```text
//! ; comment
//! @table = data 16
//! @scratch = bss 64
//! define @main: a b x a b
//! ```
//!
//! Each function body is a token sequence. Passes rewrite those sequences and
//! binary size is a fixed function of the tokens, so every question the search
//! and minimization code asks has a brute-forceable answer.

use std::fmt::Write as _;
use std::time::Duration;

use super::size::SyntheticObject;
use super::{Artifact, Backend, BinarySize, CompilationOutcome, Emit, ModuleInput, ToolchainError};
use crate::catalog::{Pass, PassCatalog, PassLevel, PassList};

/// Text bytes every module pays regardless of contents.
pub const MODULE_OVERHEAD: u64 = 8;
/// Text bytes every function pays on top of its tokens.
pub const FUNCTION_OVERHEAD: u64 = 4;

pub const FOLD: &str = "mock-fold";
pub const DEDUP: &str = "mock-dedup";
pub const DCE: &str = "mock-dce";
pub const NOP: &str = "mock-nop";
pub const CRASH: &str = "mock-crash";
pub const EXPAND: &str = "mock-expand";
pub const MISCOMPILE: &str = "mock-miscompile";
pub const HANG: &str = "mock-hang";

/// Text bytes contributed by one token.
pub fn token_weight(token: &str) -> u64 {
    match token {
        "a" | "b" => 3,
        "c" => 4,
        "d" => 2,
        "s" | "z" => 1,
        "x" => 5,
        _ => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockItem {
    Comment(String),
    Global { name: String, bss: bool, bytes: u64 },
    Function { name: String, tokens: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockModule {
    pub items: Vec<MockItem>,
}

impl MockModule {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut items = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix(';') {
                items.push(MockItem::Comment(rest.to_string()));
            } else if let Some(rest) = line.strip_prefix("define @") {
                let (name, body) = rest
                    .split_once(':')
                    .ok_or_else(|| format!("line {}: expected `define @name: tokens`", i + 1))?;
                let name = name.trim();
                if !is_ident(name) {
                    return Err(format!("line {}: bad function name `{name}`", i + 1));
                }
                let tokens: Vec<String> = body.split_whitespace().map(str::to_string).collect();
                if let Some(t) = tokens.iter().find(|t| !is_ident(t)) {
                    return Err(format!("line {}: bad token `{t}`", i + 1));
                }
                items.push(MockItem::Function {
                    name: name.to_string(),
                    tokens,
                });
            } else if let Some(rest) = line.strip_prefix('@') {
                let mut parts = rest.split_whitespace();
                let (name, eq, kind, bytes) = (parts.next(), parts.next(), parts.next(), parts.next());
                let bytes = bytes.and_then(|b| b.parse().ok());
                match (name, eq, kind, bytes) {
                    (Some(name), Some("="), Some(kind @ ("data" | "bss")), Some(bytes)) if is_ident(name) => {
                        items.push(MockItem::Global {
                            name: name.to_string(),
                            bss: kind == "bss",
                            bytes,
                        })
                    }
                    _ => return Err(format!("line {}: expected `@name = data|bss N`", i + 1)),
                }
            } else {
                return Err(format!("line {}: unrecognized `{line}`", i + 1));
            }
        }
        Ok(MockModule { items })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            match item {
                MockItem::Comment(c) => writeln!(out, ";{c}"),
                MockItem::Global { name, bss, bytes } => {
                    writeln!(out, "@{name} = {} {bytes}", if *bss { "bss" } else { "data" })
                }
                MockItem::Function { name, tokens } => {
                    if tokens.is_empty() {
                        writeln!(out, "define @{name}:")
                    } else {
                        writeln!(out, "define @{name}: {}", tokens.join(" "))
                    }
                }
            }
            .expect("writing to a String");
        }
        out
    }

    /// Injective lowering to mock assembly.
    pub fn to_assembly(&self) -> String {
        let mut out = String::from("\t.module\n");
        for item in &self.items {
            match item {
                MockItem::Comment(c) => {
                    let _ = writeln!(out, "#{c}");
                }
                MockItem::Global { name, bss, bytes } => {
                    let _ = writeln!(out, "\t.{} @{name} {bytes}", if *bss { "bss" } else { "data" });
                }
                MockItem::Function { name, tokens } => {
                    let _ = writeln!(out, "{name}:");
                    for t in tokens {
                        let _ = writeln!(out, "\t{t}");
                    }
                    out.push_str("\tret\n");
                }
            }
        }
        out
    }

    /// Inverse of [`MockModule::to_assembly`].
    pub fn from_assembly(asm: &str) -> Result<Self, String> {
        let mut lines = asm.lines();
        if lines.next() != Some("\t.module") {
            return Err("missing `.module` header".into());
        }
        let mut items = Vec::new();
        let mut open: Option<(String, Vec<String>)> = None;
        for line in lines {
            if let Some((name, tokens)) = open.as_mut() {
                if line == "\tret" {
                    items.push(MockItem::Function {
                        name: std::mem::take(name),
                        tokens: std::mem::take(tokens),
                    });
                    open = None;
                } else if let Some(t) = line.strip_prefix('\t') {
                    tokens.push(t.to_string());
                } else {
                    return Err(format!("unexpected `{line}` inside function"));
                }
            } else if let Some(c) = line.strip_prefix('#') {
                items.push(MockItem::Comment(c.to_string()));
            } else if let Some(rest) = line.strip_prefix("\t.") {
                let text = format!("@{}", rest.split_once(" @").map(|(k, r)| {
                    let (name, bytes) = r.split_once(' ').unwrap_or((r, ""));
                    format!("{name} = {k} {bytes}")
                }).ok_or("bad directive")?);
                items.extend(MockModule::parse(&text)?.items);
            } else if let Some(name) = line.strip_suffix(':') {
                open = Some((name.to_string(), Vec::new()));
            } else {
                return Err(format!("unexpected `{line}`"));
            }
        }
        if open.is_some() {
            return Err("unterminated function".into());
        }
        Ok(MockModule { items })
    }

    pub fn sections(&self) -> SyntheticObject {
        let mut obj = SyntheticObject {
            text: MODULE_OVERHEAD,
            data: 0,
            bss: 0,
        };
        for item in &self.items {
            match item {
                MockItem::Function { tokens, .. } => {
                    obj.text += FUNCTION_OVERHEAD + tokens.iter().map(|t| token_weight(t)).sum::<u64>();
                }
                MockItem::Global { bss: true, bytes, .. } => obj.bss += bytes,
                MockItem::Global { bss: false, bytes, .. } => obj.data += bytes,
                MockItem::Comment(_) => {}
            }
        }
        obj
    }

    pub fn binary_size(&self) -> BinarySize {
        self.sections().binary_size()
    }

    pub fn instruction_count(&self) -> usize {
        self.functions().map(|(_, t)| t.len()).sum()
    }

    pub fn functions(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.items.iter().filter_map(|i| match i {
            MockItem::Function { name, tokens } => Some((name.as_str(), tokens.as_slice())),
            _ => None,
        })
    }

    /// A miscompiled program (one containing `z`) fails when executed.
    pub fn executes_cleanly(&self) -> bool {
        self.functions().all(|(_, t)| !t.iter().any(|x| x == "z"))
    }

    fn rewrite_functions(&mut self, mut f: impl FnMut(&mut Vec<String>)) {
        for item in &mut self.items {
            if let MockItem::Function { tokens, .. } = item {
                f(tokens)
            }
        }
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn replace_first(tokens: &mut Vec<String>, pattern: &[&str], with: &[&str]) {
    if let Some(i) = tokens
        .windows(pattern.len())
        .position(|w| w.iter().zip(pattern).all(|(a, b)| a == b))
    {
        tokens.splice(i..i + pattern.len(), with.iter().map(|s| s.to_string()));
    }
}

fn fold(tokens: &mut Vec<String>) {
    replace_first(tokens, &["a", "b"], &["c"]);
}

fn dedup(tokens: &mut Vec<String>) {
    tokens.dedup();
}

fn dce(tokens: &mut Vec<String>) {
    tokens.retain(|t| t != "x");
}

enum Step {
    Done,
    Crash(String),
    Hang,
}

fn run_pass(module: &mut MockModule, pass: &Pass) -> Step {
    match pass.name() {
        FOLD => module.rewrite_functions(fold),
        DEDUP => module.rewrite_functions(dedup),
        DCE => module.rewrite_functions(dce),
        NOP => {}
        EXPAND => module.rewrite_functions(|t| replace_first(t, &["c"], &["a", "b"])),
        MISCOMPILE => module.rewrite_functions(|t| replace_first(t, &["a"], &["z"])),
        CRASH => return Step::Crash(format!("{CRASH}: deliberate crash")),
        HANG => return Step::Hang,
        "default<Oz>" => module.rewrite_functions(|t| {
            dce(t);
            dedup(t);
            loop {
                let before = t.len();
                fold(t);
                if t.len() == before {
                    break;
                }
            }
        }),
        other => return Step::Crash(format!("unknown pass `{other}`")),
    }
    Step::Done
}

#[derive(Debug, Clone, Default)]
pub struct MockBackend;

impl MockBackend {
    pub fn new() -> Self {
        MockBackend
    }

    /// The five-pass catalog used for exhaustive search oracles.
    pub fn search_catalog() -> PassCatalog {
        PassCatalog::from_passes(vec![
            Pass::new(FOLD, PassLevel::Function),
            Pass::new(DEDUP, PassLevel::Function),
            Pass::new(DCE, PassLevel::Function),
            Pass::new(NOP, PassLevel::Module),
            Pass::new(CRASH, PassLevel::Module),
        ])
        .expect("unique names")
    }

    /// Every mock pass except the hanging one, plus `default<Oz>`.
    pub fn full_catalog() -> PassCatalog {
        let mut passes = Self::search_catalog().passes().to_vec();
        passes.push(Pass::new(EXPAND, PassLevel::Function));
        passes.push(Pass::new(MISCOMPILE, PassLevel::Function));
        passes.push(Pass::oz());
        PassCatalog::from_passes(passes).expect("unique names")
    }

    pub fn pass(name: &str) -> Pass {
        let level = match name {
            NOP | CRASH | HANG | "default<Oz>" => PassLevel::Module,
            _ => PassLevel::Function,
        };
        Pass::new(name, level)
    }

    /// Optimizes without going through the trait's outcome plumbing.
    pub fn optimize(&self, module: &MockModule, passes: &PassList) -> Result<MockModule, CompilationOutcome> {
        let mut m = module.clone();
        for pass in passes {
            match run_pass(&mut m, pass) {
                Step::Done => {}
                Step::Crash(msg) => return Err(CompilationOutcome::compiler_error(msg)),
                Step::Hang => return Err(CompilationOutcome::timeout(format!("{HANG} exceeded the limit"))),
            }
        }
        Ok(m)
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn apply_passes(
        &self,
        module: &ModuleInput,
        passes: &PassList,
        _timeout: Duration,
    ) -> Result<CompilationOutcome, ToolchainError> {
        if passes.is_empty() {
            let mut out = CompilationOutcome::ok(Artifact::Ir(module.ir_text.clone()));
            out.ir_instruction_count = MockModule::parse(&module.ir_text).ok().map(|m| m.instruction_count());
            return Ok(out);
        }
        let parsed = match MockModule::parse(&module.ir_text) {
            Ok(m) => m,
            Err(e) => return Ok(CompilationOutcome::compiler_error(e)),
        };
        Ok(match self.optimize(&parsed, passes) {
            Ok(m) => {
                let n = m.instruction_count();
                CompilationOutcome::ok(Artifact::Ir(m.render())).with_instruction_count(n)
            }
            Err(failure) => failure,
        })
    }

    fn lower(&self, ir: &str, emit: Emit, _timeout: Duration) -> Result<CompilationOutcome, ToolchainError> {
        let m = match MockModule::parse(ir) {
            Ok(m) => m,
            Err(e) => return Ok(CompilationOutcome::compiler_error(e)),
        };
        Ok(match emit {
            Emit::Assembly => CompilationOutcome::ok(Artifact::Assembly(m.to_assembly())),
            Emit::Object => {
                let obj = m.sections();
                CompilationOutcome::ok(Artifact::Object(obj.encode())).with_size(obj.binary_size())
            }
        })
    }

    fn measure_binary_size(&self, object: &[u8]) -> Result<BinarySize, ToolchainError> {
        SyntheticObject::decode(object).map(|o| o.binary_size())
    }

    fn count_ir_instructions(&self, ir: &str) -> Result<usize, ToolchainError> {
        MockModule::parse(ir)
            .map(|m| m.instruction_count())
            .map_err(ToolchainError::BadIr)
    }

    fn extract_functions(&self, module: &ModuleInput) -> Vec<Result<ModuleInput, ToolchainError>> {
        let parsed = match MockModule::parse(&module.ir_text) {
            Ok(m) => m,
            Err(e) => {
                return vec![Err(ToolchainError::Extract {
                    function: "*".into(),
                    message: e,
                })]
            }
        };
        parsed
            .functions()
            .map(|(name, tokens)| {
                let child = MockModule {
                    items: vec![MockItem::Function {
                        name: name.to_string(),
                        tokens: tokens.to_vec(),
                    }],
                };
                Ok(ModuleInput::new(module.child_id(name), child.render()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn module(text: &str) -> ModuleInput {
        ModuleInput::new("m", text)
    }

    fn list(names: &[&str]) -> PassList {
        names.iter().map(|n| MockBackend::pass(n)).collect()
    }

    fn size_of(ir: &str, names: &[&str]) -> Option<u64> {
        let out = MockBackend.compile(&module(ir), &list(names), Duration::from_secs(1)).unwrap();
        out.size.map(|s| s.total())
    }

    #[test]
    fn parse_render_round_trip() {
        let text = "; hello\n@t = data 16\n@s = bss 8\ndefine @f: a b c\ndefine @g:\n";
        let m = MockModule::parse(text).unwrap();
        assert_eq!(m.render(), text);
        assert!(MockModule::parse("garbage").is_err());
        assert!(MockModule::parse("define @f a b").is_err());
        assert!(MockModule::parse("@t = rodata 3").is_err());
    }

    #[test]
    fn size_model() {
        // 8 + (4 + 3 + 3 + 4) + data 16; bss ignored
        let m = MockModule::parse("@t = data 16\n@s = bss 8\ndefine @f: a b c\n").unwrap();
        assert_eq!(m.binary_size(), BinarySize::new(22, 16));
        assert_eq!(m.sections().bss, 8);
        let only_bss = MockModule::parse("@s = bss 64\n").unwrap();
        assert_eq!(only_bss.binary_size().total(), 8);
    }

    #[test]
    fn identity_and_determinism() {
        let m = module("define @f: a b a b\n");
        let out = MockBackend.apply_passes(&m, &PassList::empty(), Duration::from_secs(1)).unwrap();
        assert_eq!(out.text(), Some(m.ir_text.as_str()));
        let pl = list(&[FOLD, FOLD, DEDUP]);
        let a = MockBackend.apply_passes(&m, &pl, Duration::from_secs(1)).unwrap();
        let b = MockBackend.apply_passes(&m, &pl, Duration::from_secs(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.text(), Some("define @f: c\n"));
    }

    #[test]
    fn pass_semantics() {
        let ir = "define @f: a b a b\n";
        assert_eq!(size_of(ir, &[]), Some(8 + 4 + 12));
        assert_eq!(size_of(ir, &[FOLD]), Some(8 + 4 + 4 + 6));
        assert_eq!(size_of(ir, &[FOLD, FOLD]), Some(8 + 4 + 8));
        assert_eq!(size_of(ir, &[FOLD, FOLD, DEDUP]), Some(8 + 4 + 4));
        assert_eq!(size_of(ir, &[NOP]), size_of(ir, &[]));
        assert_eq!(size_of(ir, &[CRASH]), None);
        assert_eq!(size_of("define @f: a x b\n", &[DCE, FOLD]), Some(8 + 4 + 4));
        assert_eq!(size_of("define @f: a x b\n", &[FOLD, DCE]), Some(8 + 4 + 6));
        // -Oz folds after dedup, so it misses the final dedup.
        assert_eq!(size_of(ir, &["default<Oz>"]), Some(8 + 4 + 8));
    }

    #[test]
    fn failure_statuses() {
        let m = module("define @f: a\n");
        let crash = MockBackend.apply_passes(&m, &list(&[CRASH]), Duration::from_secs(1)).unwrap();
        assert_eq!(crash.status, super::super::CompileStatus::CompilerError);
        let hang = MockBackend.apply_passes(&m, &list(&[HANG]), Duration::from_secs(1)).unwrap();
        assert_eq!(hang.status, super::super::CompileStatus::Timeout);
        let unknown = MockBackend
            .apply_passes(&m, &[Pass::new("dce", PassLevel::Function)].into_iter().collect(), Duration::from_secs(1))
            .unwrap();
        assert!(!unknown.is_ok());
    }

    #[test]
    fn lowering_is_invertible() {
        let text = "; c1\n@t = data 4\ndefine @f: a b\ndefine @empty:\n@z = bss 2\n";
        let m = MockModule::parse(text).unwrap();
        let asm = m.to_assembly();
        assert_eq!(MockModule::from_assembly(&asm).unwrap(), m);
        let out = MockBackend.lower("garbage", Emit::Assembly, Duration::from_secs(1)).unwrap();
        assert!(!out.is_ok());
    }

    #[test]
    fn extraction_sizes_add_up() {
        let m = module("define @f: a b\ndefine @g: c\ndefine @h: x x\n");
        let children: Vec<_> = MockBackend.extract_functions(&m).into_iter().map(Result::unwrap).collect();
        assert_eq!(children.len(), 3);
        assert_eq!(children[1].id, "m:g");
        let whole = size_of(&m.ir_text, &[]).unwrap();
        let parts: u64 = children.iter().map(|c| size_of(&c.ir_text, &[]).unwrap()).sum();
        assert_eq!(parts, whole + MODULE_OVERHEAD * 2);
    }
}
