//! The searchable pass space and the pass-list value type.
//!
//! Pass lists serialize to the pipeline syntax accepted by `opt -p`, with each
//! pass wrapped in the adaptor for its level:
//!
//! | level    | element                     |
//! |----------|-----------------------------|
//! | Module   | `module(N)`                 |
//! | CGSCC    | `cgscc(N)`                  |
//! | Function | `function(N)`               |
//! | Loop     | `function(loop(N))`         |
//! | LoopMssa | `function(loop-mssa(N))`    |

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_CATALOG: &str = include_str!("../data/default_passes.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate pass `{name}` at level {level}")]
    Duplicate { name: String, level: PassLevel },
    #[error("failed to read catalog {path}: {message}")]
    Io { path: String, message: String },
    #[error("catalog is empty")]
    Empty,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PipelineError {
    #[error("unknown pass `{name}` at level {level}")]
    UnknownPass { name: String, level: PassLevel },
    #[error("unknown pass `{0}`")]
    UnknownName(String),
    #[error("pass `{0}` exists at several levels; wrap it in an adaptor")]
    Ambiguous(String),
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
}

/// Pass-manager level a pass runs at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PassLevel {
    Module,
    #[serde(rename = "CGSCC")]
    Cgscc,
    Function,
    Loop,
    LoopMssa,
}

impl PassLevel {
    pub const ALL: [PassLevel; 5] = [
        PassLevel::Module,
        PassLevel::Cgscc,
        PassLevel::Function,
        PassLevel::Loop,
        PassLevel::LoopMssa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PassLevel::Module => "Module",
            PassLevel::Cgscc => "CGSCC",
            PassLevel::Function => "Function",
            PassLevel::Loop => "Loop",
            PassLevel::LoopMssa => "LoopMssa",
        }
    }
}

impl fmt::Display for PassLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PassLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Module" => Ok(PassLevel::Module),
            "CGSCC" => Ok(PassLevel::Cgscc),
            "Function" => Ok(PassLevel::Function),
            "Loop" => Ok(PassLevel::Loop),
            "LoopMssa" => Ok(PassLevel::LoopMssa),
            other => Err(format!("unknown level `{other}`")),
        }
    }
}

/// A single optimization pass. The name includes any angle-bracket parameters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pass {
    name: String,
    level: PassLevel,
}

impl Pass {
    pub fn new(name: impl Into<String>, level: PassLevel) -> Self {
        let name = name.into();
        assert!(!name.is_empty(), "pass name must be non-empty");
        Pass { name, level }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn level(&self) -> PassLevel {
        self.level
    }

    /// `module(default<Oz>)`, the size-optimizing default pipeline.
    pub fn oz() -> Self {
        Pass::new("default<Oz>", PassLevel::Module)
    }

    fn write_element(&self, out: &mut String) {
        let (open, close) = match self.level {
            PassLevel::Module => ("module(", ")"),
            PassLevel::Cgscc => ("cgscc(", ")"),
            PassLevel::Function => ("function(", ")"),
            PassLevel::Loop => ("function(loop(", "))"),
            PassLevel::LoopMssa => ("function(loop-mssa(", "))"),
        };
        out.push_str(open);
        out.push_str(&self.name);
        out.push_str(close);
    }
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.write_element(&mut s);
        f.write_str(&s)
    }
}

/// Ordered set of searchable passes.
#[derive(Debug, Clone)]
pub struct PassCatalog {
    passes: Vec<Pass>,
    index: HashMap<(String, PassLevel), usize>,
}

impl PassCatalog {
    /// Loads a catalog file, or the bundled default when `source` is `None`.
    pub fn load(source: Option<&Path>) -> Result<Self, CatalogError> {
        match source {
            None => Self::parse(DEFAULT_CATALOG),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CatalogError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                Self::parse(&text)
            }
        }
    }

    pub fn default_catalog() -> Self {
        Self::parse(DEFAULT_CATALOG).expect("bundled catalog is valid")
    }

    /// Parses the `name,Level` line format. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CatalogError> {
        let mut passes = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (name, level) = line.rsplit_once(',').ok_or_else(|| CatalogError::Parse {
                line: i + 1,
                message: format!("expected `name,Level`, found `{line}`"),
            })?;
            let name = name.trim();
            if name.is_empty() {
                return Err(CatalogError::Parse {
                    line: i + 1,
                    message: "empty pass name".into(),
                });
            }
            let level = level.trim().parse().map_err(|message| CatalogError::Parse {
                line: i + 1,
                message,
            })?;
            passes.push(Pass::new(name, level));
        }
        Self::from_passes(passes)
    }

    pub fn from_passes(passes: Vec<Pass>) -> Result<Self, CatalogError> {
        let mut index = HashMap::with_capacity(passes.len());
        for (i, p) in passes.iter().enumerate() {
            if index.insert((p.name.clone(), p.level), i).is_some() {
                return Err(CatalogError::Duplicate {
                    name: p.name.clone(),
                    level: p.level,
                });
            }
        }
        Ok(PassCatalog { passes, index })
    }

    pub fn len(&self) -> usize {
        self.passes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passes.is_empty()
    }

    pub fn passes(&self) -> &[Pass] {
        &self.passes
    }

    pub fn iter(&self) -> impl Iterator<Item = &Pass> {
        self.passes.iter()
    }

    pub fn get(&self, name: &str, level: PassLevel) -> Option<&Pass> {
        self.index
            .get(&(name.to_string(), level))
            .map(|&i| &self.passes[i])
    }

    /// Position in canonical order; the bubble-sort key.
    pub fn position(&self, pass: &Pass) -> Option<usize> {
        self.index.get(&(pass.name.clone(), pass.level)).copied()
    }

    pub fn contains(&self, pass: &Pass) -> bool {
        self.position(pass).is_some()
    }

    fn by_name(&self, name: &str) -> Result<&Pass, PipelineError> {
        let mut found = PassLevel::ALL.iter().filter_map(|&l| self.get(name, l));
        match (found.next(), found.next()) {
            (Some(p), None) => Ok(p),
            (Some(_), Some(_)) => Err(PipelineError::Ambiguous(name.to_string())),
            _ => Err(PipelineError::UnknownName(name.to_string())),
        }
    }

    /// Draws a random list: length uniform in `[1, max_len]`, entries i.i.d.
    /// uniform over the catalog.
    pub fn random_pass_list(&self, max_len: usize, seed: u64) -> Result<PassList, CatalogError> {
        if self.passes.is_empty() {
            return Err(CatalogError::Empty);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.random_pass_list_with(max_len.max(1), &mut rng))
    }

    pub fn random_pass_list_with<R: Rng>(&self, max_len: usize, rng: &mut R) -> PassList {
        let len = rng.gen_range(1..=max_len);
        let entries = (0..len)
            .map(|_| self.passes[rng.gen_range(0..self.passes.len())].clone())
            .collect();
        PassList(entries)
    }
}

/// Ordered sequence of passes. Duplicates are allowed and order matters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct PassList(Vec<Pass>);

impl PassList {
    pub fn new(entries: Vec<Pass>) -> Self {
        PassList(entries)
    }

    pub fn empty() -> Self {
        PassList(Vec::new())
    }

    pub fn oz() -> Self {
        PassList(vec![Pass::oz()])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn passes(&self) -> &[Pass] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Pass> {
        self.0.iter()
    }

    pub fn into_inner(self) -> Vec<Pass> {
        self.0
    }

    pub fn without(&self, index: usize) -> PassList {
        let mut v = self.0.clone();
        v.remove(index);
        PassList(v)
    }

    pub fn with_inserted(&self, index: usize, pass: Pass) -> PassList {
        let mut v = self.0.clone();
        v.insert(index, pass);
        PassList(v)
    }

    pub fn with_swapped(&self, i: usize, j: usize) -> PassList {
        let mut v = self.0.clone();
        v.swap(i, j);
        PassList(v)
    }

    pub fn is_valid_in(&self, catalog: &PassCatalog) -> bool {
        self.0.iter().all(|p| catalog.contains(p))
    }

    /// Serializes to `opt -p` pipeline syntax. The empty list is `""`.
    pub fn to_pipeline(&self) -> String {
        let mut out = String::new();
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            p.write_element(&mut out);
        }
        out
    }

    pub fn parse(s: &str, catalog: &PassCatalog) -> Result<Self, PipelineError> {
        parse_pipeline(s, catalog)
    }
}

impl fmt::Display for PassList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_pipeline())
    }
}

impl Serialize for PassList {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_pipeline())
    }
}

impl<'de> Deserialize<'de> for PassList {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_pipeline_unchecked(&s).map_err(serde::de::Error::custom)
    }
}

impl FromIterator<Pass> for PassList {
    fn from_iter<I: IntoIterator<Item = Pass>>(iter: I) -> Self {
        PassList(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a PassList {
    type Item = &'a Pass;
    type IntoIter = std::slice::Iter<'a, Pass>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

pub fn serialize_pipeline(pl: &PassList) -> String {
    pl.to_pipeline()
}

/// Parses `opt -p` pipeline text against a catalog.
///
/// Besides the single-pass-per-adaptor form produced by [`serialize_pipeline`],
/// this accepts adaptors holding several passes (`function(dce,sroa)`), nested
/// adaptors (`module(function(dce))`), and bare names that resolve to a
/// single catalog level.
pub fn parse_pipeline(s: &str, catalog: &PassCatalog) -> Result<PassList, PipelineError> {
    parse_with(s, Some(catalog))
}

/// Parses pipeline text without a catalog: every name inside an adaptor is
/// taken as a pass at that adaptor's level, and bare names are rejected.
pub fn parse_pipeline_unchecked(s: &str) -> Result<PassList, PipelineError> {
    parse_with(s, None)
}

fn parse_with(s: &str, catalog: Option<&PassCatalog>) -> Result<PassList, PipelineError> {
    let mut parser = Parser {
        src: s,
        pos: 0,
        catalog,
    };
    parser.skip_ws();
    let mut out = Vec::new();
    if parser.at_end() {
        return Ok(PassList(out));
    }
    parser.list(None, &mut out)?;
    parser.skip_ws();
    if !parser.at_end() {
        return Err(parser.error(if parser.peek() == Some(')') {
            "unbalanced `)`"
        } else {
            "unexpected trailing input"
        }));
    }
    Ok(PassList(out))
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    catalog: Option<&'a PassCatalog>,
}

impl<'a> Parser<'a> {
    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn error(&self, message: &str) -> PipelineError {
        PipelineError::Syntax {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn list(&mut self, level: Option<PassLevel>, out: &mut Vec<Pass>) -> Result<(), PipelineError> {
        loop {
            self.skip_ws();
            self.element(level, out)?;
            self.skip_ws();
            match self.peek() {
                Some(',') => self.pos += 1,
                _ => return Ok(()),
            }
        }
    }

    /// Reads a name, including any `<...>` parameter block.
    fn name(&mut self) -> Result<&'a str, PipelineError> {
        let start = self.pos;
        let mut angle = 0usize;
        while let Some(c) = self.peek() {
            match c {
                '<' => angle += 1,
                '>' if angle > 0 => angle -= 1,
                '>' => return Err(self.error("unbalanced `>`")),
                '(' | ')' | ',' if angle == 0 => break,
                c if c.is_whitespace() && angle == 0 => break,
                _ => {}
            }
            self.pos += c.len_utf8();
        }
        if angle > 0 {
            return Err(self.error("unterminated `<`"));
        }
        if self.pos == start {
            return Err(self.error("expected a pass name"));
        }
        Ok(&self.src[start..self.pos])
    }

    fn element(&mut self, level: Option<PassLevel>, out: &mut Vec<Pass>) -> Result<(), PipelineError> {
        let name_start = self.pos;
        let name = self.name()?;
        self.skip_ws();
        if self.peek() == Some('(') {
            let inner = match name {
                "module" => PassLevel::Module,
                "cgscc" => PassLevel::Cgscc,
                "function" => PassLevel::Function,
                "loop" => PassLevel::Loop,
                "loop-mssa" => PassLevel::LoopMssa,
                _ => {
                    return Err(PipelineError::Syntax {
                        offset: name_start,
                        message: format!("`{name}` is not a pass-manager adaptor"),
                    })
                }
            };
            self.pos += 1;
            self.skip_ws();
            if self.peek() == Some(')') {
                return Err(self.error("empty adaptor"));
            }
            self.list(Some(inner), out)?;
            self.skip_ws();
            if self.peek() != Some(')') {
                return Err(self.error("unbalanced `(`: expected `)`"));
            }
            self.pos += 1;
            return Ok(());
        }
        let pass = match (self.catalog, level) {
            (Some(cat), Some(level)) => cat.get(name, level).cloned().ok_or_else(|| PipelineError::UnknownPass {
                name: name.to_string(),
                level,
            })?,
            (Some(cat), None) => cat.by_name(name)?.clone(),
            (None, Some(level)) => Pass::new(name, level),
            (None, None) => return Err(PipelineError::UnknownName(name.to_string())),
        };
        out.push(pass);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(name: &str, level: PassLevel) -> Pass {
        Pass::new(name, level)
    }

    #[test]
    fn default_catalog_has_every_tabulated_pass() {
        let cat = PassCatalog::load(None).unwrap();
        // 167 table rows, one of which repeats `instcombine,Function`.
        assert_eq!(cat.len(), 166);
        assert!(cat.get("instcombine", PassLevel::Function).is_some());
        assert!(cat.get("guard-widening", PassLevel::Function).is_some());
        assert!(cat.get("guard-widening", PassLevel::Loop).is_some());
        assert!(cat.get("default<Oz>", PassLevel::Module).is_some());
        assert!(cat.get("licm", PassLevel::LoopMssa).is_some());
        assert_eq!(cat.passes()[0], p("default<O0>", PassLevel::Module));
    }

    #[test]
    fn singleton_catalog_file() {
        let cat = PassCatalog::parse("constmerge,Module").unwrap();
        assert_eq!(cat.len(), 1);
    }

    #[test]
    fn duplicate_name_is_rejected() {
        let err = PassCatalog::parse("dce,Function\n# again\ndce,Function\n").unwrap_err();
        assert!(matches!(err, CatalogError::Duplicate { ref name, .. } if name == "dce"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = PassCatalog::parse("dce,Function\n\nbroken line\n").unwrap_err();
        assert_eq!(
            err,
            CatalogError::Parse {
                line: 3,
                message: "expected `name,Level`, found `broken line`".into()
            }
        );
        let err = PassCatalog::parse("dce,Basic").unwrap_err();
        assert!(matches!(err, CatalogError::Parse { line: 1, .. }));
    }

    #[test]
    fn serializes_listing_pipelines() {
        let pl = PassList::new(vec![p("default<Oz>", PassLevel::Module), p("iroutliner", PassLevel::Module)]);
        assert_eq!(pl.to_pipeline(), "module(default<Oz>),module(iroutliner)");
        let pl = PassList::new(vec![
            p("dce", PassLevel::Function),
            p("default<Oz>", PassLevel::Module),
            p("load-store-vectorizer", PassLevel::Function),
        ]);
        assert_eq!(
            pl.to_pipeline(),
            "function(dce),module(default<Oz>),function(load-store-vectorizer)"
        );
        assert_eq!(PassList::empty().to_pipeline(), "");
    }

    #[test]
    fn loop_levels_nest_inside_function() {
        let pl = PassList::new(vec![p("licm", PassLevel::LoopMssa), p("loop-rotate", PassLevel::Loop)]);
        assert_eq!(
            pl.to_pipeline(),
            "function(loop-mssa(licm)),function(loop(loop-rotate))"
        );
    }

    #[test]
    fn parses_listing_pipeline() {
        let cat = PassCatalog::default_catalog();
        assert_eq!(
            parse_pipeline("module(default<Oz>)", &cat).unwrap(),
            PassList::oz()
        );
        assert_eq!(parse_pipeline("", &cat).unwrap(), PassList::empty());
        assert_eq!(parse_pipeline("  \n", &cat).unwrap(), PassList::empty());
        assert_eq!(
            parse_pipeline("  module(default<Oz>) \n", &cat).unwrap(),
            PassList::oz()
        );
    }

    #[test]
    fn parse_errors() {
        let cat = PassCatalog::default_catalog();
        assert_eq!(
            parse_pipeline("module(notapass)", &cat).unwrap_err(),
            PipelineError::UnknownPass {
                name: "notapass".into(),
                level: PassLevel::Module
            }
        );
        for bad in ["function(dce", "function(dce))", "function(dce),", "module()", "llama(dce)"] {
            assert!(
                matches!(parse_pipeline(bad, &cat), Err(PipelineError::Syntax { .. })),
                "{bad}"
            );
        }
        // dce is a function pass
        assert!(matches!(
            parse_pipeline("module(dce)", &cat),
            Err(PipelineError::UnknownPass { .. })
        ));
    }

    #[test]
    fn parses_grouped_and_bare_forms() {
        let cat = PassCatalog::default_catalog();
        let pl = parse_pipeline("function(dce,sroa),module(function(adce)),constmerge", &cat).unwrap();
        assert_eq!(
            pl.to_pipeline(),
            "function(dce),function(sroa),function(adce),module(constmerge)"
        );
        assert_eq!(
            parse_pipeline("guard-widening", &cat).unwrap_err(),
            PipelineError::Ambiguous("guard-widening".into())
        );
        assert_eq!(
            parse_pipeline("function(loop(guard-widening))", &cat).unwrap().passes()[0].level(),
            PassLevel::Loop
        );
    }

    #[test]
    fn random_lists_are_bounded_and_seeded() {
        let cat = PassCatalog::default_catalog();
        for seed in 0..200 {
            let pl = cat.random_pass_list(50, seed).unwrap();
            assert!((1..=50).contains(&pl.len()));
            assert!(pl.is_valid_in(&cat));
            assert_eq!(pl, cat.random_pass_list(50, seed).unwrap());
        }
        let single = PassCatalog::parse("constmerge,Module").unwrap();
        let pl = single.random_pass_list(1, 0).unwrap();
        assert_eq!(pl.passes(), &[p("constmerge", PassLevel::Module)]);
        let empty = PassCatalog::from_passes(vec![]).unwrap();
        assert_eq!(empty.random_pass_list(3, 0).unwrap_err(), CatalogError::Empty);
    }

    #[test]
    fn random_list_lengths_are_uniform() {
        let cat = PassCatalog::parse("a,Module\nb,Function").unwrap();
        let n = 100_000u64;
        let mut counts = [0u64; 4];
        for seed in 0..n {
            counts[cat.random_pass_list(4, seed).unwrap().len() - 1] += 1;
        }
        let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
        let mut chi2 = 0.0;
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 3.0 * sigma, "{counts:?}");
            let expected = n as f64 / 4.0;
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // 3 degrees of freedom, p = 0.001
        assert!(chi2 < 16.27, "chi2 {chi2}");
    }

    #[test]
    fn unchecked_parse_and_serde() {
        let pl = parse_pipeline_unchecked("function(loop-mssa(licm)),module(anything)").unwrap();
        assert_eq!(
            pl.passes(),
            &[p("licm", PassLevel::LoopMssa), p("anything", PassLevel::Module)]
        );
        assert!(parse_pipeline_unchecked("dce").is_err());
        let json = serde_json::to_string(&pl).unwrap();
        assert_eq!(json, "\"function(loop-mssa(licm)),module(anything)\"");
        assert_eq!(serde_json::from_str::<PassList>(&json).unwrap(), pl);
    }
}
