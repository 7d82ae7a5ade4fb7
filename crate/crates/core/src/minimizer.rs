//! Shrinks a winning pass list without letting binary size grow.
//!
//! One round runs redundant-pass elimination, a key-ordered bubble sort, and
//! an insertion search. Rounds repeat until nothing changes.

use std::collections::{BTreeMap, HashMap};
use std::ops::ControlFlow;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::autotuner::{RecordKind, RecordStatus, Store, StoreError, TuningRecord};
use crate::catalog::{PassCatalog, PassList};
use crate::pool::ordered_map;
use crate::toolchain::{Backend, BinarySize, ModuleInput, ToolchainError, DEFAULT_TIMEOUT};

pub const DEFAULT_MAX_ROUNDS: usize = 10;

#[derive(Debug, Error)]
pub enum MinimizeError {
    #[error("starting list `{pipeline}` does not compile on {program}: {diagnostics}")]
    InputFailed {
        program: String,
        pipeline: String,
        diagnostics: String,
    },
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Edit {
    Remove,
    Swap,
    Insert,
}

/// One attempted edit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditEntry {
    pub edit: Edit,
    pub candidate: String,
    pub size_before: u64,
    /// `None` when the candidate failed to compile.
    pub size_after: Option<u64>,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minimized {
    pub passes: PassList,
    pub size: BinarySize,
    pub converged: bool,
    pub rounds: usize,
}

/// Minimization state for one program. Compile results are cached by
/// pipeline string, so revisiting a list costs nothing.
pub struct Minimizer<'a, B: Backend + ?Sized> {
    backend: &'a B,
    module: &'a ModuleInput,
    catalog: &'a PassCatalog,
    timeout: Duration,
    cache: HashMap<String, Option<BinarySize>>,
    audit: Vec<AuditEntry>,
    compiles: usize,
}

impl<'a, B: Backend + ?Sized> Minimizer<'a, B> {
    pub fn new(backend: &'a B, module: &'a ModuleInput, catalog: &'a PassCatalog) -> Self {
        Minimizer {
            backend,
            module,
            catalog,
            timeout: DEFAULT_TIMEOUT,
            cache: HashMap::new(),
            audit: Vec::new(),
            compiles: 0,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn take_audit(&mut self) -> Vec<AuditEntry> {
        std::mem::take(&mut self.audit)
    }

    /// Number of backend compilations performed (cache misses).
    pub fn compiles(&self) -> usize {
        self.compiles
    }

    /// Size of `pl` on the module, or `None` if it fails for any reason.
    pub fn size_of(&mut self, pl: &PassList) -> Option<BinarySize> {
        let key = pl.to_pipeline();
        if let Some(hit) = self.cache.get(&key) {
            return *hit;
        }
        self.compiles += 1;
        let size = match self.backend.compile(self.module, pl, self.timeout) {
            Ok(out) if out.is_ok() => out.size,
            Ok(_) => None,
            Err(e) => {
                log::warn!("{}: `{key}` treated as failing: {e}", self.module.id);
                None
            }
        };
        self.cache.insert(key, size);
        size
    }

    fn start(&mut self, pl: &PassList) -> Result<BinarySize, MinimizeError> {
        if let Some(size) = self.size_of(pl) {
            return Ok(size);
        }
        let diagnostics = self.backend.compile(self.module, pl, self.timeout)?.diagnostics;
        Err(MinimizeError::InputFailed {
            program: self.module.id.clone(),
            pipeline: pl.to_pipeline(),
            diagnostics,
        })
    }

    fn try_edit(&mut self, edit: Edit, candidate: &PassList, current: BinarySize, strict: bool) -> Option<BinarySize> {
        let after = self.size_of(candidate);
        let kept = match after {
            Some(s) if strict => s.total() < current.total(),
            Some(s) => s.total() <= current.total(),
            None => false,
        };
        self.audit.push(AuditEntry {
            edit,
            candidate: candidate.to_pipeline(),
            size_before: current.total(),
            size_after: after.map(|s| s.total()),
            kept,
        });
        after.filter(|_| kept)
    }

    /// Drops passes left to right while size does not increase, rescanning
    /// until no pass can be dropped.
    pub fn eliminate_redundant(&mut self, pl: &PassList) -> Result<(PassList, BinarySize), MinimizeError> {
        let mut size = self.start(pl)?;
        let mut current = pl.clone();
        loop {
            let mut changed = false;
            let mut i = 0;
            while i < current.len() {
                let candidate = current.without(i);
                if let Some(s) = self.try_edit(Edit::Remove, &candidate, size, false) {
                    current = candidate;
                    size = s;
                    changed = true;
                } else {
                    i += 1;
                }
            }
            if !changed {
                return Ok((current, size));
            }
        }
    }

    fn key(&self, pl: &PassList, i: usize) -> usize {
        self.catalog.position(&pl.passes()[i]).unwrap_or(self.catalog.len())
    }

    /// Swaps out-of-order neighbours (by catalog position) whenever the
    /// swapped list compiles no larger. Passes outside the catalog sort last.
    pub fn bubble_sort_passes(&mut self, pl: &PassList) -> Result<(PassList, BinarySize), MinimizeError> {
        let mut size = self.start(pl)?;
        let mut current = pl.clone();
        loop {
            let mut changed = false;
            for i in 0..current.len().saturating_sub(1) {
                if self.key(&current, i) <= self.key(&current, i + 1) {
                    continue;
                }
                let candidate = current.with_swapped(i, i + 1);
                if let Some(s) = self.try_edit(Edit::Swap, &candidate, size, false) {
                    current = candidate;
                    size = s;
                    changed = true;
                }
            }
            if !changed {
                return Ok((current, size));
            }
        }
    }

    /// Tries every catalog pass before every position, and at the end. The
    /// first strictly improving insertion at a position is kept and the scan
    /// moves on to the next original pass.
    pub fn insertion_search(&mut self, pl: &PassList) -> Result<(PassList, BinarySize), MinimizeError> {
        let mut size = self.start(pl)?;
        let mut current = pl.clone();
        let mut at = 0;
        while at <= current.len() {
            let mut inserted = false;
            for pass in self.catalog.passes() {
                let candidate = current.with_inserted(at, pass.clone());
                if let Some(s) = self.try_edit(Edit::Insert, &candidate, size, true) {
                    current = candidate;
                    size = s;
                    inserted = true;
                    break;
                }
            }
            at += if inserted { 2 } else { 1 };
        }
        Ok((current, size))
    }

    /// Runs rounds until one changes nothing or `max_rounds` is reached. A
    /// run that stops early still ends with an elimination pass, so the
    /// result is always deletion-minimal.
    pub fn minimize(&mut self, pl: &PassList, max_rounds: usize) -> Result<Minimized, MinimizeError> {
        let mut size = self.start(pl)?;
        let mut current = pl.clone();
        for round in 1..=max_rounds {
            let before = current.clone();
            let (a, _) = self.eliminate_redundant(&current)?;
            let (b, _) = self.bubble_sort_passes(&a)?;
            let (c, s) = self.insertion_search(&b)?;
            current = c;
            size = s;
            if current == before {
                return Ok(Minimized {
                    passes: current,
                    size,
                    converged: true,
                    rounds: round,
                });
            }
        }
        let (passes, size) = if max_rounds == 0 {
            (current, size)
        } else {
            self.eliminate_redundant(&current)?
        };
        Ok(Minimized {
            passes,
            size,
            converged: false,
            rounds: max_rounds,
        })
    }
}

pub fn eliminate_redundant<B: Backend + ?Sized>(
    module: &ModuleInput,
    pl: &PassList,
    backend: &B,
) -> Result<PassList, MinimizeError> {
    let empty = PassCatalog::from_passes(Vec::new()).expect("empty catalog is valid");
    Ok(Minimizer::new(backend, module, &empty).eliminate_redundant(pl)?.0)
}

pub fn bubble_sort_passes<B: Backend + ?Sized>(
    module: &ModuleInput,
    pl: &PassList,
    backend: &B,
    catalog: &PassCatalog,
) -> Result<PassList, MinimizeError> {
    Ok(Minimizer::new(backend, module, catalog).bubble_sort_passes(pl)?.0)
}

pub fn insertion_search<B: Backend + ?Sized>(
    module: &ModuleInput,
    pl: &PassList,
    backend: &B,
    catalog: &PassCatalog,
) -> Result<PassList, MinimizeError> {
    Ok(Minimizer::new(backend, module, catalog).insertion_search(pl)?.0)
}

pub fn minimize<B: Backend + ?Sized>(
    module: &ModuleInput,
    pl: &PassList,
    backend: &B,
    catalog: &PassCatalog,
    max_rounds: usize,
) -> Result<Minimized, MinimizeError> {
    Minimizer::new(backend, module, catalog).minimize(pl, max_rounds)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MinimizeSummary {
    pub minimized: usize,
    /// Programs whose best was already minimized.
    pub skipped: usize,
    pub not_converged: Vec<String>,
    pub failed: Vec<(String, String)>,
    /// Best-list length to number of programs, after minimization.
    pub length_histogram: BTreeMap<usize, usize>,
}

/// Minimizes every program's best list and records the results. Programs
/// whose current best is already minimized are left alone.
pub fn minimize_store<B: Backend + ?Sized>(
    store: &mut Store,
    backend: &B,
    catalog: &PassCatalog,
    max_rounds: usize,
    workers: usize,
    timeout: Duration,
) -> Result<MinimizeSummary, MinimizeError> {
    let mut summary = MinimizeSummary::default();
    let mut jobs = Vec::new();
    for (id, p) in &store.state().programs {
        match &p.best {
            Some(_) if p.best_minimized => summary.skipped += 1,
            Some(b) => jobs.push((store.load_program(id)?, b.pass_list.clone())),
            None => {}
        }
    }
    let mut write_error = None;
    ordered_map(
        jobs.into_iter(),
        workers,
        |(m, pl): (ModuleInput, PassList)| {
            let r = Minimizer::new(backend, &m, catalog).with_timeout(timeout).minimize(&pl, max_rounds);
            (m.id, r)
        },
        |(id, result)| {
            match result {
                Ok(min) => {
                    summary.minimized += 1;
                    if !min.converged {
                        summary.not_converged.push(id.clone());
                    }
                    let record = TuningRecord::new(&id, RecordKind::Minimized, min.passes, RecordStatus::Ok)
                        .with_size(Some(min.size))
                        .with_note(format!("rounds {} converged {}", min.rounds, min.converged));
                    if let Err(e) = store.append(&record) {
                        write_error = Some(e);
                        return ControlFlow::Break(());
                    }
                }
                Err(e) => {
                    log::warn!("minimize {id}: {e}");
                    summary.failed.push((id, e.to_string()));
                }
            }
            ControlFlow::Continue(())
        },
    );
    store.snapshot()?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    for p in store.state().programs.values() {
        if let Some(b) = &p.best {
            *summary.length_histogram.entry(b.pass_list.len()).or_default() += 1;
        }
    }
    Ok(summary)
}
