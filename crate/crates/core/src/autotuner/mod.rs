//! Random search for the smallest-binary pass list of each program, and
//! broadcast of frequently winning lists across programs.
//!
//! Trial `i` of program `p` draws its list from an RNG seeded with
//! `sha256(seed, p, i)`, and results are written to the store in
//! (program, trial) order by a single writer. The store contents therefore
//! depend only on the seed and budget, never on the worker count or on
//! where a run was interrupted.

mod store;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{PassCatalog, PassList};
use crate::pool::ordered_map;
use crate::toolchain::{Backend, BinarySize, CompilationOutcome, ModuleInput, ToolchainError, DEFAULT_TIMEOUT};

pub use store::{Best, BestStore, ProgramState, RecordKind, RecordStatus, Store, StoreError, TuningRecord};

pub const DEFAULT_MAX_LIST_LEN: usize = 50;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("invalid budget: {0}")]
    Budget(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("backend failed on {program}: {source}")]
    Toolchain {
        program: String,
        #[source]
        source: ToolchainError,
    },
    #[error("cannot compute the -Oz baseline of {program}: {reason}")]
    Baseline { program: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchBudget {
    pub trials_per_program: u64,
    pub max_list_len: usize,
    pub timeout: Duration,
    pub seed: u64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            trials_per_program: 100,
            max_list_len: DEFAULT_MAX_LIST_LEN,
            timeout: DEFAULT_TIMEOUT,
            seed: 0,
        }
    }
}

impl SearchBudget {
    /// Zero trials is allowed and means "baseline only".
    pub fn validate(&self) -> Result<(), TuneError> {
        if self.max_list_len == 0 {
            return Err(TuneError::Budget("max list length must be at least 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(TuneError::Budget("timeout must be positive".into()));
        }
        Ok(())
    }
}

pub fn trial_seed(seed: u64, program_id: &str, trial: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((program_id.len() as u64).to_le_bytes());
    h.update(program_id.as_bytes());
    h.update(trial.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// The list evaluated by trial `trial` of `program_id`.
pub fn trial_pass_list(catalog: &PassCatalog, budget: &SearchBudget, program_id: &str, trial: u64) -> PassList {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(budget.seed, program_id, trial));
    catalog.random_pass_list_with(budget.max_list_len, &mut rng)
}

/// `-Oz` size of a program.
pub fn oz_baseline<B: Backend + ?Sized>(module: &ModuleInput, backend: &B, timeout: Duration) -> Result<BinarySize, TuneError> {
    let out = backend
        .compile(module, &PassList::oz(), timeout)
        .map_err(|source| TuneError::Toolchain {
            program: module.id.clone(),
            source,
        })?;
    match out.size {
        Some(size) if out.is_ok() => Ok(size),
        _ => Err(TuneError::Baseline {
            program: module.id.clone(),
            reason: out.diagnostics,
        }),
    }
}

fn outcome_record(program: &str, kind: RecordKind, pl: PassList, out: CompilationOutcome) -> TuningRecord {
    TuningRecord::new(program, kind, pl, out.status.into())
        .with_size(out.size.filter(|_| out.is_ok()))
        .with_note(out.diagnostics)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TuneSummary {
    pub programs: usize,
    pub baselines_run: u64,
    pub trials_run: u64,
    pub duplicates: u64,
    pub failures: u64,
    pub excluded: Vec<(String, String)>,
    /// The run stopped before the budget was exhausted.
    pub interrupted: bool,
}

struct TrialJob<'m> {
    module: &'m ModuleInput,
    trial: u64,
    pass_list: PassList,
    duplicate: bool,
}

enum Halt {
    Stopped,
    Failed(TuneError),
}

pub struct Autotuner<'a, B: Backend + ?Sized> {
    backend: &'a B,
    catalog: &'a PassCatalog,
    budget: SearchBudget,
    workers: usize,
    stop_after: Option<u64>,
    stop: Option<&'a AtomicBool>,
}

impl<'a, B: Backend + ?Sized> Autotuner<'a, B> {
    pub fn new(backend: &'a B, catalog: &'a PassCatalog, budget: SearchBudget) -> Self {
        Autotuner {
            backend,
            catalog,
            budget,
            workers: 1,
            stop_after: None,
            stop: None,
        }
    }

    pub fn workers(mut self, n: usize) -> Self {
        self.workers = n.max(1);
        self
    }

    /// Stops after writing this many trial records in one run.
    pub fn stop_after(mut self, trials: u64) -> Self {
        self.stop_after = Some(trials);
        self
    }

    /// Stops cleanly at the next record once `flag` is set.
    pub fn stop_flag(mut self, flag: &'a AtomicBool) -> Self {
        self.stop = Some(flag);
        self
    }

    /// Runs (or resumes) the search over `programs`.
    pub fn run(&self, programs: &[ModuleInput], store: &mut Store) -> Result<TuneSummary, TuneError> {
        self.budget.validate()?;
        if programs.is_empty() {
            return Ok(TuneSummary::default());
        }
        if self.catalog.is_empty() && self.budget.trials_per_program > 0 {
            return Err(TuneError::Budget("catalog is empty".into()));
        }
        let mut summary = TuneSummary {
            programs: programs.len(),
            ..TuneSummary::default()
        };
        for m in programs {
            store.save_program(m)?;
        }

        let result = self.run_baselines(programs, store, &mut summary);
        let result = result.and_then(|()| self.run_trials(programs, store, &mut summary));
        store.snapshot()?;
        match result {
            Ok(()) => {}
            Err(Halt::Stopped) => summary.interrupted = true,
            Err(Halt::Failed(e)) => return Err(e),
        }
        for m in programs {
            if let Some(reason) = store.state().program(&m.id).and_then(|p| p.excluded.clone()) {
                summary.excluded.push((m.id.clone(), reason));
            }
        }
        Ok(summary)
    }

    fn stopped(&self) -> bool {
        self.stop.is_some_and(|f| f.load(Ordering::Relaxed))
    }

    fn run_baselines(&self, programs: &[ModuleInput], store: &mut Store, summary: &mut TuneSummary) -> Result<(), Halt> {
        let todo: Vec<&ModuleInput> = programs
            .iter()
            .filter(|m| {
                store
                    .state()
                    .program(&m.id)
                    .is_none_or(|p| p.baseline.is_none() && p.excluded.is_none())
            })
            .collect();
        let timeout = self.budget.timeout;
        let halt = ordered_map(
            todo.into_iter(),
            self.workers,
            |m| {
                self.backend
                    .compile(m, &PassList::oz(), timeout)
                    .map(|out| outcome_record(&m.id, RecordKind::Baseline, PassList::oz(), out))
                    .map_err(|source| TuneError::Toolchain {
                        program: m.id.clone(),
                        source,
                    })
            },
            |r| {
                let record = match r {
                    Ok(r) => r,
                    Err(e) => return ControlFlow::Break(Halt::Failed(e)),
                };
                if record.status != RecordStatus::Ok {
                    log::warn!("excluding {}: -Oz baseline failed: {}", record.program_id, record.note);
                }
                if let Err(e) = store.append(&record) {
                    return ControlFlow::Break(Halt::Failed(e.into()));
                }
                summary.baselines_run += 1;
                if self.stopped() {
                    return ControlFlow::Break(Halt::Stopped);
                }
                ControlFlow::Continue(())
            },
        );
        halt.map_or(Ok(()), Err)
    }

    fn run_trials(&self, programs: &[ModuleInput], store: &mut Store, summary: &mut TuneSummary) -> Result<(), Halt> {
        if self.stop_after == Some(0) || self.stopped() {
            return Err(Halt::Stopped);
        }
        let budget = self.budget;
        let catalog = self.catalog;
        let plan: Vec<(&ModuleInput, u64)> = programs
            .iter()
            .filter_map(|m| {
                let p = store.state().program(&m.id)?;
                p.baseline?;
                Some((m, p.trials_done))
            })
            .collect();
        let jobs = plan.into_iter().flat_map(move |(m, done)| {
            let mut seen: HashSet<PassList> = (0..done)
                .map(|i| trial_pass_list(catalog, &budget, &m.id, i))
                .collect();
            (done..budget.trials_per_program).map(move |trial| {
                let pass_list = trial_pass_list(catalog, &budget, &m.id, trial);
                let duplicate = !seen.insert(pass_list.clone());
                TrialJob {
                    module: m,
                    trial,
                    pass_list,
                    duplicate,
                }
            })
        });
        let timeout = budget.timeout;
        let mut written = 0u64;
        let halt = ordered_map(
            jobs,
            self.workers,
            |job: TrialJob<'_>| {
                let id = &job.module.id;
                if job.duplicate {
                    return Ok(TuningRecord::new(id, RecordKind::Trial, job.pass_list, RecordStatus::Duplicate)
                        .with_trial(job.trial));
                }
                match self.backend.compile(job.module, &job.pass_list, timeout) {
                    Ok(out) => Ok(outcome_record(id, RecordKind::Trial, job.pass_list, out).with_trial(job.trial)),
                    Err(source) => Err(TuneError::Toolchain {
                        program: id.clone(),
                        source,
                    }),
                }
            },
            |r| {
                let record = match r {
                    Ok(r) => r,
                    Err(e) => return ControlFlow::Break(Halt::Failed(e)),
                };
                match record.status {
                    RecordStatus::Duplicate => {
                        log::debug!(
                            "{} trial {}: skipping duplicate `{}`",
                            record.program_id,
                            record.trial_index.unwrap_or_default(),
                            record.pass_list
                        );
                        summary.duplicates += 1;
                    }
                    RecordStatus::Ok => {}
                    _ => summary.failures += 1,
                }
                if let Err(e) = store.append(&record) {
                    return ControlFlow::Break(Halt::Failed(e.into()));
                }
                summary.trials_run += 1;
                written += 1;
                if self.stop_after.is_some_and(|n| written >= n) || self.stopped() {
                    return ControlFlow::Break(Halt::Stopped);
                }
                ControlFlow::Continue(())
            },
        );
        halt.map_or(Ok(()), Err)
    }
}

/// Tunes one program and returns its best list, which is never worse than
/// the `-Oz` baseline.
pub fn tune_program<B: Backend + ?Sized>(
    module: &ModuleInput,
    budget: SearchBudget,
    backend: &B,
    catalog: &PassCatalog,
    store: &mut Store,
) -> Result<Best, TuneError> {
    Autotuner::new(backend, catalog, budget).run(std::slice::from_ref(module), store)?;
    let state = store.state().program(&module.id);
    match state.and_then(|p| p.best.clone()) {
        Some(best) => Ok(best),
        None => Err(TuneError::Baseline {
            program: module.id.clone(),
            reason: state.and_then(|p| p.excluded.clone()).unwrap_or_default(),
        }),
    }
}

/// The `k` lists that are best for the most programs. Ties go to the smaller
/// mean best/baseline ratio, then the smaller pipeline string.
pub fn top_k(state: &BestStore, k: usize) -> Vec<PassList> {
    let mut groups: BTreeMap<String, (PassList, usize, f64)> = BTreeMap::new();
    for p in state.programs.values() {
        let Some(best) = &p.best else { continue };
        let ratio = match p.baseline {
            Some(b) if b.total() > 0 => best.size.total() as f64 / b.total() as f64,
            _ => 1.0,
        };
        let entry = groups
            .entry(best.pass_list.to_pipeline())
            .or_insert_with(|| (best.pass_list.clone(), 0, 0.0));
        entry.1 += 1;
        entry.2 += ratio;
    }
    let mut ranked: Vec<(String, PassList, usize, f64)> = groups
        .into_iter()
        .map(|(key, (pl, n, sum))| (key, pl, n, sum / n as f64))
        .collect();
    ranked.sort_by(|a, b| b.2.cmp(&a.2).then(a.3.total_cmp(&b.3)).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(_, pl, _, _)| pl).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastSummary {
    pub candidates: Vec<PassList>,
    pub evaluations: u64,
    pub failures: u64,
    pub improved_programs: usize,
    pub unique_before: usize,
    pub unique_after: usize,
}

/// Evaluates the top `k` lists on every program and keeps strict
/// improvements. Pairs already present in the log are not compiled again,
/// so repeating a broadcast changes nothing.
pub fn broadcast_top_k<B: Backend + ?Sized>(
    store: &mut Store,
    programs: &[ModuleInput],
    k: usize,
    backend: &B,
    workers: usize,
    timeout: Duration,
) -> Result<BroadcastSummary, TuneError> {
    let unique_before = store.state().unique_best_lists();
    let candidates = top_k(store.state(), k);
    let before: HashMap<String, Option<u64>> = store
        .state()
        .programs
        .iter()
        .map(|(id, p)| (id.clone(), p.best.as_ref().map(|b| b.size.total())))
        .collect();

    let mut evaluated: HashSet<(String, String)> = HashSet::new();
    for r in store.records()? {
        if matches!(r.kind, RecordKind::Trial | RecordKind::Broadcast | RecordKind::Baseline)
            && r.status != RecordStatus::Duplicate
        {
            evaluated.insert((r.program_id, r.pass_list.to_pipeline()));
        }
    }
    let by_id: HashMap<&str, &ModuleInput> = programs.iter().map(|m| (m.id.as_str(), m)).collect();
    let mut jobs = Vec::new();
    for (id, p) in &store.state().programs {
        if p.best.is_none() {
            continue;
        }
        let Some(&m) = by_id.get(id.as_str()) else {
            log::warn!("broadcast: no IR for {id}, skipping");
            continue;
        };
        for c in &candidates {
            if !evaluated.contains(&(id.clone(), c.to_pipeline())) {
                jobs.push((m, c.clone()));
            }
        }
    }

    let mut evaluations = 0;
    let mut failures = 0;
    let mut write_error = None;
    ordered_map(
        jobs.into_iter(),
        workers,
        |(m, pl): (&ModuleInput, PassList)| match backend.compile(m, &pl, timeout) {
            Ok(out) => outcome_record(&m.id, RecordKind::Broadcast, pl, out),
            Err(e) => TuningRecord::new(&m.id, RecordKind::Broadcast, pl, RecordStatus::CompilerError)
                .with_note(e.to_string()),
        },
        |record| {
            evaluations += 1;
            if record.status != RecordStatus::Ok {
                failures += 1;
                log::warn!("broadcast `{}` on {} failed: {}", record.pass_list, record.program_id, record.note);
            }
            match store.append(&record) {
                Ok(()) => ControlFlow::Continue(()),
                Err(e) => {
                    write_error = Some(e);
                    ControlFlow::Break(())
                }
            }
        },
    );
    store.snapshot()?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    let improved_programs = store
        .state()
        .programs
        .iter()
        .filter(|(id, p)| {
            let now = p.best.as_ref().map(|b| b.size.total());
            matches!((before.get(*id).copied().flatten(), now), (Some(a), Some(b)) if b < a)
        })
        .count();
    Ok(BroadcastSummary {
        candidates,
        evaluations,
        failures,
        improved_programs,
        unique_before,
        unique_after: store.state().unique_best_lists(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolchain::mock::{self, MockBackend};

    #[test]
    fn trial_seeds_separate_programs_and_trials() {
        let a = trial_seed(7, "p", 0);
        assert_eq!(a, trial_seed(7, "p", 0));
        assert_ne!(a, trial_seed(7, "p", 1));
        assert_ne!(a, trial_seed(7, "q", 0));
        assert_ne!(a, trial_seed(8, "p", 0));
        // Length prefixing keeps ("ab", ..) and ("a", ..) apart.
        assert_ne!(trial_seed(0, "ab", 0), trial_seed(0, "a", 0x62));
    }

    #[test]
    fn zero_trials_keeps_the_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let m = ModuleInput::new("p", "define @f: a b x\n");
        let budget = SearchBudget {
            trials_per_program: 0,
            seed: 1,
            ..SearchBudget::default()
        };
        let best = tune_program(&m, budget, &MockBackend, &MockBackend::search_catalog(), &mut store).unwrap();
        assert_eq!(best.pass_list, PassList::oz());
        assert_eq!(best.size.total(), 16);
    }

    #[test]
    fn all_failing_trials_fall_back_to_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let m = ModuleInput::new("p", "define @f: a b x\n");
        let crash_only = PassCatalog::from_passes(vec![MockBackend::pass(mock::CRASH)]).unwrap();
        let budget = SearchBudget {
            trials_per_program: 20,
            max_list_len: 3,
            ..SearchBudget::default()
        };
        let best = tune_program(&m, budget, &MockBackend, &crash_only, &mut store).unwrap();
        assert_eq!(best.pass_list, PassList::oz());
        let p = store.state().program("p").unwrap();
        assert_eq!(p.trials_done, 20);
        assert_eq!(p.ok_trials, 0);
        // With one pass and lengths 1..=3 only three distinct lists exist.
        assert_eq!(p.failed_trials, 3);
        assert_eq!(p.duplicate_trials, 17);
    }

    #[test]
    fn failing_baseline_excludes_the_program() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let m = ModuleInput::new("bad", "this is not mock ir");
        let cat = MockBackend::search_catalog();
        let summary = Autotuner::new(&MockBackend, &cat, SearchBudget::default())
            .run(std::slice::from_ref(&m), &mut store)
            .unwrap();
        assert_eq!(summary.excluded.len(), 1);
        assert_eq!(summary.trials_run, 0);
        assert!(oz_baseline(&m, &MockBackend, DEFAULT_TIMEOUT).is_err());
    }

    #[test]
    fn top_k_orders_by_frequency_then_ratio() {
        let mut s = BestStore::default();
        let put = |s: &mut BestStore, id: &str, pl: &PassList, best: u64, base: u64| {
            let mut b = TuningRecord::new(id, RecordKind::Baseline, PassList::oz(), RecordStatus::Ok)
                .with_size(Some(BinarySize::new(base, 0)));
            s.apply(&b);
            b = TuningRecord::new(id, RecordKind::Trial, pl.clone(), RecordStatus::Ok)
                .with_size(Some(BinarySize::new(best, 0)))
                .with_trial(0);
            s.apply(&b);
        };
        let l = |n: &str| PassList::new(vec![MockBackend::pass(n)]);
        put(&mut s, "a", &l(mock::FOLD), 5, 10);
        put(&mut s, "b", &l(mock::FOLD), 5, 10);
        put(&mut s, "c", &l(mock::DCE), 9, 10);
        put(&mut s, "d", &l(mock::DEDUP), 1, 10);
        assert_eq!(top_k(&s, 3), vec![l(mock::FOLD), l(mock::DEDUP), l(mock::DCE)]);
        assert_eq!(top_k(&s, 1).len(), 1);
    }
}
