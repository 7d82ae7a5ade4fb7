//! Rejects pass lists that crash the compiler or break program semantics.
//!
//! Each suite program pairs a reference solution with a self-checking test
//! driver. A pass list is applied to the solution only; the driver is built
//! with a conservative pipeline, the two are linked, and the binary must exit
//! 0. Suites must pass a sanity build before they can judge anything, which
//! the [`CheckedSuite`] type enforces.

use std::collections::HashMap;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autotuner::{Best, RecordKind, RecordStatus, Store, StoreError, TuningRecord};
use crate::catalog::PassList;
use crate::pool::ordered_map;
use crate::toolchain::{
    run_with_timeout, Backend, Emit, LlvmBackend, MockBackend, MockModule, ModuleInput, ProcessOutput, ToolchainError,
    DEFAULT_TIMEOUT,
};

pub const DEFAULT_EXEC_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("suite program {program} fails its sanity build: {detail}")]
    InsaneSuite { program: String, detail: String },
    #[error("suite is empty")]
    EmptySuite,
    #[error("cannot read suite manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("cannot read run spec {path}: {message}")]
    RunSpec { path: PathBuf, message: String },
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestProgram {
    pub id: String,
    pub solution: PathBuf,
    pub test: PathBuf,
    /// Extra compiler flags for both halves, such as `-std=c++17`.
    #[serde(default)]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub programs: Vec<TestProgram>,
}

impl SuiteManifest {
    /// Loads a JSON manifest. Relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ValidateError> {
        let err = |message: String| ValidateError::Manifest {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut m: SuiteManifest = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut m.programs {
            p.solution = base.join(&p.solution);
            p.test = base.join(&p.test);
        }
        Ok(m)
    }

    /// The bundled five-program C++ smoke suite.
    pub fn smoke() -> Self {
        Self::load(&smoke_suite_path()).expect("bundled smoke suite manifest is valid")
    }
}

pub fn smoke_suite_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/smoke_suite/manifest.json")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum Outcome {
    Accepted,
    CompileFail { program: String, diagnostics: String },
    RunFail { program: String, exit: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub pass_list: PassList,
    #[serde(flatten)]
    pub outcome: Outcome,
}

impl Verdict {
    pub fn accepted(&self) -> bool {
        self.outcome == Outcome::Accepted
    }
}

/// What happened when one suite program was built and run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunOutcome {
    Passed,
    CompileFailed(String),
    Failed(String),
}

/// Builds and runs one suite program. `None` asks for the conservative
/// sanity build of the solution.
pub trait SuiteRunner: Sync {
    fn run(&self, program: &TestProgram, passes: Option<&PassList>) -> Result<RunOutcome, ValidateError>;
}

/// A suite whose every program passed its sanity build.
#[derive(Debug, Clone)]
pub struct CheckedSuite {
    programs: Vec<TestProgram>,
}

impl CheckedSuite {
    pub fn check<R: SuiteRunner + ?Sized>(programs: Vec<TestProgram>, runner: &R) -> Result<Self, ValidateError> {
        if programs.is_empty() {
            return Err(ValidateError::EmptySuite);
        }
        for p in &programs {
            let detail = match runner.run(p, None)? {
                RunOutcome::Passed => continue,
                RunOutcome::CompileFailed(d) => format!("build failed: {d}"),
                RunOutcome::Failed(e) => format!("tests failed ({e})"),
            };
            return Err(ValidateError::InsaneSuite {
                program: p.id.clone(),
                detail,
            });
        }
        Ok(CheckedSuite { programs })
    }

    pub fn programs(&self) -> &[TestProgram] {
        &self.programs
    }
}

/// Applies `pl` to every suite program and stops at the first failure.
pub fn pass_list_eval<R: SuiteRunner + ?Sized>(
    pl: &PassList,
    suite: &CheckedSuite,
    runner: &R,
    workers: usize,
) -> Result<Verdict, ValidateError> {
    let failure = ordered_map(
        suite.programs.iter(),
        workers,
        |p| runner.run(p, Some(pl)).map(|o| (p.id.clone(), o)),
        |r| match r {
            Ok((_, RunOutcome::Passed)) => ControlFlow::Continue(()),
            Ok((program, RunOutcome::CompileFailed(diagnostics))) => {
                ControlFlow::Break(Ok(Outcome::CompileFail { program, diagnostics }))
            }
            Ok((program, RunOutcome::Failed(exit))) => ControlFlow::Break(Ok(Outcome::RunFail { program, exit })),
            Err(e) => ControlFlow::Break(Err(e)),
        },
    );
    let outcome = match failure {
        None => Outcome::Accepted,
        Some(r) => r?,
    };
    Ok(Verdict {
        pass_list: pl.clone(),
        outcome,
    })
}

/// A checked suite with a verdict cache keyed by pipeline string.
pub struct Validator<'a, R: SuiteRunner + ?Sized> {
    runner: &'a R,
    suite: CheckedSuite,
    workers: usize,
    cache: Mutex<HashMap<String, Verdict>>,
}

impl<'a, R: SuiteRunner + ?Sized> Validator<'a, R> {
    pub fn new(runner: &'a R, suite: CheckedSuite) -> Self {
        Validator {
            runner,
            suite,
            workers: 1,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn workers(mut self, n: usize) -> Self {
        self.workers = n.max(1);
        self
    }

    pub fn evaluate(&self, pl: &PassList) -> Result<Verdict, ValidateError> {
        let key = pl.to_pipeline();
        if let Some(v) = self.cache.lock().expect("verdict cache").get(&key) {
            return Ok(v.clone());
        }
        let v = pass_list_eval(pl, &self.suite, self.runner, self.workers)?;
        self.cache.lock().expect("verdict cache").insert(key, v.clone());
        Ok(v)
    }

    pub fn evaluations(&self) -> usize {
        self.cache.lock().expect("verdict cache").len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationSummary {
    pub unique_lists: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Programs whose best was replaced by an accepted alternative or `-Oz`.
    pub reverted: Vec<String>,
}

/// Validates every program's best list. Rejected bests fall back to the
/// smallest accepted alternative from the log, or to `-Oz`.
pub fn validate_store<R: SuiteRunner + ?Sized>(
    store: &mut Store,
    validator: &Validator<'_, R>,
    max_alternatives: usize,
) -> Result<ValidationSummary, ValidateError> {
    let mut summary = ValidationSummary::default();
    let mut alternatives: HashMap<String, Vec<Best>> = HashMap::new();
    for r in store.records()? {
        if !matches!(r.kind, RecordKind::Trial | RecordKind::Broadcast | RecordKind::Minimized) {
            continue;
        }
        if let (RecordStatus::Ok, Some(size)) = (r.status, r.size) {
            alternatives.entry(r.program_id).or_default().push(Best {
                pass_list: r.pass_list,
                size,
            });
        }
    }
    let mut seen = std::collections::BTreeMap::new();
    let ids: Vec<String> = store.state().programs.keys().cloned().collect();
    for id in ids {
        let p = &store.state().programs[&id];
        let Some(best) = p.best.clone() else { continue };
        if p.best_validated {
            continue;
        }
        let verdict = validator.evaluate(&best.pass_list)?;
        seen.insert(best.pass_list.to_pipeline(), verdict.accepted());
        store.append(&verdict_record(&id, &verdict))?;
        if verdict.accepted() {
            continue;
        }
        log::info!("{id}: `{}` rejected: {:?}", best.pass_list, verdict.outcome);

        let mut candidates = alternatives.remove(&id).unwrap_or_default();
        candidates.sort_by(|a, b| {
            if a.beats(b) {
                std::cmp::Ordering::Less
            } else if b.beats(a) {
                std::cmp::Ordering::Greater
            } else {
                std::cmp::Ordering::Equal
            }
        });
        candidates.dedup_by(|a, b| a.pass_list == b.pass_list);
        let rejected = store.state().programs[&id].rejected.clone();
        let baseline = store.state().programs[&id].baseline;
        let mut replacement = None;
        for c in candidates
            .into_iter()
            .filter(|c| !rejected.contains(&c.pass_list.to_pipeline()))
            .filter(|c| baseline.is_none_or(|b| c.size.total() <= b.total()))
            .take(max_alternatives)
        {
            let v = validator.evaluate(&c.pass_list)?;
            seen.insert(c.pass_list.to_pipeline(), v.accepted());
            store.append(&verdict_record(&id, &v))?;
            if v.accepted() {
                replacement = Some(c);
                break;
            }
        }
        let replacement = match (replacement, baseline) {
            (Some(r), _) => r,
            (None, Some(size)) => Best {
                pass_list: PassList::oz(),
                size,
            },
            (None, None) => continue,
        };
        store.append(
            &TuningRecord::new(&id, RecordKind::Reverted, replacement.pass_list, RecordStatus::Ok)
                .with_size(Some(replacement.size)),
        )?;
        summary.reverted.push(id);
    }
    store.snapshot()?;
    summary.unique_lists = seen.len();
    summary.accepted = seen.values().filter(|a| **a).count();
    summary.rejected = seen.len() - summary.accepted;
    Ok(summary)
}

fn verdict_record(id: &str, v: &Verdict) -> TuningRecord {
    let (status, note) = match &v.outcome {
        Outcome::Accepted => (RecordStatus::Accepted, String::new()),
        Outcome::CompileFail { program, diagnostics } => {
            (RecordStatus::Rejected, format!("{program}: compile failed: {diagnostics}"))
        }
        Outcome::RunFail { program, exit } => (RecordStatus::Rejected, format!("{program}: run failed: {exit}")),
    };
    TuningRecord::new(id, RecordKind::Validated, v.pass_list.clone(), status).with_note(note)
}

/// Builds suite programs with an LLVM toolchain.
pub struct LlvmSuiteRunner {
    backend: LlvmBackend,
    exec_timeout: Duration,
}

impl LlvmSuiteRunner {
    pub fn new(backend: LlvmBackend) -> Self {
        LlvmSuiteRunner {
            backend,
            exec_timeout: DEFAULT_EXEC_TIMEOUT,
        }
    }

    pub fn with_exec_timeout(mut self, t: Duration) -> Self {
        self.exec_timeout = t;
        self
    }

    /// Runs `clang++ <flags> <args>`; `Some(diagnostics)` on failure.
    fn cxx(&self, flags: &[String], args: &[&dyn AsRef<std::ffi::OsStr>]) -> Result<Option<String>, ValidateError> {
        let cxx = self.backend.clangxx()?;
        let mut cmd = Command::new(&cxx);
        cmd.args(flags);
        for a in args {
            cmd.arg(a);
        }
        let out = run_with_timeout(cmd, None, DEFAULT_TIMEOUT).map_err(|e| ToolchainError::Spawn {
            tool: cxx.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(if out.success() {
            None
        } else {
            Some(format!("{} ({})", out.stderr_lossy().trim(), out.exit_description()))
        })
    }
}

impl SuiteRunner for LlvmSuiteRunner {
    fn run(&self, program: &TestProgram, passes: Option<&PassList>) -> Result<RunOutcome, ValidateError> {
        let dir = self.backend.scratch()?;
        let d = dir.path();
        let (sol_o, test_o, exe) = (d.join("solution.o"), d.join("test.o"), d.join("program"));
        let flags = &program.flags;

        match passes {
            None => {
                if let Some(e) = self.cxx(flags, &[&"-O2", &"-c", &program.solution, &"-o", &sol_o])? {
                    return Ok(RunOutcome::CompileFailed(e));
                }
            }
            Some(pl) => {
                let sol_ll = d.join("solution.ll");
                let frontend: [&dyn AsRef<std::ffi::OsStr>; 8] = [
                    &"-O0",
                    &"-Xclang",
                    &"-disable-O0-optnone",
                    &"-S",
                    &"-emit-llvm",
                    &program.solution,
                    &"-o",
                    &sol_ll,
                ];
                if let Some(e) = self.cxx(flags, &frontend)? {
                    return Ok(RunOutcome::CompileFailed(format!("frontend: {e}")));
                }
                let module = ModuleInput::new(&program.id, std::fs::read_to_string(&sol_ll)?);
                let optimized = self.backend.apply_passes(&module, pl, DEFAULT_TIMEOUT)?;
                let Some(ir) = optimized.text().filter(|_| optimized.is_ok()) else {
                    return Ok(RunOutcome::CompileFailed(optimized.diagnostics));
                };
                let lowered = self.backend.lower(ir, Emit::Object, DEFAULT_TIMEOUT)?;
                let Some(bytes) = lowered.object_bytes().filter(|_| lowered.is_ok()) else {
                    return Ok(RunOutcome::CompileFailed(lowered.diagnostics));
                };
                std::fs::write(&sol_o, bytes)?;
            }
        }
        if let Some(e) = self.cxx(flags, &[&"-O2", &"-c", &program.test, &"-o", &test_o])? {
            return Ok(RunOutcome::CompileFailed(format!("test driver: {e}")));
        }
        if let Some(e) = self.cxx(flags, &[&sol_o, &test_o, &"-o", &exe])? {
            return Ok(RunOutcome::CompileFailed(format!("link: {e}")));
        }
        let out = run_with_timeout(Command::new(&exe), None, self.exec_timeout)?;
        Ok(if out.success() {
            RunOutcome::Passed
        } else {
            RunOutcome::Failed(out.exit_description())
        })
    }
}

/// Runs mock-IR suite programs: the solution file holds mock IR and the
/// program "crashes" when the optimized IR is miscompiled.
#[derive(Debug, Clone, Default)]
pub struct MockSuiteRunner;

impl SuiteRunner for MockSuiteRunner {
    fn run(&self, program: &TestProgram, passes: Option<&PassList>) -> Result<RunOutcome, ValidateError> {
        let module = ModuleInput::new(&program.id, std::fs::read_to_string(&program.solution)?);
        let out = MockBackend.apply_passes(&module, passes.unwrap_or(&PassList::empty()), DEFAULT_TIMEOUT)?;
        let Some(ir) = out.text().filter(|_| out.is_ok()) else {
            return Ok(RunOutcome::CompileFailed(out.diagnostics));
        };
        Ok(match MockModule::parse(ir) {
            Ok(m) if m.executes_cleanly() => RunOutcome::Passed,
            Ok(_) => RunOutcome::Failed("exit 1".into()),
            Err(e) => RunOutcome::CompileFailed(e),
        })
    }
}

/// How to run two builds for a differential comparison.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub args: Vec<String>,
    pub stdin: Option<String>,
    /// Also compare stderr, for programs whose diagnostics are deterministic.
    pub compare_stderr: bool,
    pub timeout_secs: Option<u64>,
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<Self, ValidateError> {
        let err = |message: String| ValidateError::RunSpec {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    fn timeout(&self) -> Duration {
        self.timeout_secs.map(Duration::from_secs).unwrap_or(DEFAULT_EXEC_TIMEOUT)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "result", rename_all = "kebab-case")]
pub enum DiffResult {
    Match,
    Mismatch {
        /// `exit`, `stdout` or `stderr`.
        stream: String,
        /// First differing byte, for output streams.
        offset: Option<usize>,
        detail: String,
    },
}

/// Runs both executables on the same input and compares exit status and
/// output byte for byte.
pub fn differential_test(a: &Path, b: &Path, spec: &RunSpec) -> Result<DiffResult, ValidateError> {
    let run = |exe: &Path| -> Result<ProcessOutput, ValidateError> {
        let mut cmd = Command::new(exe);
        cmd.args(&spec.args);
        Ok(run_with_timeout(cmd, spec.stdin.as_deref().map(str::as_bytes), spec.timeout())?)
    };
    let (ra, rb) = (run(a)?, run(b)?);
    let (ea, eb) = (ra.exit_description(), rb.exit_description());
    if ea != eb {
        return Ok(DiffResult::Mismatch {
            stream: "exit".into(),
            offset: None,
            detail: format!("{ea} vs {eb}"),
        });
    }
    let mut streams = vec![("stdout", &ra.stdout, &rb.stdout)];
    if spec.compare_stderr {
        streams.push(("stderr", &ra.stderr, &rb.stderr));
    }
    for (name, x, y) in streams {
        if let Some(offset) = first_divergence(x, y) {
            return Ok(DiffResult::Mismatch {
                stream: name.into(),
                offset: Some(offset),
                detail: format!("{} vs {} bytes", x.len(), y.len()),
            });
        }
    }
    Ok(DiffResult::Match)
}

pub fn first_divergence(a: &[u8], b: &[u8]) -> Option<usize> {
    match a.iter().zip(b).position(|(x, y)| x != y) {
        Some(i) => Some(i),
        None if a.len() != b.len() => Some(a.len().min(b.len())),
        None => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolchain::mock::{self, MockBackend};

    fn suite(dir: &Path, programs: &[(&str, &str)]) -> Vec<TestProgram> {
        programs
            .iter()
            .map(|(id, ir)| {
                let solution = dir.join(format!("{id}.mock"));
                std::fs::write(&solution, ir).unwrap();
                TestProgram {
                    id: id.to_string(),
                    solution: solution.clone(),
                    test: solution,
                    flags: vec![],
                }
            })
            .collect()
    }

    fn list(names: &[&str]) -> PassList {
        names.iter().map(|n| MockBackend::pass(n)).collect()
    }

    #[test]
    fn mock_suite_accepts_safe_and_rejects_unsafe_lists() {
        let dir = tempfile::tempdir().unwrap();
        let programs = suite(dir.path(), &[("p", "define @f: c d\n"), ("q", "define @g: a b\n")]);
        let checked = CheckedSuite::check(programs, &MockSuiteRunner).unwrap();
        let v = pass_list_eval(&PassList::empty(), &checked, &MockSuiteRunner, 1).unwrap();
        assert!(v.accepted());
        assert!(pass_list_eval(&PassList::oz(), &checked, &MockSuiteRunner, 2).unwrap().accepted());
        let v = pass_list_eval(&list(&[mock::MISCOMPILE]), &checked, &MockSuiteRunner, 1).unwrap();
        assert_eq!(
            v.outcome,
            Outcome::RunFail {
                program: "q".into(),
                exit: "exit 1".into()
            }
        );
        let v = pass_list_eval(&list(&[mock::CRASH]), &checked, &MockSuiteRunner, 4).unwrap();
        assert!(matches!(v.outcome, Outcome::CompileFail { ref program, .. } if program == "p"));
    }

    #[test]
    fn verdict_status_ignores_suite_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut programs = suite(dir.path(), &[("p", "define @f: a\n"), ("q", "define @g: c\n"), ("r", "define @h: x\n")]);
        for pl in [list(&[mock::MISCOMPILE]), list(&[mock::FOLD]), list(&[mock::CRASH])] {
            let forward = CheckedSuite::check(programs.clone(), &MockSuiteRunner).unwrap();
            programs.reverse();
            let backward = CheckedSuite::check(programs.clone(), &MockSuiteRunner).unwrap();
            let a = pass_list_eval(&pl, &forward, &MockSuiteRunner, 1).unwrap();
            let b = pass_list_eval(&pl, &backward, &MockSuiteRunner, 1).unwrap();
            assert_eq!(a.accepted(), b.accepted());
        }
    }

    #[test]
    fn insane_suite_is_a_configuration_error() {
        let dir = tempfile::tempdir().unwrap();
        let programs = suite(dir.path(), &[("ok", "define @f: a\n"), ("broken", "define @f: z\n")]);
        let err = CheckedSuite::check(programs, &MockSuiteRunner).unwrap_err();
        assert!(matches!(err, ValidateError::InsaneSuite { ref program, .. } if program == "broken"));
        assert!(matches!(CheckedSuite::check(vec![], &MockSuiteRunner), Err(ValidateError::EmptySuite)));
    }

    #[test]
    fn verdicts_are_cached() {
        let dir = tempfile::tempdir().unwrap();
        let programs = suite(dir.path(), &[("p", "define @f: a\n")]);
        let checked = CheckedSuite::check(programs, &MockSuiteRunner).unwrap();
        let v = Validator::new(&MockSuiteRunner, checked);
        let pl = list(&[mock::DCE]);
        assert!(v.evaluate(&pl).unwrap().accepted());
        assert!(v.evaluate(&pl).unwrap().accepted());
        assert_eq!(v.evaluations(), 1);
    }

    #[test]
    fn divergence_offsets() {
        assert_eq!(first_divergence(b"1", b"2"), Some(0));
        assert_eq!(first_divergence(b"abc", b"abc"), None);
        assert_eq!(first_divergence(b"ab", b"abc"), Some(2));
    }

    #[test]
    fn smoke_manifest_resolves_paths() {
        let m = SuiteManifest::smoke();
        assert_eq!(m.programs.len(), 5);
        assert!(m.programs.iter().all(|p| p.solution.exists() && p.test.exists()));
    }

    #[cfg(unix)]
    #[test]
    fn differential_test_on_shell_scripts() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let script = |name: &str, body: &str| {
            let p = dir.path().join(name);
            std::fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
            std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
            p
        };
        let one = script("one", "echo 1");
        let two = script("two", "echo 2");
        let fail = script("fail", "echo 1; exit 4");
        let spec = RunSpec::default();
        assert_eq!(differential_test(&one, &one, &spec).unwrap(), DiffResult::Match);
        assert!(matches!(
            differential_test(&one, &two, &spec).unwrap(),
            DiffResult::Mismatch { offset: Some(0), ref stream, .. } if stream == "stdout"
        ));
        assert!(matches!(
            differential_test(&one, &fail, &spec).unwrap(),
            DiffResult::Mismatch { ref stream, .. } if stream == "exit"
        ));
        let cat = script("cat", "cat");
        let spec = RunSpec {
            stdin: Some("hello".into()),
            ..RunSpec::default()
        };
        assert_eq!(differential_test(&cat, &cat, &spec).unwrap(), DiffResult::Match);
    }
}
