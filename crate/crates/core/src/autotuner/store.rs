//! Append-only tuning log plus a compacted snapshot of per-program bests.
//!
//! ```text
//! <store>/log.jsonl       one TuningRecord per line, in application order
//! <store>/snapshot.json   BestStore after the first `records_applied` lines
//! <store>/programs/       IR of every tuned program, named `<id>.ll`
//! ```
//!
//! Opening a store loads the snapshot and replays whatever log lines came
//! after it. A torn final line (a write cut short by a kill) is discarded.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::PassList;
use crate::toolchain::{BinarySize, CompileStatus, ModuleInput};

const LOG: &str = "log.jsonl";
const SNAPSHOT: &str = "snapshot.json";
const PROGRAMS: &str = "programs";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt log line {line}: {message}")]
    CorruptLog { line: u64, message: String },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("snapshot covers {snapshot} records but the log has only {log}")]
    SnapshotAhead { snapshot: u64, log: u64 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    Baseline,
    Trial,
    Broadcast,
    Minimized,
    Validated,
    Reverted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordStatus {
    Ok,
    CompilerError,
    Timeout,
    /// The list was already evaluated on this program and was not compiled again.
    Duplicate,
    Accepted,
    Rejected,
}

impl From<CompileStatus> for RecordStatus {
    fn from(s: CompileStatus) -> Self {
        match s {
            CompileStatus::Ok => RecordStatus::Ok,
            CompileStatus::CompilerError => RecordStatus::CompilerError,
            CompileStatus::Timeout => RecordStatus::Timeout,
        }
    }
}

/// One evaluation or state change, as written to the log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub program_id: String,
    pub kind: RecordKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial_index: Option<u64>,
    pub pass_list: PassList,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<BinarySize>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
    pub timestamp: String,
}

impl TuningRecord {
    pub fn new(program_id: impl Into<String>, kind: RecordKind, pass_list: PassList, status: RecordStatus) -> Self {
        TuningRecord {
            program_id: program_id.into(),
            kind,
            trial_index: None,
            pass_list,
            status,
            size: None,
            note: String::new(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        }
    }

    pub fn with_trial(mut self, index: u64) -> Self {
        self.trial_index = Some(index);
        self
    }

    pub fn with_size(mut self, size: Option<BinarySize>) -> Self {
        self.size = size;
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        let note: String = note.into();
        // Diagnostics can be enormous; the first line is enough to triage.
        let first = note.lines().next().unwrap_or_default();
        self.note = first.chars().take(300).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Best {
    pub pass_list: PassList,
    pub size: BinarySize,
}

impl Best {
    /// Smaller total, then shorter list, then smaller pipeline string.
    pub fn beats(&self, other: &Best) -> bool {
        let key = |b: &Best| (b.size.total(), b.pass_list.len());
        match key(self).cmp(&key(other)) {
            std::cmp::Ordering::Equal => self.pass_list.to_pipeline() < other.pass_list.to_pipeline(),
            o => o.is_lt(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramState {
    /// `-Oz` size; recorded before any trial.
    pub baseline: Option<BinarySize>,
    /// Set when the baseline could not be computed.
    pub excluded: Option<String>,
    pub best: Option<Best>,
    pub best_validated: bool,
    pub best_minimized: bool,
    pub trials_done: u64,
    pub ok_trials: u64,
    pub failed_trials: u64,
    pub duplicate_trials: u64,
    pub rejected: BTreeSet<String>,
}

impl ProgramState {
    fn consider(&mut self, candidate: Best) {
        if self.rejected.contains(&candidate.pass_list.to_pipeline()) {
            return;
        }
        if self.best.as_ref().is_none_or(|b| candidate.beats(b)) {
            self.set_best(candidate);
        }
    }

    fn set_best(&mut self, best: Best) {
        self.best = Some(best);
        self.best_validated = false;
        self.best_minimized = false;
    }
}

/// Per-program bests and global counters, a pure fold over the log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BestStore {
    pub programs: BTreeMap<String, ProgramState>,
    pub trials_total: u64,
    pub broadcast_evaluations: u64,
    pub records_applied: u64,
}

impl BestStore {
    pub fn apply(&mut self, r: &TuningRecord) {
        self.records_applied += 1;
        let p = self.programs.entry(r.program_id.clone()).or_default();
        let ok_best = match (r.status, r.size) {
            (RecordStatus::Ok, Some(size)) => Some(Best {
                pass_list: r.pass_list.clone(),
                size,
            }),
            _ => None,
        };
        match r.kind {
            RecordKind::Baseline => match ok_best {
                Some(b) => {
                    p.baseline = Some(b.size);
                    p.excluded = None;
                    p.consider(b);
                }
                None => p.excluded = Some(r.note.clone()),
            },
            RecordKind::Trial => {
                self.trials_total += 1;
                if let Some(i) = r.trial_index {
                    p.trials_done = p.trials_done.max(i + 1);
                }
                match r.status {
                    RecordStatus::Duplicate => p.duplicate_trials += 1,
                    RecordStatus::Ok => p.ok_trials += 1,
                    _ => p.failed_trials += 1,
                }
                if let Some(b) = ok_best {
                    p.consider(b);
                }
            }
            RecordKind::Broadcast => {
                self.broadcast_evaluations += 1;
                if let Some(b) = ok_best {
                    let improves = p.best.as_ref().is_none_or(|cur| b.size.total() < cur.size.total());
                    if improves && !p.rejected.contains(&b.pass_list.to_pipeline()) {
                        p.set_best(b);
                    }
                }
            }
            RecordKind::Minimized => {
                if let Some(b) = ok_best {
                    if p.best.as_ref().is_none_or(|cur| b.size.total() <= cur.size.total()) {
                        p.set_best(b);
                        p.best_minimized = true;
                    }
                }
            }
            RecordKind::Validated => {
                let is_best = p.best.as_ref().is_some_and(|b| b.pass_list == r.pass_list);
                match r.status {
                    RecordStatus::Accepted if is_best => p.best_validated = true,
                    RecordStatus::Rejected => {
                        p.rejected.insert(r.pass_list.to_pipeline());
                    }
                    _ => {}
                }
            }
            RecordKind::Reverted => {
                if let Some(b) = ok_best {
                    p.set_best(b);
                    p.best_validated = true;
                }
            }
        }
    }

    pub fn program(&self, id: &str) -> Option<&ProgramState> {
        self.programs.get(id)
    }

    /// Number of distinct best lists across programs.
    pub fn unique_best_lists(&self) -> usize {
        self.programs
            .values()
            .filter_map(|p| p.best.as_ref())
            .map(|b| b.pass_list.to_pipeline())
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("BestStore serializes");
        s.push('\n');
        s
    }
}

pub struct Store {
    dir: PathBuf,
    state: BestStore,
    log: BufWriter<File>,
    since_snapshot: u64,
    snapshot_every: u64,
}

impl Store {
    pub fn open(dir: impl AsRef<Path>) -> Result<Store, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join(PROGRAMS)).map_err(io_err(&dir))?;
        let snapshot_path = dir.join(SNAPSHOT);
        let mut state = match fs::read_to_string(&snapshot_path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| StoreError::CorruptSnapshot(e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BestStore::default(),
            Err(e) => return Err(io_err(&snapshot_path)(e)),
        };

        let log_path = dir.join(LOG);
        let text = match fs::read(&log_path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&log_path)(e)),
        };
        let (records, good_len) = parse_log(&text)?;
        if (good_len as usize) < text.len() {
            log::warn!(
                "discarding {} bytes of torn record at the end of {}",
                text.len() - good_len as usize,
                log_path.display()
            );
            let f = OpenOptions::new().write(true).open(&log_path).map_err(io_err(&log_path))?;
            f.set_len(good_len).map_err(io_err(&log_path))?;
        }
        let total = records.len() as u64;
        if state.records_applied > total {
            return Err(StoreError::SnapshotAhead {
                snapshot: state.records_applied,
                log: total,
            });
        }
        for r in &records[state.records_applied as usize..] {
            state.apply(r);
        }

        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        Ok(Store {
            dir,
            state,
            log: BufWriter::new(file),
            since_snapshot: 0,
            snapshot_every: 1000,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn state(&self) -> &BestStore {
        &self.state
    }

    pub fn set_snapshot_every(&mut self, n: u64) {
        self.snapshot_every = n.max(1);
    }

    /// Appends and applies one record. The line is flushed before returning.
    pub fn append(&mut self, record: &TuningRecord) -> Result<(), StoreError> {
        let path = self.dir.join(LOG);
        let mut line = serde_json::to_string(record).expect("records serialize");
        line.push('\n');
        self.log.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.log.flush().map_err(io_err(&path))?;
        self.state.apply(record);
        self.since_snapshot += 1;
        if self.since_snapshot >= self.snapshot_every {
            self.snapshot()?;
        }
        Ok(())
    }

    /// Writes the snapshot atomically.
    pub fn snapshot(&mut self) -> Result<(), StoreError> {
        let path = self.dir.join(SNAPSHOT);
        let tmp = self.dir.join(format!("{SNAPSHOT}.tmp"));
        fs::write(&tmp, self.state.to_canonical_json()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        self.since_snapshot = 0;
        Ok(())
    }

    /// Every record in the log, in order.
    pub fn records(&self) -> Result<Vec<TuningRecord>, StoreError> {
        let path = self.dir.join(LOG);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        Ok(parse_log(&bytes)?.0)
    }

    /// Keeps a copy of the program IR so later stages need only the store.
    pub fn save_program(&self, module: &ModuleInput) -> Result<(), StoreError> {
        let path = self.program_path(&module.id);
        if let Ok(existing) = fs::read_to_string(&path) {
            if existing == module.ir_text {
                return Ok(());
            }
        }
        fs::write(&path, &module.ir_text).map_err(io_err(&path))
    }

    pub fn load_program(&self, id: &str) -> Result<ModuleInput, StoreError> {
        let path = self.program_path(id);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(ModuleInput::new(id, text))
    }

    /// Every saved program that appears in the store, ordered by id.
    pub fn load_programs(&self) -> Result<Vec<ModuleInput>, StoreError> {
        self.state.programs.keys().map(|id| self.load_program(id)).collect()
    }

    fn program_path(&self, id: &str) -> PathBuf {
        let name: String = id
            .chars()
            .map(|c| if c == '/' || c == '\\' { '_' } else { c })
            .collect();
        self.dir.join(PROGRAMS).join(format!("{name}.ll"))
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        let _ = self.log.flush();
    }
}

/// Parses complete records and returns them with the byte length they cover.
/// Only the final line may be malformed, and only if it lacks a newline or
/// fails to parse; anything earlier is corruption.
fn parse_log(bytes: &[u8]) -> Result<(Vec<TuningRecord>, u64), StoreError> {
    let mut records = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 0u64;
    while offset < bytes.len() {
        line_no += 1;
        let rest = &bytes[offset..];
        let (line, next, terminated) = match rest.iter().position(|&b| b == b'\n') {
            Some(i) => (&rest[..i], offset + i + 1, true),
            None => (rest, bytes.len(), false),
        };
        let last = next >= bytes.len();
        if line.iter().all(u8::is_ascii_whitespace) && terminated {
            offset = next;
            continue;
        }
        match serde_json::from_slice::<TuningRecord>(line) {
            Ok(r) if terminated => records.push(r),
            Ok(_) | Err(_) if last => return Ok((records, offset as u64)),
            Ok(_) => unreachable!("only the last line can be unterminated"),
            Err(e) => {
                return Err(StoreError::CorruptLog {
                    line: line_no,
                    message: e.to_string(),
                })
            }
        }
        offset = next;
    }
    Ok((records, offset as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Pass;

    fn rec(kind: RecordKind, pl: PassList, total: Option<u64>) -> TuningRecord {
        let status = if total.is_some() { RecordStatus::Ok } else { RecordStatus::CompilerError };
        TuningRecord::new("p", kind, pl, status).with_size(total.map(|t| BinarySize::new(t, 0)))
    }

    fn pl(names: &[&str]) -> PassList {
        names.iter().map(|n| Pass::new(*n, crate::PassLevel::Function)).collect()
    }

    #[test]
    fn tie_breaks_prefer_short_then_lexicographic() {
        let mut s = BestStore::default();
        s.apply(&rec(RecordKind::Baseline, PassList::oz(), Some(50)));
        s.apply(&rec(RecordKind::Trial, pl(&["b", "a"]), Some(40)).with_trial(0));
        s.apply(&rec(RecordKind::Trial, pl(&["c"]), Some(40)).with_trial(1));
        s.apply(&rec(RecordKind::Trial, pl(&["b"]), Some(40)).with_trial(2));
        s.apply(&rec(RecordKind::Trial, pl(&["a"]), Some(41)).with_trial(3));
        s.apply(&rec(RecordKind::Trial, pl(&["x"]), None).with_trial(4));
        let p = s.program("p").unwrap();
        assert_eq!(p.best.as_ref().unwrap().pass_list, pl(&["b"]));
        assert_eq!((p.trials_done, p.ok_trials, p.failed_trials), (5, 4, 1));
    }

    #[test]
    fn broadcast_needs_strict_improvement() {
        let mut s = BestStore::default();
        s.apply(&rec(RecordKind::Baseline, PassList::oz(), Some(50)));
        s.apply(&rec(RecordKind::Trial, pl(&["b"]), Some(40)).with_trial(0));
        s.apply(&rec(RecordKind::Broadcast, pl(&["a"]), Some(40)));
        assert_eq!(s.program("p").unwrap().best.as_ref().unwrap().pass_list, pl(&["b"]));
        s.apply(&rec(RecordKind::Broadcast, pl(&["a", "a"]), Some(39)));
        assert_eq!(s.program("p").unwrap().best.as_ref().unwrap().pass_list, pl(&["a", "a"]));
    }

    #[test]
    fn rejected_lists_never_return() {
        let mut s = BestStore::default();
        s.apply(&rec(RecordKind::Baseline, PassList::oz(), Some(50)));
        s.apply(&rec(RecordKind::Trial, pl(&["bad"]), Some(10)).with_trial(0));
        let mut v = rec(RecordKind::Validated, pl(&["bad"]), None);
        v.status = RecordStatus::Rejected;
        s.apply(&v);
        s.apply(&rec(RecordKind::Reverted, PassList::oz(), Some(50)));
        s.apply(&rec(RecordKind::Trial, pl(&["bad"]), Some(10)).with_trial(1));
        let p = s.program("p").unwrap();
        assert_eq!(p.best.as_ref().unwrap().pass_list, PassList::oz());
        assert!(p.best_validated);
    }

    #[test]
    fn torn_tail_is_dropped_and_snapshot_resumes() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut st = Store::open(dir.path()).unwrap();
            st.append(&rec(RecordKind::Baseline, PassList::oz(), Some(50))).unwrap();
            st.snapshot().unwrap();
            st.append(&rec(RecordKind::Trial, pl(&["a"]), Some(30)).with_trial(0)).unwrap();
        }
        let log = dir.path().join(LOG);
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"{\"program_id\":\"p\",\"ki").unwrap();
        drop(f);
        let st = Store::open(dir.path()).unwrap();
        assert_eq!(st.state().records_applied, 2);
        assert_eq!(st.state().program("p").unwrap().best.as_ref().unwrap().size.total(), 30);
        assert!(fs::read_to_string(&log).unwrap().ends_with("}\n"));
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(LOG), "not json\n{}\n").unwrap();
        assert!(matches!(Store::open(dir.path()), Err(StoreError::CorruptLog { line: 1, .. })));
    }
}
