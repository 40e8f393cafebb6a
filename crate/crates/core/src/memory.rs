//! Per-case context store and the append-only interaction history.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock};
use crate::model::{validate_case, AuditRecord, Case, EventKind, TaskKind, ValidationReport};

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("invalid case: {0}")]
    Invalid(ValidationReport),
    #[error("case {0:?} already ingested")]
    Duplicate(String),
    #[error("unknown case {0:?}")]
    UnknownCase(String),
    #[error("sequence {got} is not greater than {last}")]
    OutOfOrder { last: u64, got: u64 },
    #[error("audit log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("audit log line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

/// Snapshot of everything an agent may see about a case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub case_id: String,
    pub clinical_info: std::collections::BTreeMap<String, String>,
    pub history: Vec<AuditRecord>,
    pub modality_registry: BTreeSet<String>,
    pub tasks: Vec<TaskKind>,
}

impl ContextBundle {
    /// Builds the bundle from a case, its task list and a history prefix.
    pub fn from_parts(case: &Case, tasks: Vec<TaskKind>, history: Vec<AuditRecord>) -> Self {
        Self {
            case_id: case.case_id.clone(),
            clinical_info: case.clinical_info.clone(),
            history,
            modality_registry: case.modality_tags(),
            tasks,
        }
    }
}

/// Durable destination for audit records.
pub trait AuditSink: Send + Sync {
    fn persist(&self, record: &AuditRecord) -> Result<(), MemoryError>;
}

/// Keeps nothing beyond the in-memory history.
#[derive(Debug, Default)]
pub struct InMemorySink;

impl AuditSink for InMemorySink {
    fn persist(&self, _record: &AuditRecord) -> Result<(), MemoryError> {
        Ok(())
    }
}

/// One canonical-JSON record per line, flushed after each append.
#[derive(Debug)]
pub struct FileAuditLog {
    path: PathBuf,
    writer: Mutex<BufWriter<File>>,
}

impl FileAuditLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            writer: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Reads every record; a blank trailing line is allowed, anything else
    /// that fails to parse is reported with its 1-based line number.
    pub fn load(path: impl AsRef<Path>) -> Result<Vec<AuditRecord>, MemoryError> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: AuditRecord =
                serde_json::from_str(&line).map_err(|e| MemoryError::Corrupt {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            if let Some(prev) = out.last().map(|r: &AuditRecord| r.seq) {
                if rec.seq <= prev {
                    return Err(MemoryError::Corrupt {
                        line: idx + 1,
                        message: format!("sequence {} not greater than {prev}", rec.seq),
                    });
                }
            }
            out.push(rec);
        }
        Ok(out)
    }
}

impl AuditSink for FileAuditLog {
    fn persist(&self, record: &AuditRecord) -> Result<(), MemoryError> {
        let line = serde_json::to_string(record).expect("audit record serializes");
        let mut w = self.writer.lock().expect("audit writer poisoned");
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

struct Entry {
    case: Case,
    tasks: Vec<TaskKind>,
    history: Vec<AuditRecord>,
}

struct LogState {
    last_seq: u64,
    sink: Box<dyn AuditSink>,
}

/// Context store: clinical info, history, modality registry and tasks per case.
///
/// Writes to one case are serialized by that case's lock. Sequence numbers
/// are assigned under a single log lock so the persisted log is in sequence
/// order.
pub struct ContextStore {
    entries: RwLock<HashMap<String, Arc<Mutex<Entry>>>>,
    log: Mutex<LogState>,
    clock: Arc<dyn Clock>,
}

impl Default for ContextStore {
    fn default() -> Self {
        Self::in_memory(Arc::new(SystemClock))
    }
}

impl ContextStore {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self::with_sink(Box::new(InMemorySink), clock)
    }

    pub fn with_sink(sink: Box<dyn AuditSink>, clock: Arc<dyn Clock>) -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            log: Mutex::new(LogState { last_seq: 0, sink }),
            clock,
        }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Registers a case. History starts empty; tasks are the declared ones.
    pub fn ingest(&self, case: &Case) -> Result<ContextBundle, MemoryError> {
        let report = validate_case(case);
        if !report.is_valid() {
            return Err(MemoryError::Invalid(report));
        }
        let mut entries = self.entries.write().expect("store poisoned");
        if entries.contains_key(&case.case_id) {
            return Err(MemoryError::Duplicate(case.case_id.clone()));
        }
        let tasks = case.declared_tasks.clone().unwrap_or_default();
        let bundle = ContextBundle::from_parts(case, tasks.clone(), Vec::new());
        entries.insert(
            case.case_id.clone(),
            Arc::new(Mutex::new(Entry {
                case: case.clone(),
                tasks,
                history: Vec::new(),
            })),
        );
        Ok(bundle)
    }

    fn entry(&self, case_id: &str) -> Result<Arc<Mutex<Entry>>, MemoryError> {
        self.entries
            .read()
            .expect("store poisoned")
            .get(case_id)
            .cloned()
            .ok_or_else(|| MemoryError::UnknownCase(case_id.to_string()))
    }

    pub fn contains(&self, case_id: &str) -> bool {
        self.entries
            .read()
            .expect("store poisoned")
            .contains_key(case_id)
    }

    /// Builds and appends a record with the next sequence number.
    pub fn log(
        &self,
        case_id: &str,
        kind: EventKind,
        payload: serde_json::Value,
    ) -> Result<AuditRecord, MemoryError> {
        let entry = self.entry(case_id)?;
        let mut entry = entry.lock().expect("case entry poisoned");
        let record = {
            let mut log = self.log.lock().expect("log poisoned");
            let record = AuditRecord {
                seq: log.last_seq + 1,
                case_id: case_id.to_string(),
                kind,
                payload,
                timestamp: self.clock.now(),
            };
            log.sink.persist(&record)?;
            log.last_seq = record.seq;
            record
        };
        entry.history.push(record.clone());
        Ok(record)
    }

    /// Re-attaches an already persisted record after a restart; it is not
    /// written to the sink again. Its sequence number must exceed every
    /// sequence number seen so far.
    pub fn restore(&self, case_id: &str, record: AuditRecord) -> Result<(), MemoryError> {
        let entry = self.entry(case_id)?;
        let mut entry = entry.lock().expect("case entry poisoned");
        {
            let mut log = self.log.lock().expect("log poisoned");
            if record.seq <= log.last_seq {
                return Err(MemoryError::OutOfOrder {
                    last: log.last_seq,
                    got: record.seq,
                });
            }
            log.last_seq = record.seq;
        }
        entry.history.push(record);
        Ok(())
    }

    pub fn set_tasks(&self, case_id: &str, tasks: Vec<TaskKind>) -> Result<(), MemoryError> {
        let entry = self.entry(case_id)?;
        entry.lock().expect("case entry poisoned").tasks = tasks;
        Ok(())
    }

    pub fn context(&self, case_id: &str) -> Result<ContextBundle, MemoryError> {
        let entry = self.entry(case_id)?;
        let e = entry.lock().expect("case entry poisoned");
        Ok(ContextBundle::from_parts(
            &e.case,
            e.tasks.clone(),
            e.history.clone(),
        ))
    }

    pub fn case(&self, case_id: &str) -> Result<Case, MemoryError> {
        let entry = self.entry(case_id)?;
        let e = entry.lock().expect("case entry poisoned");
        Ok(e.case.clone())
    }

    pub fn history(&self, case_id: &str) -> Result<Vec<AuditRecord>, MemoryError> {
        let entry = self.entry(case_id)?;
        let e = entry.lock().expect("case entry poisoned");
        Ok(e.history.clone())
    }

    /// Every record across all cases, in sequence order.
    pub fn all_records(&self) -> Vec<AuditRecord> {
        let entries = self.entries.read().expect("store poisoned");
        let mut out: Vec<AuditRecord> = entries
            .values()
            .flat_map(|e| e.lock().expect("case entry poisoned").history.clone())
            .collect();
        out.sort_by_key(|r| r.seq);
        out
    }

    pub fn last_seq(&self) -> u64 {
        self.log.lock().expect("log poisoned").last_seq
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::LogicalClock;
    use serde_json::json;

    fn store() -> ContextStore {
        ContextStore::in_memory(Arc::new(LogicalClock::new()))
    }

    #[test]
    fn ingest_builds_registry_and_tasks() {
        let s = store();
        let case = Case::new("a").with_payload("ECHO", "x").with_payload("ECG", "y");
        let b = s.ingest(&case).unwrap();
        assert_eq!(
            b.modality_registry,
            ["ECG", "ECHO"].iter().map(|t| t.to_string()).collect()
        );
        assert!(b.tasks.is_empty());
        assert!(b.history.is_empty());

        let case = Case::new("b")
            .with_payload("ECG", "y")
            .with_tasks(vec![TaskKind::RiskStratification]);
        assert_eq!(s.ingest(&case).unwrap().tasks, vec![TaskKind::RiskStratification]);
    }

    #[test]
    fn ingest_rejects_invalid_and_duplicate() {
        let s = store();
        assert!(matches!(s.ingest(&Case::new("")), Err(MemoryError::Invalid(_))));
        let case = Case::new("a").with_payload("ECG", "y");
        s.ingest(&case).unwrap();
        assert!(matches!(s.ingest(&case), Err(MemoryError::Duplicate(_))));
    }

    #[test]
    fn sequence_numbers_strictly_increase() {
        let s = store();
        s.ingest(&Case::new("a").with_payload("ECG", "y")).unwrap();
        let r1 = s.log("a", EventKind::Dispatch, json!({})).unwrap();
        let r2 = s.log("a", EventKind::Finding, json!({})).unwrap();
        assert!(r2.seq > r1.seq);
        assert!(r2.timestamp > r1.timestamp);
        let h = s.context("a").unwrap().history;
        assert_eq!(h.len(), 2);
        assert!(h.windows(2).all(|w| w[0].seq < w[1].seq));
    }

    #[test]
    fn unknown_case_is_an_error() {
        let s = store();
        assert!(matches!(
            s.log("nope", EventKind::Dispatch, json!({})),
            Err(MemoryError::UnknownCase(_))
        ));
        assert!(s.context("nope").is_err());
    }

    #[test]
    fn restore_enforces_order() {
        let s = store();
        s.ingest(&Case::new("a").with_payload("ECG", "y")).unwrap();
        let r = s.log("a", EventKind::Dispatch, json!({})).unwrap();
        let mut stale = r.clone();
        stale.seq = r.seq;
        assert!(matches!(
            s.restore("a", stale),
            Err(MemoryError::OutOfOrder { .. })
        ));
        let mut next = r;
        next.seq = 10;
        s.restore("a", next).unwrap();
        assert_eq!(s.last_seq(), 10);
    }

    #[test]
    fn file_log_round_trips_and_flags_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        {
            let sink = FileAuditLog::open(&path).unwrap();
            let s = ContextStore::with_sink(Box::new(sink), Arc::new(LogicalClock::new()));
            s.ingest(&Case::new("a").with_payload("ECG", "y")).unwrap();
            s.log("a", EventKind::Dispatch, json!({"k": 1})).unwrap();
            s.log("a", EventKind::Finding, json!({"k": 2.5})).unwrap();
            let loaded = FileAuditLog::load(&path).unwrap();
            assert_eq!(loaded, s.all_records());
        }
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.truncate(text.len() - 10);
        std::fs::write(&path, text).unwrap();
        match FileAuditLog::load(&path) {
            Err(MemoryError::Corrupt { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected corrupt log, got {other:?}"),
        }
    }

    #[test]
    fn bundle_is_function_of_case_and_history_prefix() {
        let s = store();
        let case = Case::new("a").with_payload("ECG", "y").with_info("age", "70");
        s.ingest(&case).unwrap();
        s.log("a", EventKind::Dispatch, json!({})).unwrap();
        let snap = s.context("a").unwrap();
        let rebuilt = ContextBundle::from_parts(&case, vec![], s.history("a").unwrap());
        assert_eq!(snap, rebuilt);
    }
}
