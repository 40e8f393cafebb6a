//! Case processing, the escalation queue and the single-writer threshold.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use medroute_core::clock::SystemClock;
use medroute_core::config::{ConfigError, EngineConfig, TaskMode};
use medroute_core::memory::{AuditSink, ContextStore, FileAuditLog, InMemorySink, MemoryError};
use medroute_core::metrics::{evaluate_outcomes, SplitEvaluation, TaskMetrics};
use medroute_core::model::{
    validate_case, AuditRecord, Case, EventKind, ReasoningChain, RoutingMode, RoutingOutcome,
    TaskKind, UncertaintyBreakdown,
};
use medroute_core::pipeline::{FeedbackEvent, Pipeline, PipelineError};
use medroute_core::replay::{case_trace, missing_cases, replay, CaseTrace};
use medroute_core::routing::{
    PendingEscalation, RouteResult, ThresholdState, UnavailableClinician, Verdict,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("malformed request body: {0}")]
    BadRequest(String),
    #[error("invalid case: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    NotFound(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path} line {line}: {message}")]
    CasesFile {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Processing,
    Autonomous,
    PendingReview,
    Resolved,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketStatus {
    Pending,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub specialist_id: String,
    pub modality_tag: String,
    pub confidence: f64,
    pub conflict: f64,
    pub weight: f64,
    pub diagnosis_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub final_decision: String,
    pub clinician_modified: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer_id: Option<String>,
    pub timestamp: DateTime<Utc>,
    /// Threshold when the verdict was applied.
    pub theta_before: f64,
    pub theta_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationTicket {
    pub ticket_id: String,
    pub case_id: String,
    /// Submission index of the case; breaks uncertainty ties in the queue.
    pub submitted: u64,
    pub preliminary: ReasoningChain,
    pub uncertainty: UncertaintyBreakdown,
    /// Threshold the case was routed against.
    pub theta_before: f64,
    /// Heaviest finding first.
    pub evidence: Vec<EvidenceItem>,
    #[serde(default)]
    pub clinical_info: BTreeMap<String, String>,
    pub status: TicketStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<Resolution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Accept,
    Modify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRequest {
    pub verdict: VerdictKind,
    #[serde(default)]
    pub final_decision: Option<String>,
    #[serde(default)]
    pub reviewer_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewResponse {
    pub ticket: EscalationTicket,
    pub outcome: RoutingOutcome,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub case_id: String,
    pub status: CaseStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseView {
    pub case_id: String,
    pub status: CaseStatus,
    pub submitted: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub case: Case,
    pub trace: CaseTrace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<RoutingOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ticket: Option<EscalationTicket>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdView {
    pub theta: f64,
    pub history_length: usize,
    pub update_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub evaluation: SplitEvaluation,
    pub metrics: TaskMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    pub n_cases: usize,
    pub processing: usize,
    pub autonomous: usize,
    pub pending_review: usize,
    pub resolved: usize,
    pub failed: usize,
    /// Escalated over routed; absent before the first routed case.
    pub escalation_rate: Option<f64>,
    pub theta: f64,
    /// Completed cases that carry ground truth.
    pub tasks: BTreeMap<TaskKind, TaskSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub cases: usize,
    pub replay_divergences: usize,
}

#[derive(Debug, Clone)]
struct CaseEntry {
    submitted: u64,
    status: CaseStatus,
    error: Option<String>,
}

struct Routing {
    threshold: ThresholdState,
    tickets: BTreeMap<String, EscalationTicket>,
    pending: BTreeMap<String, PendingEscalation>,
    outcomes: BTreeMap<String, RoutingOutcome>,
    /// Case ids in the order they were routed.
    routed: Vec<String>,
}

pub fn ticket_id(case_id: &str) -> String {
    format!("tkt-{case_id}")
}

fn evidence(trace: &CaseTrace) -> Vec<EvidenceItem> {
    let Some(fusion) = &trace.fusion else {
        return Vec::new();
    };
    let mut items: Vec<EvidenceItem> = fusion
        .findings
        .iter()
        .map(|f| EvidenceItem {
            specialist_id: f.specialist_id.clone(),
            modality_tag: f.modality_tag.clone(),
            confidence: f.confidence,
            conflict: f.conflict,
            weight: f.weight,
            diagnosis_text: trace
                .findings
                .iter()
                .find(|x| x.specialist_id == f.specialist_id)
                .map(|x| x.diagnosis_text.clone())
                .unwrap_or_default(),
        })
        .collect();
    items.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then_with(|| a.specialist_id.cmp(&b.specialist_id))
    });
    items
}

fn resolution(history: &[AuditRecord]) -> Option<Resolution> {
    let rec = history.iter().rev().find(|r| r.kind == EventKind::Feedback)?;
    let ev: FeedbackEvent = serde_json::from_value(rec.payload.clone()).ok()?;
    Some(Resolution {
        final_decision: ev.final_decision,
        clinician_modified: ev.clinician_modified,
        reviewer_id: ev.reviewer_id,
        timestamp: rec.timestamp,
        theta_before: ev.theta_before,
        theta_after: ev.theta_after,
    })
}

fn read_cases(path: &Path) -> Result<Vec<Case>, ServiceError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let mut cases = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(c) => cases.push(c),
            // A torn final write never reached ingestion; drop it.
            Err(e) if i + 1 == lines.len() => {
                tracing::warn!(line = i + 1, error = %e, "ignoring truncated final case record");
            }
            Err(e) => {
                return Err(ServiceError::CasesFile {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(cases)
}

/// Shared service state. Cheap to clone.
#[derive(Clone)]
pub struct Engine {
    inner: Arc<Inner>,
}

struct Inner {
    config: EngineConfig,
    pipeline: Pipeline,
    store: Arc<ContextStore>,
    cases_file: Option<Mutex<File>>,
    cases: Mutex<BTreeMap<String, CaseEntry>>,
    routing: tokio::sync::Mutex<Routing>,
    replay_divergences: usize,
}

impl Engine {
    /// Opens the engine. With a data directory, `cases.jsonl` and
    /// `audit.jsonl` there are reloaded and replayed to restore the threshold,
    /// outcomes and open tickets.
    pub fn open(config: EngineConfig, data_dir: Option<&Path>) -> Result<Self, ServiceError> {
        config.validate()?;
        let (sink, cases_file, cases, records): (Box<dyn AuditSink>, _, _, _) = match data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let cases_path = dir.join("cases.jsonl");
                let audit_path = dir.join("audit.jsonl");
                let cases = read_cases(&cases_path)?;
                let records = if audit_path.exists() {
                    FileAuditLog::load(&audit_path)?
                } else {
                    Vec::new()
                };
                let file = OpenOptions::new().create(true).append(true).open(&cases_path)?;
                (
                    Box::new(FileAuditLog::open(&audit_path)?),
                    Some(Mutex::new(file)),
                    cases,
                    records,
                )
            }
            None => (Box::new(InMemorySink), None, Vec::new(), Vec::new()),
        };

        let store = Arc::new(ContextStore::with_sink(sink, Arc::new(SystemClock)));
        let pipeline = config.build_pipeline(store.clone())?;

        let unknown = missing_cases(&records, &cases);
        if let Some(id) = unknown.first() {
            return Err(ServiceError::Conflict(format!(
                "audit log references case {id:?} missing from cases.jsonl"
            )));
        }
        let mut entries = BTreeMap::new();
        for (i, c) in cases.iter().enumerate() {
            store.ingest(c)?;
            entries.insert(
                c.case_id.clone(),
                CaseEntry {
                    submitted: i as u64,
                    status: CaseStatus::Processing,
                    error: None,
                },
            );
        }
        for r in &records {
            store.restore(&r.case_id, r.clone())?;
        }

        let report = replay(&records, Some(config.theta_init));
        if !report.is_clean() {
            tracing::warn!(
                divergences = report.divergences.len(),
                "audit replay diverged from the logged values"
            );
        }
        let mut routing = Routing {
            threshold: report
                .threshold
                .clone()
                .unwrap_or_else(|| ThresholdState::new(config.theta_init)),
            tickets: BTreeMap::new(),
            pending: report.pending.clone(),
            outcomes: report.outcomes.clone(),
            routed: records
                .iter()
                .filter(|r| r.kind == EventKind::Routing)
                .map(|r| r.case_id.clone())
                .collect(),
        };
        for (id, entry) in entries.iter_mut() {
            let history = store.history(id)?;
            let trace = case_trace(&history);
            let info = store.case(id)?.clinical_info;
            if let Some(o) = routing.outcomes.get(id) {
                if o.mode == RoutingMode::Autonomous {
                    entry.status = CaseStatus::Autonomous;
                    continue;
                }
                entry.status = CaseStatus::Resolved;
                let mut t = new_ticket(id, entry.submitted, &o.preliminary, &o.uncertainty, o.theta_before, &trace, info);
                t.status = TicketStatus::Resolved;
                t.resolution = resolution(&history);
                routing.tickets.insert(t.ticket_id.clone(), t);
            } else if let Some(p) = routing.pending.get(id) {
                entry.status = CaseStatus::PendingReview;
                let t = new_ticket(id, entry.submitted, &p.preliminary, &p.uncertainty, p.theta_before, &trace, info);
                routing.tickets.insert(t.ticket_id.clone(), t);
            } else {
                entry.status = CaseStatus::Failed;
                entry.error = Some("processing was interrupted by a restart; resubmit under a new case_id".into());
            }
        }
        // Pending escalations are keyed by ticket from here on.
        routing.pending = routing
            .pending
            .into_values()
            .map(|p| (ticket_id(&p.case_id), p))
            .collect();

        Ok(Self {
            inner: Arc::new(Inner {
                config,
                pipeline,
                store,
                cases_file,
                cases: Mutex::new(entries),
                routing: tokio::sync::Mutex::new(routing),
                replay_divergences: report.divergences.len(),
            }),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.inner.config
    }

    /// Validates, persists and ingests a case, then evaluates and routes it
    /// in the background.
    pub fn submit(&self, body: &[u8]) -> Result<SubmitResponse, ServiceError> {
        let case: Case =
            serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let mut report = validate_case(&case);
        if self.inner.config.tasks == TaskMode::Declared
            && case.declared_tasks.as_ref().is_none_or(|t| t.is_empty())
        {
            report.violations.push("declared_tasks must list at least one task".into());
        }
        if !report.is_valid() {
            return Err(ServiceError::Invalid(report.violations));
        }
        {
            let mut cases = self.inner.cases.lock().expect("case table poisoned");
            if cases.contains_key(&case.case_id) {
                return Err(ServiceError::Conflict(format!(
                    "case {:?} already submitted",
                    case.case_id
                )));
            }
            if let Some(file) = &self.inner.cases_file {
                let mut line = serde_json::to_string(&case).expect("case serializes");
                line.push('\n');
                let mut f = file.lock().expect("cases file poisoned");
                f.write_all(line.as_bytes())?;
                f.sync_data()?;
            }
            self.inner.store.ingest(&case)?;
            let submitted = cases.len() as u64;
            cases.insert(
                case.case_id.clone(),
                CaseEntry {
                    submitted,
                    status: CaseStatus::Processing,
                    error: None,
                },
            );
        }
        let engine = self.clone();
        let id = case.case_id.clone();
        tokio::spawn(async move { engine.process(&id).await });
        Ok(SubmitResponse {
            case_id: case.case_id,
            status: CaseStatus::Processing,
        })
    }

    fn set_status(&self, case_id: &str, status: CaseStatus, error: Option<String>) {
        if let Some(e) = self.inner.cases.lock().expect("case table poisoned").get_mut(case_id) {
            e.status = status;
            e.error = error;
        }
    }

    async fn process(&self, case_id: &str) {
        if let Err(e) = self.evaluate_and_route(case_id).await {
            tracing::warn!(case = case_id, error = %e, "case failed");
            self.set_status(case_id, CaseStatus::Failed, Some(e.to_string()));
        }
    }

    async fn evaluate_and_route(&self, case_id: &str) -> Result<(), ServiceError> {
        let inner = &self.inner;
        let eval = inner.pipeline.evaluate_ingested(case_id).await?;
        // The routing record is written under the lock, so log order is
        // threshold order.
        let mut routing = inner.routing.lock().await;
        let result = inner
            .pipeline
            .route_case(&eval, &mut routing.threshold, &UnavailableClinician)?;
        routing.routed.push(case_id.to_string());
        match result {
            RouteResult::Completed(o) => {
                let status = match o.mode {
                    RoutingMode::Autonomous => CaseStatus::Autonomous,
                    RoutingMode::Escalated => CaseStatus::Resolved,
                };
                routing.outcomes.insert(case_id.to_string(), o);
                self.set_status(case_id, status, None);
            }
            RouteResult::Parked(p) => {
                let submitted = self.submitted(case_id);
                let trace = case_trace(&inner.store.history(case_id)?);
                let info = inner.store.case(case_id)?.clinical_info;
                let t = new_ticket(case_id, submitted, &p.preliminary, &p.uncertainty, p.theta_before, &trace, info);
                routing.pending.insert(t.ticket_id.clone(), p);
                routing.tickets.insert(t.ticket_id.clone(), t);
                self.set_status(case_id, CaseStatus::PendingReview, None);
            }
        }
        Ok(())
    }

    fn submitted(&self, case_id: &str) -> u64 {
        self.inner
            .cases
            .lock()
            .expect("case table poisoned")
            .get(case_id)
            .map(|e| e.submitted)
            .unwrap_or(u64::MAX)
    }

    /// Pending tickets, highest uncertainty first, then oldest submission.
    pub async fn queue(&self) -> Vec<EscalationTicket> {
        let routing = self.inner.routing.lock().await;
        let mut out: Vec<EscalationTicket> = routing
            .tickets
            .values()
            .filter(|t| t.status == TicketStatus::Pending)
            .cloned()
            .collect();
        out.sort_by(|a, b| {
            b.uncertainty
                .total
                .total_cmp(&a.uncertainty.total)
                .then(a.submitted.cmp(&b.submitted))
        });
        out
    }

    /// Applies one clinician verdict. Exactly once per ticket.
    pub async fn review(&self, ticket: &str, body: &[u8]) -> Result<ReviewResponse, ServiceError> {
        let req: ReviewRequest =
            serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let modified_text = match (req.verdict, &req.final_decision) {
            (VerdictKind::Modify, Some(t)) if !t.trim().is_empty() => Some(t.clone()),
            (VerdictKind::Modify, _) => {
                return Err(ServiceError::BadRequest(
                    "modify requires a non-empty final_decision".into(),
                ))
            }
            (VerdictKind::Accept, _) => None,
        };
        let inner = &self.inner;
        let mut routing = inner.routing.lock().await;
        let status = routing
            .tickets
            .get(ticket)
            .map(|t| t.status)
            .ok_or_else(|| ServiceError::NotFound(format!("unknown ticket {ticket:?}")))?;
        if status == TicketStatus::Resolved {
            return Err(ServiceError::Conflict(format!("ticket {ticket:?} is already resolved")));
        }
        let pending = routing
            .pending
            .get(ticket)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown ticket {ticket:?}")))?;
        let verdict = Verdict {
            clinician_modified: modified_text.is_some(),
            final_decision: modified_text
                .unwrap_or_else(|| pending.preliminary.decision_text.clone()),
        };
        let outcome = inner.pipeline.resolve_pending(
            &pending,
            &verdict,
            &mut routing.threshold,
            req.reviewer_id.as_deref(),
        )?;
        let history = inner.store.history(&pending.case_id)?;
        routing.pending.remove(ticket);
        routing
            .outcomes
            .insert(pending.case_id.clone(), outcome.clone());
        let theta = routing.threshold.theta();
        let t = routing.tickets.get_mut(ticket).expect("ticket checked above");
        t.status = TicketStatus::Resolved;
        t.resolution = resolution(&history);
        let ticket = t.clone();
        self.set_status(&pending.case_id, CaseStatus::Resolved, None);
        Ok(ReviewResponse {
            ticket,
            outcome,
            theta,
        })
    }

    pub async fn case(&self, case_id: &str) -> Result<CaseView, ServiceError> {
        let entry = self
            .inner
            .cases
            .lock()
            .expect("case table poisoned")
            .get(case_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown case {case_id:?}")))?;
        let routing = self.inner.routing.lock().await;
        let store = &self.inner.store;
        Ok(CaseView {
            case_id: case_id.to_string(),
            status: entry.status,
            submitted: entry.submitted,
            error: entry.error,
            case: store.case(case_id)?,
            trace: case_trace(&store.history(case_id)?),
            outcome: routing.outcomes.get(case_id).cloned(),
            ticket: routing.tickets.get(&ticket_id(case_id)).cloned(),
        })
    }

    pub async fn threshold(&self) -> ThresholdView {
        let routing = self.inner.routing.lock().await;
        ThresholdView {
            theta: routing.threshold.theta(),
            history_length: routing.threshold.history().len(),
            update_step: routing.threshold.update_step(),
        }
    }

    pub async fn metrics(&self) -> MetricsView {
        let counts = {
            let cases = self.inner.cases.lock().expect("case table poisoned");
            let n = |s| cases.values().filter(|e| e.status == s).count();
            (
                cases.len(),
                n(CaseStatus::Processing),
                n(CaseStatus::Autonomous),
                n(CaseStatus::PendingReview),
                n(CaseStatus::Resolved),
                n(CaseStatus::Failed),
            )
        };
        let routing = self.inner.routing.lock().await;
        let truths: BTreeMap<String, BTreeMap<TaskKind, bool>> = routing
            .outcomes
            .keys()
            .filter_map(|id| {
                let truth = self.inner.store.case(id).ok()?.ground_truth?;
                Some((id.clone(), truth))
            })
            .collect();
        let tasks = evaluate_outcomes(
            routing
                .outcomes
                .values()
                .filter_map(|o| truths.get(&o.case_id).map(|t| (o, t))),
        )
        .into_iter()
        .map(|(t, (evaluation, metrics))| (t, TaskSummary { evaluation, metrics }))
        .collect();
        let routed = routing.routed.len();
        let escalated = counts.3 + counts.4;
        MetricsView {
            n_cases: counts.0,
            processing: counts.1,
            autonomous: counts.2,
            pending_review: counts.3,
            resolved: counts.4,
            failed: counts.5,
            escalation_rate: (routed > 0).then(|| escalated as f64 / routed as f64),
            theta: routing.threshold.theta(),
            tasks,
        }
    }

    /// One row per routed case, in routing order.
    pub async fn threshold_csv(&self) -> Result<String, csv::Error> {
        let routing = self.inner.routing.lock().await;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "case_index",
            "case_id",
            "u_total",
            "theta_before",
            "mode",
            "clinician_modified",
            "theta_after",
        ])?;
        for (i, id) in routing.routed.iter().enumerate() {
            let ticket = routing.tickets.get(&ticket_id(id));
            let (u, before, mode, modified, after) = match (routing.outcomes.get(id), ticket) {
                (Some(o), _) => (
                    o.uncertainty.total,
                    o.theta_before,
                    o.mode,
                    o.clinician_modified.map(|m| m.to_string()),
                    Some(o.theta_after),
                ),
                (None, Some(t)) => (t.uncertainty.total, t.theta_before, RoutingMode::Escalated, None, None),
                (None, None) => continue,
            };
            w.write_record([
                i.to_string(),
                id.clone(),
                u.to_string(),
                before.to_string(),
                match mode {
                    RoutingMode::Autonomous => "autonomous".into(),
                    RoutingMode::Escalated => "escalated".to_string(),
                },
                modified.unwrap_or_default(),
                after.map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            cases: self.inner.cases.lock().expect("case table poisoned").len(),
            replay_divergences: self.inner.replay_divergences,
        }
    }

    /// True once no case is still being evaluated.
    pub fn idle(&self) -> bool {
        self.inner
            .cases
            .lock()
            .expect("case table poisoned")
            .values()
            .all(|e| e.status != CaseStatus::Processing)
    }
}

fn new_ticket(
    case_id: &str,
    submitted: u64,
    preliminary: &ReasoningChain,
    uncertainty: &UncertaintyBreakdown,
    theta_before: f64,
    trace: &CaseTrace,
    clinical_info: BTreeMap<String, String>,
) -> EscalationTicket {
    EscalationTicket {
        ticket_id: ticket_id(case_id),
        case_id: case_id.to_string(),
        submitted,
        preliminary: preliminary.clone(),
        uncertainty: uncertainty.clone(),
        theta_before,
        evidence: evidence(trace),
        clinical_info,
        status: TicketStatus::Pending,
        resolution: None,
    }
}
