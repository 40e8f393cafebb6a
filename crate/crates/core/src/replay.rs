//! Audit-log replay: recompute every deterministic stage from the logged
//! inputs, diff against the logged outputs, and rebuild routing state.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::conflict::conflicts_with_adjustment;
use crate::embedding::{EmbeddingBackend, HashingEmbedder};
use crate::fusion::{assemble, compute_weights, weigh};
use crate::memory::ContextBundle;
use crate::model::{
    format_decision, AuditRecord, Case, EventKind, Finding, RoutingMode, RoutingOutcome,
};
use crate::pipeline::{FeedbackEvent, FusionEvent, ReasoningEvent, RoutingEvent};
use crate::routing::{
    coherence_from_embeddings, composite_uncertainty, decide, PendingEscalation, ThresholdState,
};

/// Tolerance for recomputed floating-point values.
pub const REPLAY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub seq: u64,
    pub case_id: String,
    pub field: String,
    pub logged: String,
    pub recomputed: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub records: usize,
    pub cases: usize,
    pub divergences: Vec<Divergence>,
    /// Replayed threshold; `None` when nothing was routed.
    pub threshold: Option<ThresholdState>,
    pub outcomes: BTreeMap<String, RoutingOutcome>,
    pub pending: BTreeMap<String, PendingEscalation>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.divergences.is_empty()
    }
}

#[derive(Default)]
struct CaseState {
    findings: Vec<Finding>,
    fusion: Option<FusionEvent>,
    reasoning: Option<ReasoningEvent>,
}

struct Replayer {
    divergences: Vec<Divergence>,
    threshold: Option<ThresholdState>,
    theta_init: Option<f64>,
}

impl Replayer {
    fn flag(&mut self, rec: &AuditRecord, field: impl Into<String>, logged: String, recomputed: String) {
        self.divergences.push(Divergence {
            seq: rec.seq,
            case_id: rec.case_id.clone(),
            field: field.into(),
            logged,
            recomputed,
        });
    }

    fn check_f64(&mut self, rec: &AuditRecord, field: String, logged: f64, recomputed: f64) {
        if (logged - recomputed).abs() > REPLAY_TOLERANCE || logged.is_nan() != recomputed.is_nan() {
            self.flag(rec, field, logged.to_string(), recomputed.to_string());
        }
    }

    fn check_opt(&mut self, rec: &AuditRecord, field: &str, logged: Option<f64>, recomputed: Option<f64>) {
        match (logged, recomputed) {
            (Some(a), Some(b)) => self.check_f64(rec, field.to_string(), a, b),
            (None, None) => {}
            _ => self.flag(rec, field, format!("{logged:?}"), format!("{recomputed:?}")),
        }
    }

    fn fusion(&mut self, rec: &AuditRecord, st: &CaseState, ev: &FusionEvent) {
        let by_id: BTreeMap<&str, &Finding> = st
            .findings
            .iter()
            .map(|f| (f.specialist_id.as_str(), f))
            .collect();
        let logged_ids: Vec<&str> = ev.findings.iter().map(|e| e.specialist_id.as_str()).collect();
        let finding_ids: Vec<&str> = st.findings.iter().map(|f| f.specialist_id.as_str()).collect();
        if logged_ids != finding_ids {
            self.flag(rec, "findings", format!("{logged_ids:?}"), format!("{finding_ids:?}"));
            return;
        }
        for e in &ev.findings {
            let c = by_id[e.specialist_id.as_str()].confidence;
            self.check_f64(rec, format!("confidence[{}]", e.specialist_id), e.confidence, c);
        }

        let k = ev.findings.len();
        let conflicts: Vec<f64> = if k >= 2 {
            if let Some(hashing) = hashing_backend(&ev.embedding_backend) {
                for (f, logged) in st.findings.iter().zip(&ev.embeddings) {
                    match hashing.embed_sync(&f.diagnosis_text) {
                        Ok(e) if e.dim() == logged.dim() => {
                            let off = e
                                .values()
                                .iter()
                                .zip(logged.values())
                                .map(|(a, b)| (a - b).abs())
                                .fold(0.0, f64::max);
                            if off > REPLAY_TOLERANCE {
                                self.flag(
                                    rec,
                                    format!("embedding[{}]", f.specialist_id),
                                    "logged vector".into(),
                                    format!("differs by {off}"),
                                );
                            }
                        }
                        other => self.flag(
                            rec,
                            format!("embedding[{}]", f.specialist_id),
                            format!("dim {}", logged.dim()),
                            format!("{:?}", other.map(|e| e.dim())),
                        ),
                    }
                }
            }
            match conflicts_with_adjustment(&ev.embeddings, ev.shared_direction.as_ref()) {
                Ok(d) => d,
                Err(e) => {
                    self.flag(rec, "conflict", "logged".into(), e.to_string());
                    return;
                }
            }
        } else {
            vec![0.0; k]
        };
        if ev.conflict_defined != (k >= 2) {
            self.flag(rec, "conflict_defined", ev.conflict_defined.to_string(), (k >= 2).to_string());
        }
        for (e, d) in ev.findings.iter().zip(&conflicts) {
            self.check_f64(rec, format!("conflict[{}]", e.specialist_id), e.conflict, *d);
        }

        let confidences: Vec<f64> = st.findings.iter().map(|f| f.confidence).collect();
        let weights = match compute_weights(&confidences, &conflicts) {
            Ok(w) => w.weights,
            Err(e) => {
                self.flag(rec, "weight", "logged".into(), e.to_string());
                return;
            }
        };
        for (e, w) in ev.findings.iter().zip(&weights) {
            self.check_f64(rec, format!("weight[{}]", e.specialist_id), e.weight, *w);
        }

        let context = ContextBundle {
            case_id: rec.case_id.clone(),
            clinical_info: parse_context_block(&ev.assembled_text),
            history: Vec::new(),
            modality_registry: BTreeSet::new(),
            tasks: Vec::new(),
        };
        let weighted = weigh(&st.findings, &conflicts, &weights);
        match assemble(&context, &weighted, ev.annotation_mode) {
            Ok(text) if text == ev.assembled_text => {}
            Ok(text) => self.flag(rec, "assembled_text", ev.assembled_text.clone(), text),
            Err(e) => self.flag(rec, "assembled_text", ev.assembled_text.clone(), e.to_string()),
        }
    }

    fn reasoning(&mut self, rec: &AuditRecord, st: &CaseState, ev: &ReasoningEvent) {
        let backend = st
            .fusion
            .as_ref()
            .and_then(|f| hashing_backend(&f.embedding_backend));
        if let Some(hashing) = backend {
            let steps: Result<Vec<_>, _> = ev.chain.steps.iter().map(|s| hashing.embed_sync(s)).collect();
            match steps.map(|v| coherence_from_embeddings(&v)) {
                Ok(Ok(raw)) => self.check_opt(rec, "coherence_raw", ev.coherence_raw, raw),
                Ok(Err(e)) | Err(e) => self.flag(rec, "coherence_raw", "logged".into(), e.to_string()),
            }
        }
        if let (Some(raw), Some(v)) = (ev.coherence_raw, ev.coherence) {
            if v != raw && v != raw.clamp(0.0, 1.0) {
                self.flag(rec, "coherence", v.to_string(), raw.clamp(0.0, 1.0).to_string());
            }
        }
        let decision = format_decision(&ev.chain.per_task_scores);
        if decision != ev.chain.decision_text {
            self.flag(rec, "decision_text", ev.chain.decision_text.clone(), decision);
        }
    }

    fn routing(&mut self, rec: &AuditRecord, st: &CaseState, ev: &RoutingEvent) -> RoutingMode {
        let theta = self
            .threshold
            .get_or_insert_with(|| {
                ThresholdState::with_step(self.theta_init.unwrap_or(ev.theta_before), ev.update_step)
            })
            .theta();
        self.check_f64(rec, "theta_before".into(), ev.theta_before, theta);

        let (Some(fusion), Some(reasoning)) = (&st.fusion, &st.reasoning) else {
            self.flag(rec, "routing", "routed".into(), "missing fusion or reasoning record".into());
            return ev.mode;
        };
        let confidences: Vec<f64> = fusion.findings.iter().map(|f| f.confidence).collect();
        let conflicts: Vec<f64> = fusion.findings.iter().map(|f| f.conflict).collect();
        let composite = composite_uncertainty(
            &confidences,
            fusion.conflict_defined.then_some(conflicts.as_slice()),
            reasoning.coherence,
            &ev.uncertainty_config,
        );
        let mode = match composite {
            Ok(c) => {
                let b = c.breakdown;
                self.check_opt(rec, "u_conf", ev.uncertainty.u_conf, b.u_conf);
                self.check_opt(rec, "u_conflict", ev.uncertainty.u_conflict, b.u_conflict);
                self.check_opt(rec, "u_coherence", ev.uncertainty.u_coherence, b.u_coherence);
                self.check_f64(rec, "u_total".into(), ev.uncertainty.total, b.total);
                decide(b.total, theta)
            }
            Err(e) => {
                self.flag(rec, "uncertainty", ev.uncertainty.total.to_string(), e.to_string());
                ev.mode
            }
        };
        if mode != ev.mode {
            self.flag(rec, "mode", format!("{:?}", ev.mode), format!("{mode:?}"));
        }
        if reasoning.chain.decision_text != ev.preliminary_decision {
            self.flag(
                rec,
                "preliminary_decision",
                ev.preliminary_decision.clone(),
                reasoning.chain.decision_text.clone(),
            );
        }
        mode
    }
}

fn hashing_backend(id: &str) -> Option<HashingEmbedder> {
    let dim: usize = id.strip_prefix("hashing-v1-d")?.parse().ok()?;
    let e = HashingEmbedder::new(dim);
    (e.backend_id() == id).then_some(e)
}

/// `key: value` lines of the `[CONTEXT]` block.
fn parse_context_block(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .skip_while(|l| *l != "[CONTEXT]")
        .skip(1)
        .take_while(|l| *l != "[/CONTEXT]")
        .filter_map(|l| l.split_once(": "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn decode<T: serde::de::DeserializeOwned>(
    rep: &mut Replayer,
    rec: &AuditRecord,
) -> Option<T> {
    match serde_json::from_value(rec.payload.clone()) {
        Ok(v) => Some(v),
        Err(e) => {
            rep.flag(rec, format!("{:?} payload", rec.kind), "unreadable".into(), e.to_string());
            None
        }
    }
}

/// Replays `records` (sequence order). The threshold walk starts from
/// `theta_init`, or from the first routing record's `theta_before`.
pub fn replay(records: &[AuditRecord], theta_init: Option<f64>) -> ReplayReport {
    let mut rep = Replayer {
        divergences: Vec::new(),
        threshold: None,
        theta_init,
    };
    let mut cases: BTreeMap<String, CaseState> = BTreeMap::new();
    let mut outcomes = BTreeMap::new();
    let mut pending: BTreeMap<String, PendingEscalation> = BTreeMap::new();
    let mut last_seq = 0;

    for rec in records {
        if rec.seq <= last_seq {
            rep.flag(rec, "seq", rec.seq.to_string(), format!("> {last_seq}"));
        }
        last_seq = last_seq.max(rec.seq);
        let st = cases.entry(rec.case_id.clone()).or_default();
        match rec.kind {
            EventKind::Finding => {
                if let Some(f) = decode::<Finding>(&mut rep, rec) {
                    st.findings.push(f);
                }
            }
            EventKind::Fusion => {
                if let Some(ev) = decode::<FusionEvent>(&mut rep, rec) {
                    rep.fusion(rec, st, &ev);
                    st.fusion = Some(ev);
                }
            }
            EventKind::Reasoning => {
                if let Some(ev) = decode::<ReasoningEvent>(&mut rep, rec) {
                    rep.reasoning(rec, st, &ev);
                    st.reasoning = Some(ev);
                }
            }
            EventKind::Routing => {
                let Some(ev) = decode::<RoutingEvent>(&mut rep, rec) else {
                    continue;
                };
                let mode = rep.routing(rec, st, &ev);
                let Some(reasoning) = &st.reasoning else {
                    continue;
                };
                match mode {
                    RoutingMode::Autonomous => {
                        outcomes.insert(
                            rec.case_id.clone(),
                            RoutingOutcome {
                                case_id: rec.case_id.clone(),
                                mode,
                                preliminary: reasoning.chain.clone(),
                                final_decision: reasoning.chain.decision_text.clone(),
                                uncertainty: ev.uncertainty.clone(),
                                theta_before: ev.theta_before,
                                theta_after: ev.theta_before,
                                clinician_modified: None,
                            },
                        );
                    }
                    RoutingMode::Escalated => {
                        pending.insert(
                            rec.case_id.clone(),
                            PendingEscalation {
                                case_id: rec.case_id.clone(),
                                preliminary: reasoning.chain.clone(),
                                uncertainty: ev.uncertainty.clone(),
                                theta_before: ev.theta_before,
                            },
                        );
                    }
                }
            }
            EventKind::Feedback => {
                let Some(ev) = decode::<FeedbackEvent>(&mut rep, rec) else {
                    continue;
                };
                let Some(p) = pending.remove(&rec.case_id) else {
                    rep.flag(rec, "feedback", "feedback".into(), "no pending escalation".into());
                    continue;
                };
                let state = rep
                    .threshold
                    .get_or_insert_with(|| ThresholdState::new(ev.theta_before));
                let (before, after) = state.apply_feedback(&rec.case_id, ev.clinician_modified);
                rep.check_f64(rec, "feedback.theta_before".into(), ev.theta_before, before);
                rep.check_f64(rec, "theta_after".into(), ev.theta_after, after);
                outcomes.insert(
                    rec.case_id.clone(),
                    RoutingOutcome {
                        case_id: rec.case_id.clone(),
                        mode: RoutingMode::Escalated,
                        preliminary: p.preliminary,
                        final_decision: ev.final_decision,
                        uncertainty: p.uncertainty,
                        theta_before: p.theta_before,
                        theta_after: after,
                        clinician_modified: Some(ev.clinician_modified),
                    },
                );
            }
            EventKind::Dispatch | EventKind::Warning => {}
        }
    }

    ReplayReport {
        records: records.len(),
        cases: cases.len(),
        divergences: rep.divergences,
        threshold: rep.threshold,
        outcomes,
        pending,
    }
}

/// Everything logged about one case, decoded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseTrace {
    pub findings: Vec<Finding>,
    pub dispatch_failures: Vec<serde_json::Value>,
    pub fusion: Option<FusionEvent>,
    pub reasoning: Option<ReasoningEvent>,
    pub routing: Option<RoutingEvent>,
    pub feedback: Option<FeedbackEvent>,
    pub warnings: Vec<serde_json::Value>,
}

pub fn case_trace(history: &[AuditRecord]) -> CaseTrace {
    let mut t = CaseTrace::default();
    for r in history {
        let p = r.payload.clone();
        match r.kind {
            EventKind::Dispatch if p.get("error").is_some() => t.dispatch_failures.push(p),
            EventKind::Dispatch => {}
            EventKind::Finding => t.findings.extend(serde_json::from_value(p).ok()),
            EventKind::Fusion => t.fusion = serde_json::from_value(p).ok(),
            EventKind::Reasoning => t.reasoning = serde_json::from_value(p).ok(),
            EventKind::Routing => t.routing = serde_json::from_value(p).ok(),
            EventKind::Feedback => t.feedback = serde_json::from_value(p).ok(),
            EventKind::Warning => t.warnings.push(p),
        }
    }
    t
}

/// Case ids in first-appearance order, for rebuilding a store.
pub fn case_order(records: &[AuditRecord]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    records
        .iter()
        .filter(|r| seen.insert(r.case_id.clone()))
        .map(|r| r.case_id.clone())
        .collect()
}

/// Whether every case referenced by the log is among `cases`.
pub fn missing_cases<'a>(records: &'a [AuditRecord], cases: &[Case]) -> Vec<&'a str> {
    let known: BTreeSet<&str> = cases.iter().map(|c| c.case_id.as_str()).collect();
    let mut out: Vec<&str> = records
        .iter()
        .map(|r| r.case_id.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{ActivationRule, ActivationTable, FixedReasoner, SpecialistRegistry, StubSpecialist};
    use crate::clock::LogicalClock;
    use crate::memory::ContextStore;
    use crate::model::TaskKind;
    use crate::pipeline::Pipeline;
    use crate::routing::{ScriptedClinician, SimulatedClinician};
    use std::sync::Arc;

    const CHAIN: &str = "1. Review ECG.\n2. Review echo.\n3. Decide.\nDECISION: risk_stratification=0.7";

    fn pipeline() -> Pipeline {
        let store = Arc::new(ContextStore::in_memory(Arc::new(LogicalClock::new())));
        let reg = SpecialistRegistry::new()
            .with(Arc::new(StubSpecialist::new("ecg", "ECG", "st elevation anterior leads", 0.55)))
            .with(Arc::new(StubSpecialist::new("echo", "ECHO", "apical akinesis low ejection", 0.5)))
            .with(Arc::new(StubSpecialist::new("lab", "LAB", "troponin elevated st", 0.8)));
        let table = ActivationTable {
            rules: vec![ActivationRule {
                task: TaskKind::RiskStratification,
                required_modalities: Default::default(),
                specialist_ids: ["ecg", "echo", "lab"].iter().map(|s| s.to_string()).collect(),
            }],
            defaults: Default::default(),
        };
        Pipeline::new(
            store,
            reg,
            table,
            Arc::new(FixedReasoner::new(CHAIN)),
            Arc::new(HashingEmbedder::default()),
        )
    }

    async fn run(p: &Pipeline, n: usize, theta: f64) -> ThresholdState {
        let mut st = ThresholdState::new(theta);
        let clinician = ScriptedClinician::new(vec![false, false, true]);
        for i in 0..n {
            let mut case = Case::new(format!("c{i}"))
                .with_info("age", (50 + i).to_string())
                .with_payload("ECG", "x")
                .with_payload("ECHO", "y")
                .with_tasks(vec![TaskKind::RiskStratification]);
            if i % 2 == 0 {
                case = case.with_payload("LAB", "z");
            }
            let eval = p.evaluate(&case).await.unwrap();
            p.route_case(&eval, &mut st, &clinician).unwrap();
        }
        st
    }

    #[tokio::test]
    async fn clean_log_replays_without_divergence() {
        let p = pipeline();
        let st = run(&p, 8, 0.2).await;
        let report = replay(&p.store.all_records(), None);
        assert!(report.is_clean(), "{:?}", report.divergences);
        assert_eq!(report.cases, 8);
        assert_eq!(report.outcomes.len(), 8);
        assert_eq!(report.threshold.unwrap(), st);
    }

    #[tokio::test]
    async fn edited_weight_is_flagged_at_its_case() {
        let p = pipeline();
        run(&p, 4, 0.2).await;
        let mut records = p.store.all_records();
        let idx = records
            .iter()
            .position(|r| r.kind == EventKind::Fusion && r.case_id == "c2")
            .unwrap();
        records[idx].payload["findings"][0]["weight"] = serde_json::json!(0.123);
        let report = replay(&records, None);
        assert!(!report.is_clean());
        assert!(report
            .divergences
            .iter()
            .all(|d| d.case_id == "c2"));
        assert!(report.divergences.iter().any(|d| d.field.starts_with("weight[")));
    }

    #[tokio::test]
    async fn edited_feedback_breaks_the_threshold_walk() {
        let p = pipeline();
        run(&p, 6, 0.0).await;
        let mut records = p.store.all_records();
        let idx = records.iter().position(|r| r.kind == EventKind::Feedback).unwrap();
        let flipped = !records[idx].payload["clinician_modified"].as_bool().unwrap();
        records[idx].payload["clinician_modified"] = serde_json::json!(flipped);
        let report = replay(&records, None);
        assert!(report.divergences.iter().any(|d| d.field == "theta_after"));
    }

    #[tokio::test]
    async fn case_trace_decodes_every_stage() {
        let p = pipeline();
        let mut st = ThresholdState::new(0.0);
        let case = Case::new("t")
            .with_payload("ECG", "x")
            .with_tasks(vec![TaskKind::RiskStratification])
            .with_ground_truth([(TaskKind::RiskStratification, true)].into_iter().collect());
        let eval = p.evaluate(&case).await.unwrap();
        p.route_case(&eval, &mut st, &SimulatedClinician).unwrap();
        let t = case_trace(&p.store.history("t").unwrap());
        assert_eq!(t.findings.len(), 1);
        assert!(t.fusion.is_some() && t.reasoning.is_some());
        assert_eq!(t.routing.unwrap().mode, RoutingMode::Escalated);
        assert!(!t.feedback.unwrap().clinician_modified);
    }

    #[test]
    fn context_block_parsing() {
        let text = "[CONTEXT]\nage: 67\nsymptoms: chest pain: acute\n[/CONTEXT]\n[EVIDENCE specialist=a modality=b]\nx\n[/EVIDENCE]\n";
        let m = parse_context_block(text);
        assert_eq!(m["age"], "67");
        assert_eq!(m["symptoms"], "chest pain: acute");
    }
}
