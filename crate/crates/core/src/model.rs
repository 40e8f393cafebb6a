//! Domain types shared across the pipeline.
//!
//! Everything here is a plain value: cloning is the only way to "mutate".
//! JSON produced by serde for these types is the canonical wire format
//! (struct fields in declaration order, maps sorted by key).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::scalar::{fmt3, Scalar};

/// Kind of decision requested for a case. Serialized as a bare string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TaskKind {
    RiskStratification,
    Etiology,
    Severity,
    Custom(String),
}

impl TaskKind {
    pub fn as_str(&self) -> &str {
        match self {
            TaskKind::RiskStratification => "risk_stratification",
            TaskKind::Etiology => "etiology",
            TaskKind::Severity => "severity",
            TaskKind::Custom(name) => name,
        }
    }

    pub fn custom(name: impl Into<String>) -> Result<Self, ParseTaskError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(ParseTaskError(name));
        }
        Ok(TaskKind::Custom(name))
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid task name {0:?}")]
pub struct ParseTaskError(pub String);

impl FromStr for TaskKind {
    type Err = ParseTaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "risk_stratification" | "risk" => Ok(TaskKind::RiskStratification),
            "etiology" => Ok(TaskKind::Etiology),
            "severity" => Ok(TaskKind::Severity),
            _ => {
                let name = s.strip_prefix("custom:").unwrap_or(s);
                let valid = !name.is_empty()
                    && name
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
                if valid {
                    Ok(TaskKind::Custom(name.to_string()))
                } else {
                    Err(ParseTaskError(s.to_string()))
                }
            }
        }
    }
}

impl From<TaskKind> for String {
    fn from(t: TaskKind) -> Self {
        t.as_str().to_string()
    }
}

impl TryFrom<String> for TaskKind {
    type Error = ParseTaskError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityPayload {
    pub modality_tag: String,
    pub payload: String,
}

impl ModalityPayload {
    pub fn new(tag: impl Into<String>, payload: impl Into<String>) -> Self {
        Self {
            modality_tag: tag.into(),
            payload: payload.into(),
        }
    }
}

/// A work item: clinical context plus one payload per modality.
///
/// `ground_truth` is only read by the simulated clinician and the metrics;
/// agents receive a [`ContextBundle`](crate::memory::ContextBundle) and raw
/// payloads, never the case itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub case_id: String,
    #[serde(default)]
    pub clinical_info: BTreeMap<String, String>,
    #[serde(default)]
    pub modality_payloads: Vec<ModalityPayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_tasks: Option<Vec<TaskKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<BTreeMap<TaskKind, bool>>,
}

impl Case {
    pub fn new(case_id: impl Into<String>) -> Self {
        Self {
            case_id: case_id.into(),
            clinical_info: BTreeMap::new(),
            modality_payloads: Vec::new(),
            declared_tasks: None,
            ground_truth: None,
        }
    }

    pub fn with_info(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.clinical_info.insert(key.into(), value.into());
        self
    }

    pub fn with_payload(mut self, tag: impl Into<String>, payload: impl Into<String>) -> Self {
        self.modality_payloads.push(ModalityPayload::new(tag, payload));
        self
    }

    pub fn with_tasks(mut self, tasks: Vec<TaskKind>) -> Self {
        self.declared_tasks = Some(tasks);
        self
    }

    pub fn with_ground_truth(mut self, truth: BTreeMap<TaskKind, bool>) -> Self {
        self.ground_truth = Some(truth);
        self
    }

    pub fn modality_tags(&self) -> BTreeSet<String> {
        self.modality_payloads
            .iter()
            .map(|p| p.modality_tag.clone())
            .collect()
    }

    pub fn payload(&self, tag: &str) -> Option<&str> {
        self.modality_payloads
            .iter()
            .find(|p| p.modality_tag == tag)
            .map(|p| p.payload.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.violations.join("; "))
    }
}

/// Checks the structural invariants of a case. Uniqueness of `case_id`
/// across a run is enforced by the store, not here.
pub fn validate_case(case: &Case) -> ValidationReport {
    let mut violations = Vec::new();
    if case.case_id.trim().is_empty() {
        violations.push("case_id must be non-empty".to_string());
    }
    if case.modality_payloads.is_empty() && case.clinical_info.is_empty() {
        violations.push("case needs at least one modality payload or clinical info".to_string());
    }
    let mut seen = BTreeSet::new();
    for p in &case.modality_payloads {
        if p.modality_tag.trim().is_empty() {
            violations.push("modality_tag must be non-empty".to_string());
        } else if !seen.insert(p.modality_tag.as_str()) {
            violations.push(format!("duplicate modality tag {:?}", p.modality_tag));
        }
    }
    if let Some(tasks) = &case.declared_tasks {
        for t in tasks {
            if let TaskKind::Custom(name) = t {
                if name.trim().is_empty() {
                    violations.push("custom task name must be non-empty".to_string());
                }
            }
        }
    }
    ValidationReport { violations }
}

/// One specialist's output for a case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub specialist_id: String,
    pub modality_tag: String,
    pub diagnosis_text: String,
    pub confidence: f64,
    pub produced_at: DateTime<Utc>,
}

impl Finding {
    pub fn check(&self) -> Result<(), String> {
        if self.diagnosis_text.trim().is_empty() {
            return Err(format!("{}: empty diagnosis text", self.specialist_id));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!(
                "{}: confidence {} outside [0,1]",
                self.specialist_id, self.confidence
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedFinding {
    pub finding: Finding,
    pub conflict: f64,
    pub weight: f64,
}

/// Ordered reasoning steps plus the per-task decision scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub steps: Vec<String>,
    pub decision_text: String,
    pub per_task_scores: BTreeMap<TaskKind, f64>,
}

impl ReasoningChain {
    /// Binary label per task (`score >= 0.5`).
    pub fn labels(&self) -> BTreeMap<TaskKind, bool> {
        self.per_task_scores
            .iter()
            .map(|(t, s)| (t.clone(), *s >= 0.5))
            .collect()
    }

    pub fn check(&self) -> Result<(), String> {
        if self.steps.is_empty() {
            return Err("reasoning chain has no steps".into());
        }
        if self.steps.iter().any(|s| s.trim().is_empty()) {
            return Err("reasoning chain has an empty step".into());
        }
        if let Some((t, s)) = self
            .per_task_scores
            .iter()
            .find(|(_, s)| !(0.0..=1.0).contains(*s))
        {
            return Err(format!("score {s} for {t} outside [0,1]"));
        }
        Ok(())
    }
}

/// Renders per-task scores as `task=0.xxx` joined by `"; "`.
pub fn format_decision(scores: &BTreeMap<TaskKind, f64>) -> String {
    scores
        .iter()
        .map(|(t, s)| format!("{t}={}", fmt3(*s)))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Renders binary labels in the same shape as [`format_decision`].
pub fn format_labels(labels: &BTreeMap<TaskKind, bool>) -> String {
    labels
        .iter()
        .map(|(t, l)| format!("{t}={}", if *l { "1.000" } else { "0.000" }))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyComponent {
    Conf,
    Conflict,
    Coherence,
}

impl UncertaintyComponent {
    pub const ALL: [UncertaintyComponent; 3] = [Self::Conf, Self::Conflict, Self::Coherence];
}

/// Composite uncertainty with its present components and the re-normalized
/// mixing weights actually used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct UncertaintyBreakdown<T = f64> {
    pub u_conf: Option<T>,
    pub u_conflict: Option<T>,
    pub u_coherence: Option<T>,
    pub lambdas: BTreeMap<UncertaintyComponent, T>,
    pub total: T,
}

impl<T: Scalar> UncertaintyBreakdown<T> {
    pub fn component(&self, c: UncertaintyComponent) -> Option<T> {
        match c {
            UncertaintyComponent::Conf => self.u_conf,
            UncertaintyComponent::Conflict => self.u_conflict,
            UncertaintyComponent::Coherence => self.u_coherence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    Autonomous,
    Escalated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingOutcome {
    pub case_id: String,
    pub mode: RoutingMode,
    pub preliminary: ReasoningChain,
    pub final_decision: String,
    pub uncertainty: UncertaintyBreakdown,
    pub theta_before: f64,
    pub theta_after: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clinician_modified: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Dispatch,
    Finding,
    Fusion,
    Reasoning,
    Routing,
    Feedback,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub case_id: String,
    pub kind: EventKind,
    pub payload: serde_json::Value,
    pub timestamp: DateTime<Utc>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Case {
        Case::new("c1").with_payload("ECHO", "lv dilation")
    }

    #[test]
    fn minimal_case_is_valid() {
        assert!(validate_case(&minimal()).is_valid());
        assert!(validate_case(&Case::new("c2").with_info("age", "71")).is_valid());
    }

    #[test]
    fn duplicate_modality_is_reported() {
        let c = minimal().with_payload("ECHO", "again");
        let report = validate_case(&c);
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0].contains("duplicate modality"));
    }

    #[test]
    fn empty_case_id_is_reported() {
        let mut c = minimal();
        c.case_id = " ".into();
        assert!(validate_case(&c).to_string().contains("case_id"));
    }

    #[test]
    fn case_without_payload_or_info_is_invalid() {
        assert!(!validate_case(&Case::new("c3")).is_valid());
    }

    #[test]
    fn task_kind_parses_aliases_and_custom() {
        assert_eq!("risk".parse::<TaskKind>().unwrap(), TaskKind::RiskStratification);
        assert_eq!("Severity".parse::<TaskKind>().unwrap(), TaskKind::Severity);
        assert_eq!(
            "custom:readmission".parse::<TaskKind>().unwrap(),
            TaskKind::Custom("readmission".into())
        );
        assert!("".parse::<TaskKind>().is_err());
        assert!("two words".parse::<TaskKind>().is_err());
        assert!(TaskKind::custom("  ").is_err());
    }

    #[test]
    fn task_kind_is_a_json_map_key() {
        let mut gt = BTreeMap::new();
        gt.insert(TaskKind::Etiology, true);
        gt.insert(TaskKind::RiskStratification, false);
        let json = serde_json::to_string(&gt).unwrap();
        assert_eq!(json, r#"{"risk_stratification":false,"etiology":true}"#);
        let back: BTreeMap<TaskKind, bool> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, gt);
    }

    #[test]
    fn decision_formatting() {
        let mut s = BTreeMap::new();
        s.insert(TaskKind::Severity, 0.25);
        s.insert(TaskKind::RiskStratification, 0.8125);
        assert_eq!(format_decision(&s), "risk_stratification=0.812; severity=0.250");
        let chain = ReasoningChain {
            steps: vec!["a".into()],
            decision_text: String::new(),
            per_task_scores: s,
        };
        assert_eq!(
            format_labels(&chain.labels()),
            "risk_stratification=1.000; severity=0.000"
        );
    }

    #[test]
    fn finding_and_chain_checks() {
        let f = Finding {
            specialist_id: "s".into(),
            modality_tag: "ECG".into(),
            diagnosis_text: "x".into(),
            confidence: 1.2,
            produced_at: DateTime::<Utc>::UNIX_EPOCH,
        };
        assert!(f.check().is_err());
        let chain = ReasoningChain {
            steps: vec![],
            decision_text: String::new(),
            per_task_scores: BTreeMap::new(),
        };
        assert!(chain.check().is_err());
    }
}
