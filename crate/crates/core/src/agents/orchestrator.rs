//! Task identification, specialist activation and parallel dispatch.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::llm::{ChatMessage, ChatModel};
use super::reasoning::PromptTemplate;
use super::specialist::{render_context, AgentError, SpecialistRegistry};
use crate::memory::{ContextBundle, ContextStore, MemoryError};
use crate::model::{Case, EventKind, Finding, TaskKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationRule {
    pub task: TaskKind,
    #[serde(default)]
    pub required_modalities: BTreeSet<String>,
    pub specialist_ids: BTreeSet<String>,
}

/// Config-driven map from (modalities present, tasks) to specialists.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationTable {
    #[serde(default)]
    pub rules: Vec<ActivationRule>,
    /// Specialists activated whenever their modality is present.
    #[serde(default)]
    pub defaults: BTreeMap<String, BTreeSet<String>>,
}

impl ActivationTable {
    /// Every referenced specialist must be registered.
    pub fn validate(&self, registry: &SpecialistRegistry) -> Result<(), String> {
        let referenced = self
            .rules
            .iter()
            .flat_map(|r| r.specialist_ids.iter())
            .chain(self.defaults.values().flatten());
        for id in referenced {
            if !registry.contains(id) {
                return Err(format!("activation table references unknown specialist {id:?}"));
            }
        }
        Ok(())
    }
}

/// Union of the specialists of every rule whose task is requested and whose
/// required modalities are all present, plus the per-modality defaults;
/// restricted to specialists whose own modality is present.
///
/// Adding a modality can only grow the result.
pub fn activate(
    table: &ActivationTable,
    registry: &BTreeSet<String>,
    tasks: &[TaskKind],
    specialist_modalities: &BTreeMap<String, String>,
) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for rule in &table.rules {
        if tasks.contains(&rule.task) && rule.required_modalities.is_subset(registry) {
            out.extend(rule.specialist_ids.iter().cloned());
        }
    }
    for (modality, ids) in &table.defaults {
        if registry.contains(modality) {
            out.extend(ids.iter().cloned());
        }
    }
    out.retain(|id| {
        specialist_modalities
            .get(id)
            .is_some_and(|m| registry.contains(m))
    });
    out
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaskError {
    #[error("no tasks declared and task identification is disabled")]
    NoTasks,
    #[error("task identification failed: {0}")]
    Llm(String),
    #[error("unparseable task list: {raw:?}")]
    Unparseable { raw: String },
}

/// Where task lists come from.
#[derive(Clone, Default)]
pub enum TaskSource {
    /// Use the case's declared tasks verbatim.
    #[default]
    Declared,
    /// Ask an orchestrator model with the given template.
    Llm {
        model: Arc<dyn ChatModel>,
        template: PromptTemplate,
    },
}

/// Parses `TASKS: a, b` (or a bare list) into task kinds.
pub fn parse_task_list(raw: &str) -> Result<Vec<TaskKind>, TaskError> {
    let unparseable = || TaskError::Unparseable {
        raw: raw.to_string(),
    };
    let body = raw
        .lines()
        .find_map(|l| {
            let t = l.trim();
            t.strip_prefix("TASKS:")
                .or_else(|| t.strip_prefix("tasks:"))
                .map(str::to_string)
        })
        .unwrap_or_else(|| raw.to_string());
    let mut out: Vec<TaskKind> = Vec::new();
    for tok in body.split(|c: char| c == ',' || c == ';' || c.is_whitespace()) {
        if tok.is_empty() {
            continue;
        }
        let task: TaskKind = tok.parse().map_err(|_| unparseable())?;
        if !out.contains(&task) {
            out.push(task);
        }
    }
    if out.is_empty() {
        return Err(unparseable());
    }
    Ok(out)
}

pub async fn identify_tasks(
    context: &ContextBundle,
    source: &TaskSource,
) -> Result<Vec<TaskKind>, TaskError> {
    match source {
        TaskSource::Declared => {
            if context.tasks.is_empty() {
                Err(TaskError::NoTasks)
            } else {
                Ok(context.tasks.clone())
            }
        }
        TaskSource::Llm { model, template } => {
            let mut ctx = render_context(context);
            ctx.push_str(&format!(
                "modalities: {}\n",
                context
                    .modality_registry
                    .iter()
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
            let mut vars = BTreeMap::new();
            vars.insert("context", ctx);
            let prompt = template
                .render(&vars)
                .map_err(|e| TaskError::Llm(e.to_string()))?;
            let reply = model
                .complete(&[ChatMessage::user(prompt)])
                .await
                .map_err(|e| TaskError::Llm(e.to_string()))?;
            parse_task_list(&reply.text)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispatchPolicy {
    pub timeout: Duration,
    pub retries: u32,
}

impl Default for DispatchPolicy {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            retries: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchFailure {
    pub specialist_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchOutcome {
    /// Sorted by specialist id.
    pub findings: Vec<Finding>,
    pub failures: Vec<DispatchFailure>,
}

#[derive(Debug, thiserror::Error)]
pub enum DispatchError {
    #[error("no specialists activated")]
    NoSpecialists,
    #[error("specialist {0:?} is not registered")]
    Unregistered(String),
    #[error("every specialist failed: {0:?}")]
    AllFailed(Vec<DispatchFailure>),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Runs the active specialists concurrently, each under a timeout with the
/// configured retries. Failures are logged and skipped; findings come back in
/// specialist-id order regardless of completion order.
pub async fn dispatch(
    case: &Case,
    active: &BTreeSet<String>,
    specialists: &SpecialistRegistry,
    store: &ContextStore,
    policy: DispatchPolicy,
) -> Result<DispatchOutcome, DispatchError> {
    if active.is_empty() {
        return Err(DispatchError::NoSpecialists);
    }
    let agents = active
        .iter()
        .map(|id| {
            specialists
                .get(id)
                .cloned()
                .ok_or_else(|| DispatchError::Unregistered(id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let context = store.context(&case.case_id)?;
    for a in &agents {
        store.log(
            &case.case_id,
            EventKind::Dispatch,
            json!({"specialist_id": a.specialist_id(), "modality": a.accepted_modality()}),
        )?;
    }

    let runs = agents.iter().map(|agent| {
        let context = &context;
        async move {
            let id = agent.specialist_id().to_string();
            let Some(payload) = case.payload(agent.accepted_modality()) else {
                return (id, Err(format!("case has no {} payload", agent.accepted_modality())));
            };
            let mut last = String::new();
            for _ in 0..=policy.retries {
                match tokio::time::timeout(policy.timeout, agent.analyze(payload, context)).await {
                    Ok(Ok(out)) => return (id, Ok(out)),
                    Ok(Err(e)) => last = e.to_string(),
                    Err(_) => last = AgentError::Timeout(id.clone()).to_string(),
                }
            }
            (id, Err(last))
        }
    });
    let results = futures::future::join_all(runs).await;

    let modalities = specialists.modalities();
    let mut findings = Vec::new();
    let mut failures = Vec::new();
    for (id, result) in results {
        let checked = result.and_then(|out| {
            let f = Finding {
                modality_tag: modalities[&id].clone(),
                specialist_id: id.clone(),
                diagnosis_text: out.diagnosis_text,
                confidence: out.confidence,
                produced_at: store.clock().now(),
            };
            f.check().map(|_| f)
        });
        match checked {
            Ok(f) => {
                store.log(
                    &case.case_id,
                    EventKind::Finding,
                    serde_json::to_value(&f).expect("finding serializes"),
                )?;
                findings.push(f);
            }
            Err(error) => {
                tracing::warn!(specialist = %id, %error, "specialist failed");
                store.log(
                    &case.case_id,
                    EventKind::Dispatch,
                    json!({"specialist_id": id, "error": error}),
                )?;
                failures.push(DispatchFailure {
                    specialist_id: id,
                    error,
                });
            }
        }
    }
    if findings.is_empty() {
        return Err(DispatchError::AllFailed(failures));
    }
    Ok(DispatchOutcome { findings, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::llm::CannedChat;
    use crate::agents::specialist::StubSpecialist;
    use crate::clock::LogicalClock;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn table() -> ActivationTable {
        ActivationTable {
            rules: vec![
                ActivationRule {
                    task: TaskKind::RiskStratification,
                    required_modalities: set(&["ECG"]),
                    specialist_ids: set(&["ecg_spec"]),
                },
                ActivationRule {
                    task: TaskKind::RiskStratification,
                    required_modalities: set(&["ECHO"]),
                    specialist_ids: set(&["echo_spec"]),
                },
            ],
            defaults: BTreeMap::new(),
        }
    }

    fn modalities() -> BTreeMap<String, String> {
        [("ecg_spec", "ECG"), ("echo_spec", "ECHO")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn activation_examples() {
        let risk = [TaskKind::RiskStratification];
        assert_eq!(
            activate(&table(), &set(&["ECG"]), &risk, &modalities()),
            set(&["ecg_spec"])
        );
        assert!(activate(&table(), &set(&[]), &risk, &modalities()).is_empty());
        assert_eq!(
            activate(&table(), &set(&["ECG", "ECHO"]), &risk, &modalities()),
            set(&["ecg_spec", "echo_spec"])
        );
        assert!(activate(&table(), &set(&["ECG"]), &[TaskKind::Severity], &modalities()).is_empty());
    }

    #[test]
    fn activation_is_monotone_in_registry() {
        let mut t = table();
        t.defaults.insert("ECHO".into(), set(&["echo_spec"]));
        let all = ["ECG", "ECHO", "CXR"];
        for mask in 0u8..8 {
            let reg: BTreeSet<String> = all
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, s)| s.to_string())
                .collect();
            let base = activate(&t, &reg, &[TaskKind::RiskStratification], &modalities());
            for extra in all {
                let mut bigger = reg.clone();
                bigger.insert(extra.to_string());
                let grown = activate(&t, &bigger, &[TaskKind::RiskStratification], &modalities());
                assert!(base.is_subset(&grown));
            }
        }
    }

    #[test]
    fn table_validation() {
        let reg = SpecialistRegistry::new()
            .with(Arc::new(StubSpecialist::new("ecg_spec", "ECG", "t", 0.5)));
        assert!(table().validate(&reg).unwrap_err().contains("echo_spec"));
    }

    #[test]
    fn task_list_parsing() {
        assert_eq!(
            parse_task_list("risk_stratification").unwrap(),
            vec![TaskKind::RiskStratification]
        );
        assert_eq!(
            parse_task_list("Sure.\nTASKS: etiology, severity, etiology").unwrap(),
            vec![TaskKind::Etiology, TaskKind::Severity]
        );
        assert!(matches!(
            parse_task_list("I think the patient needs (something)"),
            Err(TaskError::Unparseable { .. })
        ));
    }

    #[tokio::test]
    async fn identify_tasks_modes() {
        let case = Case::new("c").with_payload("ECG", "x");
        let declared = ContextBundle::from_parts(
            &case,
            vec![TaskKind::RiskStratification, TaskKind::Severity],
            vec![],
        );
        assert_eq!(
            identify_tasks(&declared, &TaskSource::Declared).await.unwrap(),
            vec![TaskKind::RiskStratification, TaskKind::Severity]
        );
        let empty = ContextBundle::from_parts(&case, vec![], vec![]);
        assert_eq!(
            identify_tasks(&empty, &TaskSource::Declared).await,
            Err(TaskError::NoTasks)
        );
        let llm = TaskSource::Llm {
            model: Arc::new(CannedChat::new("risk_stratification")),
            template: PromptTemplate::default_task_identification(),
        };
        assert_eq!(
            identify_tasks(&empty, &llm).await.unwrap(),
            vec![TaskKind::RiskStratification]
        );
    }

    fn store_with(case: &Case) -> ContextStore {
        let s = ContextStore::in_memory(Arc::new(LogicalClock::new()));
        s.ingest(case).unwrap();
        s
    }

    #[tokio::test]
    async fn dispatch_collects_fixture_findings() {
        let case = Case::new("c").with_payload("ECG", "x").with_payload("ECHO", "y");
        let store = store_with(&case);
        let reg = SpecialistRegistry::new()
            .with(Arc::new(StubSpecialist::new("ecg_spec", "ECG", "sinus", 0.6)))
            .with(Arc::new(StubSpecialist::new("echo_spec", "ECHO", "dilated", 0.8)));
        let out = dispatch(
            &case,
            &set(&["ecg_spec", "echo_spec"]),
            &reg,
            &store,
            DispatchPolicy::default(),
        )
        .await
        .unwrap();
        assert_eq!(out.findings.len(), 2);
        assert_eq!(out.findings[0].diagnosis_text, "sinus");
        assert_eq!(out.findings[1].confidence, 0.8);
        assert_eq!(out.findings[1].modality_tag, "ECHO");
        let kinds: Vec<_> = store.history("c").unwrap().iter().map(|r| r.kind).collect();
        assert_eq!(
            kinds,
            vec![EventKind::Dispatch, EventKind::Dispatch, EventKind::Finding, EventKind::Finding]
        );
    }

    #[tokio::test(start_paused = true)]
    async fn dispatch_survives_a_timeout() {
        let case = Case::new("c").with_payload("ECG", "x").with_payload("ECHO", "y");
        let store = store_with(&case);
        let reg = SpecialistRegistry::new()
            .with(Arc::new(StubSpecialist::new("ecg_spec", "ECG", "sinus", 0.6)))
            .with(Arc::new(
                StubSpecialist::new("echo_spec", "ECHO", "dilated", 0.8)
                    .with_latency(Duration::from_secs(60)),
            ));
        let out = dispatch(
            &case,
            &set(&["ecg_spec", "echo_spec"]),
            &reg,
            &store,
            DispatchPolicy::default(),
        )
        .await
        .unwrap();
        assert_eq!(out.findings.len(), 1);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].specialist_id, "echo_spec");
        assert!(store
            .history("c")
            .unwrap()
            .iter()
            .any(|r| r.payload.get("error").is_some()));
    }

    #[tokio::test]
    async fn dispatch_retries_once() {
        let case = Case::new("c").with_payload("ECG", "x");
        let store = store_with(&case);
        let flaky = Arc::new(StubSpecialist::new("ecg_spec", "ECG", "sinus", 0.6).failing(1));
        let reg = SpecialistRegistry::new().with(flaky.clone());
        let out = dispatch(&case, &set(&["ecg_spec"]), &reg, &store, DispatchPolicy::default())
            .await
            .unwrap();
        assert_eq!(out.findings.len(), 1);
        assert_eq!(flaky.calls(), 2);
    }

    #[tokio::test]
    async fn dispatch_errors() {
        let case = Case::new("c").with_payload("ECG", "x");
        let store = store_with(&case);
        let reg = SpecialistRegistry::new()
            .with(Arc::new(StubSpecialist::new("ecg_spec", "ECG", "s", 0.6).failing(5)));
        assert!(matches!(
            dispatch(&case, &set(&["ecg_spec"]), &reg, &store, DispatchPolicy::default()).await,
            Err(DispatchError::AllFailed(_))
        ));
        assert!(matches!(
            dispatch(&case, &set(&[]), &reg, &store, DispatchPolicy::default()).await,
            Err(DispatchError::NoSpecialists)
        ));
        assert!(matches!(
            dispatch(&case, &set(&["ghost"]), &reg, &store, DispatchPolicy::default()).await,
            Err(DispatchError::Unregistered(_))
        ));
    }
}
