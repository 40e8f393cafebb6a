//! One case end to end: tasks, activation, dispatch, fusion, reasoning,
//! uncertainty and routing, with every stage written to the audit log.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agents::{
    activate, dispatch, identify_tasks, reason, ActivationTable, DispatchError, DispatchFailure,
    DispatchPolicy, PromptTemplate, ReasoningAgent, ReasoningError, SpecialistRegistry, TaskError,
    TaskSource,
};
use crate::conflict::{conflicts_with_adjustment, ConflictError, SharedDirectionConfig};
use crate::embedding::{EmbeddingBackend, EmbeddingError, EmbeddingVector};
use crate::fusion::{compute_weights, weigh, AnnotationMode, EvidencePackage, FusionError};
use crate::memory::{ContextStore, MemoryError};
use crate::model::{
    Case, EventKind, Finding, ReasoningChain, RoutingMode, RoutingOutcome, TaskKind,
    UncertaintyBreakdown,
};
use crate::routing::{
    coherence, composite_uncertainty, resolve, route, ClinicianAgent, ClinicianError,
    CoherenceError, CoherenceScore, PendingEscalation, RouteResult, ThresholdState,
    UncertaintyConfig, UncertaintyError, Verdict, THRESHOLD_STEP,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Conflict(#[from] ConflictError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
    #[error(transparent)]
    Coherence(#[from] CoherenceError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Clinician(#[from] ClinicianError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEntry {
    pub specialist_id: String,
    pub modality_tag: String,
    pub confidence: f64,
    pub conflict: f64,
    pub weight: f64,
}

/// Payload of a `fusion` audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEvent {
    /// False with fewer than two findings; conflicts are then logged as 0.
    pub conflict_defined: bool,
    pub embedding_backend: String,
    /// Finding embeddings in dispatch (specialist id) order.
    #[serde(default)]
    pub embeddings: Vec<EmbeddingVector<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_direction: Option<SharedDirectionConfig>,
    /// Dispatch order, matching `embeddings`.
    pub findings: Vec<FusionEntry>,
    #[serde(default)]
    pub clamped: Vec<String>,
    pub annotation_mode: AnnotationMode,
    pub assembled_text: String,
}

/// Payload of a `reasoning` audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningEvent {
    pub agent_id: String,
    pub template_id: String,
    pub chain: ReasoningChain,
    pub coherence: Option<f64>,
    pub coherence_raw: Option<f64>,
}

/// Payload of a `routing` audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingEvent {
    pub mode: RoutingMode,
    pub uncertainty: UncertaintyBreakdown,
    pub uncertainty_config: UncertaintyConfig,
    pub theta_before: f64,
    /// Threshold step in force; zero for fixed-threshold runs.
    #[serde(default = "default_step")]
    pub update_step: f64,
    pub preliminary_decision: String,
}

fn default_step() -> f64 {
    THRESHOLD_STEP
}

/// Payload of a `feedback` audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub clinician_modified: bool,
    pub final_decision: String,
    /// Threshold when the verdict was applied.
    pub theta_before: f64,
    pub theta_after: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer_id: Option<String>,
}

/// Everything computed for a case before routing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub case_id: String,
    pub tasks: Vec<TaskKind>,
    pub findings: Vec<Finding>,
    pub failures: Vec<DispatchFailure>,
    pub evidence: EvidencePackage,
    pub chain: ReasoningChain,
    pub uncertainty: UncertaintyBreakdown,
}

pub struct Pipeline {
    pub store: Arc<ContextStore>,
    pub specialists: SpecialistRegistry,
    pub activation: ActivationTable,
    pub task_source: TaskSource,
    pub reasoner: Arc<dyn ReasoningAgent>,
    pub template: PromptTemplate,
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub shared_direction: Option<SharedDirectionConfig>,
    pub uncertainty: UncertaintyConfig,
    pub annotation: AnnotationMode,
    pub dispatch_policy: DispatchPolicy,
}

impl Pipeline {
    /// Declared tasks, default template, weighted annotation, equal
    /// uncertainty weights and no shared-direction adjustment.
    pub fn new(
        store: Arc<ContextStore>,
        specialists: SpecialistRegistry,
        activation: ActivationTable,
        reasoner: Arc<dyn ReasoningAgent>,
        embedder: Arc<dyn EmbeddingBackend>,
    ) -> Self {
        Self {
            store,
            specialists,
            activation,
            task_source: TaskSource::Declared,
            reasoner,
            template: PromptTemplate::default_reasoning(),
            embedder,
            shared_direction: None,
            uncertainty: UncertaintyConfig::default(),
            annotation: AnnotationMode::Weighted,
            dispatch_policy: DispatchPolicy::default(),
        }
    }

    fn log<T: Serialize>(&self, case_id: &str, kind: EventKind, payload: &T) -> Result<(), MemoryError> {
        let value = serde_json::to_value(payload).expect("audit payload serializes");
        self.store.log(case_id, kind, value).map(|_| ())
    }

    /// Ingests and evaluates a new case.
    pub async fn evaluate(&self, case: &Case) -> Result<CaseEvaluation, PipelineError> {
        self.store.ingest(case)?;
        self.evaluate_ingested(&case.case_id).await
    }

    /// Evaluates a case already in the store.
    pub async fn evaluate_ingested(&self, case_id: &str) -> Result<CaseEvaluation, PipelineError> {
        let case = self.store.case(case_id)?;
        let context = self.store.context(case_id)?;
        let tasks = identify_tasks(&context, &self.task_source).await?;
        self.store.set_tasks(case_id, tasks.clone())?;

        let active = activate(
            &self.activation,
            &context.modality_registry,
            &tasks,
            &self.specialists.modalities(),
        );
        let outcome = dispatch(
            &case,
            &active,
            &self.specialists,
            &self.store,
            self.dispatch_policy,
        )
        .await?;
        let findings = outcome.findings;

        let confidences: Vec<f64> = findings.iter().map(|f| f.confidence).collect();
        let (conflicts, embeddings) = if findings.len() >= 2 {
            let texts: Vec<String> = findings.iter().map(|f| f.diagnosis_text.clone()).collect();
            let embeddings = self.embedder.embed_batch(&texts).await?;
            let d = conflicts_with_adjustment(&embeddings, self.shared_direction.as_ref())?;
            (Some(d), embeddings)
        } else {
            (None, Vec::new())
        };
        let deltas = conflicts
            .clone()
            .unwrap_or_else(|| vec![0.0; findings.len()]);
        let fused = compute_weights(&confidences, &deltas)?;
        let context = self.store.context(case_id)?;
        let evidence = EvidencePackage::build(
            &context,
            weigh(&findings, &deltas, &fused.weights),
            self.annotation,
        )?;

        let fusion = FusionEvent {
            conflict_defined: conflicts.is_some(),
            embedding_backend: self.embedder.backend_id().to_string(),
            embeddings,
            shared_direction: self.shared_direction.clone(),
            findings: findings
                .iter()
                .zip(&deltas)
                .zip(&fused.weights)
                .map(|((f, d), w)| FusionEntry {
                    specialist_id: f.specialist_id.clone(),
                    modality_tag: f.modality_tag.clone(),
                    confidence: f.confidence,
                    conflict: *d,
                    weight: *w,
                })
                .collect(),
            clamped: fused
                .clamped
                .iter()
                .map(|i| findings[*i].specialist_id.clone())
                .collect(),
            annotation_mode: self.annotation,
            assembled_text: evidence.assembled_text.clone(),
        };
        self.log(case_id, EventKind::Fusion, &fusion)?;
        if !fusion.clamped.is_empty() {
            self.log(
                case_id,
                EventKind::Warning,
                &json!({"source": "fusion", "clamped": fusion.clamped}),
            )?;
        }

        let chain = reason(
            self.reasoner.as_ref(),
            &self.template,
            &evidence.assembled_text,
            &tasks,
        )
        .await?;
        let coh: CoherenceScore = coherence(
            &chain,
            self.embedder.as_ref(),
            self.uncertainty.clamp_policy,
        )
        .await?;
        self.log(
            case_id,
            EventKind::Reasoning,
            &ReasoningEvent {
                agent_id: self.reasoner.agent_id().to_string(),
                template_id: self.template.template_id.clone(),
                chain: chain.clone(),
                coherence: coh.value,
                coherence_raw: coh.raw,
            },
        )?;
        if coh.clamped {
            self.log(
                case_id,
                EventKind::Warning,
                &json!({"source": "coherence", "raw": coh.raw, "value": coh.value}),
            )?;
        }

        let composite =
            composite_uncertainty(&confidences, conflicts.as_deref(), coh.value, &self.uncertainty)?;
        for w in &composite.warnings {
            self.log(
                case_id,
                EventKind::Warning,
                &json!({"source": "uncertainty", "warning": w}),
            )?;
        }

        Ok(CaseEvaluation {
            case_id: case_id.to_string(),
            tasks,
            findings,
            failures: outcome.failures,
            evidence,
            chain,
            uncertainty: composite.breakdown,
        })
    }

    /// Routes an evaluated case against the current threshold. The caller
    /// must serialize calls that share `state`.
    pub fn route_case(
        &self,
        eval: &CaseEvaluation,
        state: &mut ThresholdState,
        clinician: &dyn ClinicianAgent,
    ) -> Result<RouteResult, PipelineError> {
        let case = self.store.case(&eval.case_id)?;
        let theta_before = state.theta();
        let result = route(&eval.uncertainty, state, clinician, &eval.chain, &case)?;
        let mode = match &result {
            RouteResult::Completed(o) => o.mode,
            RouteResult::Parked(_) => RoutingMode::Escalated,
        };
        self.log(
            &eval.case_id,
            EventKind::Routing,
            &RoutingEvent {
                mode,
                uncertainty: eval.uncertainty.clone(),
                uncertainty_config: self.uncertainty.clone(),
                theta_before,
                update_step: state.update_step(),
                preliminary_decision: eval.chain.decision_text.clone(),
            },
        )?;
        if let RouteResult::Completed(o) = &result {
            if o.mode == RoutingMode::Escalated {
                self.log_feedback(o, theta_before, None)?;
            }
        }
        Ok(result)
    }

    /// Applies a verdict to a parked escalation.
    pub fn resolve_pending(
        &self,
        pending: &PendingEscalation,
        verdict: &Verdict,
        state: &mut ThresholdState,
        reviewer_id: Option<&str>,
    ) -> Result<RoutingOutcome, PipelineError> {
        let theta_before = state.theta();
        let outcome = resolve(pending, verdict, state);
        self.log_feedback(&outcome, theta_before, reviewer_id)?;
        Ok(outcome)
    }

    fn log_feedback(
        &self,
        outcome: &RoutingOutcome,
        theta_before: f64,
        reviewer_id: Option<&str>,
    ) -> Result<(), MemoryError> {
        self.log(
            &outcome.case_id,
            EventKind::Feedback,
            &FeedbackEvent {
                clinician_modified: outcome.clinician_modified.unwrap_or(false),
                final_decision: outcome.final_decision.clone(),
                theta_before,
                theta_after: outcome.theta_after,
                reviewer_id: reviewer_id.map(str::to_string),
            },
        )
    }
}
