//! Reasoning coherence, composite uncertainty, threshold routing and
//! feedback-driven threshold calibration.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingBackend, EmbeddingError, EmbeddingVector};
use crate::model::{
    format_decision, format_labels, Case, ReasoningChain, RoutingMode, RoutingOutcome,
    UncertaintyBreakdown, UncertaintyComponent,
};
use crate::scalar::Scalar;

/// Per-escalation threshold step.
pub const THRESHOLD_STEP: f64 = 0.001;
pub const DEFAULT_THETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum UncertaintyError {
    #[error("no uncertainty component is both available and enabled")]
    NoComponents,
    #[error("mixing weights of the present components sum to zero")]
    ZeroLambda,
    #[error("negative or non-finite mixing weight for {0:?}")]
    BadLambda(UncertaintyComponent),
    #[error("{component:?} = {value} outside [0, 1]")]
    Overflow {
        component: UncertaintyComponent,
        value: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampPolicy {
    #[default]
    ClampToUnit,
    ErrorOnOverflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct UncertaintyConfig<T = f64> {
    pub lambdas: BTreeMap<UncertaintyComponent, T>,
    pub enabled_components: BTreeSet<UncertaintyComponent>,
    #[serde(default)]
    pub clamp_policy: ClampPolicy,
}

impl<T: Scalar> Default for UncertaintyConfig<T> {
    fn default() -> Self {
        let third = T::one() / T::lit(3.0);
        Self {
            lambdas: UncertaintyComponent::ALL.iter().map(|c| (*c, third)).collect(),
            enabled_components: UncertaintyComponent::ALL.into_iter().collect(),
            clamp_policy: ClampPolicy::ClampToUnit,
        }
    }
}

impl<T: Scalar> UncertaintyConfig<T> {
    /// Equal weights restricted to `components`.
    pub fn only(components: &[UncertaintyComponent]) -> Self {
        Self {
            enabled_components: components.iter().copied().collect(),
            ..Self::default()
        }
    }
}

/// Named component subsets used by the ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentSubset {
    Full,
    NoConf,
    NoConflict,
    NoCoherence,
    ConfOnly,
}

impl ComponentSubset {
    pub const TABLE: [ComponentSubset; 5] = [
        Self::Full,
        Self::NoConf,
        Self::NoConflict,
        Self::NoCoherence,
        Self::ConfOnly,
    ];

    pub fn components(self) -> Vec<UncertaintyComponent> {
        use UncertaintyComponent::*;
        match self {
            Self::Full => vec![Conf, Conflict, Coherence],
            Self::NoConf => vec![Conflict, Coherence],
            Self::NoConflict => vec![Conf, Coherence],
            Self::NoCoherence => vec![Conf, Conflict],
            Self::ConfOnly => vec![Conf],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoConf => "no_conf",
            Self::NoConflict => "no_conflict",
            Self::NoCoherence => "no_coherence",
            Self::ConfOnly => "conf_only",
        }
    }

    pub fn config<T: Scalar>(self) -> UncertaintyConfig<T> {
        UncertaintyConfig::only(&self.components())
    }
}

impl FromStr for ComponentSubset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::TABLE
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown component subset {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampWarning {
    pub component: UncertaintyComponent,
    pub raw: f64,
    pub clamped: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composite<T> {
    pub breakdown: UncertaintyBreakdown<T>,
    pub warnings: Vec<ClampWarning>,
}

fn apply_policy<T: Scalar>(
    component: UncertaintyComponent,
    value: T,
    policy: ClampPolicy,
    warnings: &mut Vec<ClampWarning>,
) -> Result<T, UncertaintyError> {
    if value.in_unit_interval() {
        return Ok(value);
    }
    match policy {
        ClampPolicy::ErrorOnOverflow => Err(UncertaintyError::Overflow {
            component,
            value: value.as_f64(),
        }),
        ClampPolicy::ClampToUnit => {
            let clamped = value.clamp_to(T::zero(), T::one());
            tracing::warn!(?component, raw = %value, "uncertainty component clamped");
            warnings.push(ClampWarning {
                component,
                raw: value.as_f64(),
                clamped: clamped.as_f64(),
            });
            Ok(clamped)
        }
    }
}

/// Confidence gap `1 - max c`, mean conflict, and chain incoherence combined
/// with mixing weights re-normalized over the components that are both
/// available and enabled.
///
/// `conflicts = None` (fewer than two specialists) and `coherence = None`
/// (single-step chain) mark components as structurally absent.
pub fn composite_uncertainty<T: Scalar>(
    confidences: &[T],
    conflicts: Option<&[T]>,
    coherence: Option<T>,
    cfg: &UncertaintyConfig<T>,
) -> Result<Composite<T>, UncertaintyError> {
    use UncertaintyComponent::*;
    let mut warnings = Vec::new();
    let enabled = |c| cfg.enabled_components.contains(&c);

    let raw_conf = confidences
        .iter()
        .copied()
        .reduce(|a, b| if b > a { b } else { a })
        .map(|m| T::one() - m);
    let raw_conflict = conflicts
        .filter(|d| !d.is_empty())
        .map(|d| d.iter().copied().sum::<T>() / T::lit(d.len() as f64));

    let mut present: BTreeMap<UncertaintyComponent, T> = BTreeMap::new();
    for (comp, raw) in [(Conf, raw_conf), (Conflict, raw_conflict), (Coherence, coherence)] {
        if let (true, Some(v)) = (enabled(comp), raw) {
            present.insert(comp, apply_policy(comp, v, cfg.clamp_policy, &mut warnings)?);
        }
    }
    if present.is_empty() {
        return Err(UncertaintyError::NoComponents);
    }

    let mut lambda_sum = T::zero();
    for comp in present.keys() {
        let l = cfg.lambdas.get(comp).copied().unwrap_or_else(T::zero);
        if l < T::zero() || !l.is_finite() {
            return Err(UncertaintyError::BadLambda(*comp));
        }
        lambda_sum = lambda_sum + l;
    }
    if lambda_sum <= T::zero() {
        return Err(UncertaintyError::ZeroLambda);
    }
    let lambdas: BTreeMap<UncertaintyComponent, T> = present
        .keys()
        .map(|c| (*c, cfg.lambdas.get(c).copied().unwrap_or_else(T::zero) / lambda_sum))
        .collect();
    let total = present
        .iter()
        .map(|(c, u)| lambdas[c] * *u)
        .sum::<T>()
        .clamp_to(T::zero(), T::one());

    Ok(Composite {
        breakdown: UncertaintyBreakdown {
            u_conf: present.get(&Conf).copied(),
            u_conflict: present.get(&Conflict).copied(),
            u_coherence: present.get(&Coherence).copied(),
            lambdas,
            total,
        },
        warnings,
    })
}

/// Raw incoherence `1 - mean cos(step_t, step_t+1)`, in `[0, 2]`.
/// `None` for chains with fewer than two steps.
pub fn coherence_from_embeddings<T: Scalar>(
    steps: &[EmbeddingVector<T>],
) -> Result<Option<T>, EmbeddingError> {
    if steps.len() < 2 {
        return Ok(None);
    }
    let mut acc = T::zero();
    for w in steps.windows(2) {
        acc = acc + w[0].cosine(&w[1])?;
    }
    Ok(Some(T::one() - acc / T::lit((steps.len() - 1) as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherenceScore {
    pub value: Option<f64>,
    pub raw: Option<f64>,
    pub clamped: bool,
}

/// Embeds each step and scores chain incoherence, clamping into `[0, 1]`
/// under `ClampToUnit`.
pub async fn coherence(
    chain: &ReasoningChain,
    backend: &dyn EmbeddingBackend,
    policy: ClampPolicy,
) -> Result<CoherenceScore, CoherenceError> {
    if chain.steps.len() < 2 {
        return Ok(CoherenceScore {
            value: None,
            raw: None,
            clamped: false,
        });
    }
    let vectors = backend.embed_batch(&chain.steps).await?;
    let raw = coherence_from_embeddings(&vectors)?.expect("two or more steps");
    let mut warnings = Vec::new();
    let value = apply_policy(UncertaintyComponent::Coherence, raw, policy, &mut warnings)?;
    Ok(CoherenceScore {
        value: Some(value),
        raw: Some(raw),
        clamped: !warnings.is_empty(),
    })
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoherenceError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

/// `U <= theta` stays autonomous; strictly above escalates.
pub fn decide<T: Scalar>(total: T, theta: T) -> RoutingMode {
    if total <= theta {
        RoutingMode::Autonomous
    } else {
        RoutingMode::Escalated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct ThresholdStep<T = f64> {
    pub case_id: String,
    pub theta_before: T,
    pub theta_after: T,
    pub clinician_modified: bool,
}

/// Escalation threshold in `[0, 1]`, moved by one step per resolved
/// escalation: up on acceptance, down on modification.
///
/// The current value is kept as `anchor + offset * step` so a long walk
/// accumulates no rounding drift; the anchor resets when the walk hits a
/// bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct ThresholdState<T = f64> {
    theta: T,
    update_step: T,
    anchor: T,
    offset: i64,
    history: Vec<ThresholdStep<T>>,
}

impl<T: Scalar> ThresholdState<T> {
    pub fn new(theta_init: T) -> Self {
        Self::with_step(theta_init, T::lit(THRESHOLD_STEP))
    }

    pub fn with_step(theta_init: T, update_step: T) -> Self {
        let theta = if theta_init.is_finite() {
            theta_init.clamp_to(T::zero(), T::one())
        } else {
            T::lit(DEFAULT_THETA)
        };
        Self {
            theta,
            update_step,
            anchor: theta,
            offset: 0,
            history: Vec::new(),
        }
    }

    pub fn theta(&self) -> T {
        self.theta
    }

    pub fn update_step(&self) -> T {
        self.update_step
    }

    pub fn history(&self) -> &[ThresholdStep<T>] {
        &self.history
    }

    /// Applies one clinician verdict; returns `(before, after)`.
    pub fn apply_feedback(&mut self, case_id: &str, clinician_modified: bool) -> (T, T) {
        let before = self.theta;
        self.offset += if clinician_modified { -1 } else { 1 };
        let candidate = self.anchor + T::lit(self.offset as f64) * self.update_step;
        let after = if candidate >= T::one() {
            self.anchor = T::one();
            self.offset = 0;
            T::one()
        } else if candidate <= T::zero() {
            self.anchor = T::zero();
            self.offset = 0;
            T::zero()
        } else {
            candidate
        };
        self.theta = after;
        self.history.push(ThresholdStep {
            case_id: case_id.to_string(),
            theta_before: before,
            theta_after: after,
            clinician_modified,
        });
        (before, after)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub final_decision: String,
    pub clinician_modified: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClinicianError {
    #[error("case {0:?} has no ground truth")]
    MissingGroundTruth(String),
    #[error("no clinician available")]
    Unavailable,
}

/// Reviews escalated cases. The verdict always stands.
pub trait ClinicianAgent: Send + Sync {
    fn review(
        &self,
        preliminary: &ReasoningChain,
        uncertainty: &UncertaintyBreakdown,
        case: &Case,
    ) -> Result<Verdict, ClinicianError>;
}

/// Replies with the ground truth; "modified" whenever any task label of the
/// preliminary decision differs from it.
#[derive(Debug, Default, Clone, Copy)]
pub struct SimulatedClinician;

impl ClinicianAgent for SimulatedClinician {
    fn review(
        &self,
        preliminary: &ReasoningChain,
        _uncertainty: &UncertaintyBreakdown,
        case: &Case,
    ) -> Result<Verdict, ClinicianError> {
        let truth = case
            .ground_truth
            .as_ref()
            .ok_or_else(|| ClinicianError::MissingGroundTruth(case.case_id.clone()))?;
        let predicted = preliminary.labels();
        let modified = truth.iter().any(|(t, l)| predicted.get(t) != Some(l));
        Ok(Verdict {
            final_decision: format_labels(truth),
            clinician_modified: modified,
        })
    }
}

/// Replays a fixed accept/modify script, cycling when exhausted.
#[derive(Debug)]
pub struct ScriptedClinician {
    script: Vec<bool>,
    cursor: Mutex<usize>,
}

impl ScriptedClinician {
    /// `script[i]` is `true` when the i-th review modifies the decision.
    pub fn new(script: Vec<bool>) -> Self {
        assert!(!script.is_empty(), "clinician script must be non-empty");
        Self {
            script,
            cursor: Mutex::new(0),
        }
    }

    pub fn always_accept() -> Self {
        Self::new(vec![false])
    }

    pub fn always_modify() -> Self {
        Self::new(vec![true])
    }
}

impl ClinicianAgent for ScriptedClinician {
    fn review(
        &self,
        preliminary: &ReasoningChain,
        _uncertainty: &UncertaintyBreakdown,
        _case: &Case,
    ) -> Result<Verdict, ClinicianError> {
        let mut cursor = self.cursor.lock().expect("script cursor poisoned");
        let modified = self.script[*cursor % self.script.len()];
        *cursor += 1;
        let final_decision = if modified {
            let flipped = preliminary
                .labels()
                .into_iter()
                .map(|(t, l)| (t, !l))
                .collect();
            format_labels(&flipped)
        } else {
            format_decision(&preliminary.per_task_scores)
        };
        Ok(Verdict {
            final_decision,
            clinician_modified: modified,
        })
    }
}

/// Stand-in for a human reviewer who has not responded yet.
#[derive(Debug, Default, Clone, Copy)]
pub struct UnavailableClinician;

impl ClinicianAgent for UnavailableClinician {
    fn review(
        &self,
        _: &ReasoningChain,
        _: &UncertaintyBreakdown,
        _: &Case,
    ) -> Result<Verdict, ClinicianError> {
        Err(ClinicianError::Unavailable)
    }
}

/// An escalated case waiting for a verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingEscalation {
    pub case_id: String,
    pub preliminary: ReasoningChain,
    pub uncertainty: UncertaintyBreakdown,
    pub theta_before: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RouteResult {
    Completed(RoutingOutcome),
    /// No clinician could take the case; it must be queued, never dropped.
    Parked(PendingEscalation),
}

/// Applies a verdict to a pending escalation and moves the threshold.
pub fn resolve(
    pending: &PendingEscalation,
    verdict: &Verdict,
    state: &mut ThresholdState,
) -> RoutingOutcome {
    let (_, after) = state.apply_feedback(&pending.case_id, verdict.clinician_modified);
    RoutingOutcome {
        case_id: pending.case_id.clone(),
        mode: RoutingMode::Escalated,
        preliminary: pending.preliminary.clone(),
        final_decision: verdict.final_decision.clone(),
        uncertainty: pending.uncertainty.clone(),
        theta_before: pending.theta_before,
        theta_after: after,
        clinician_modified: Some(verdict.clinician_modified),
    }
}

/// Threshold routing for one case. Autonomous cases leave the threshold
/// untouched; escalated ones go to the clinician and feed back into it.
pub fn route(
    uncertainty: &UncertaintyBreakdown,
    state: &mut ThresholdState,
    clinician: &dyn ClinicianAgent,
    preliminary: &ReasoningChain,
    case: &Case,
) -> Result<RouteResult, ClinicianError> {
    let theta = state.theta();
    match decide(uncertainty.total, theta) {
        RoutingMode::Autonomous => Ok(RouteResult::Completed(RoutingOutcome {
            case_id: case.case_id.clone(),
            mode: RoutingMode::Autonomous,
            preliminary: preliminary.clone(),
            final_decision: format_decision(&preliminary.per_task_scores),
            uncertainty: uncertainty.clone(),
            theta_before: theta,
            theta_after: theta,
            clinician_modified: None,
        })),
        RoutingMode::Escalated => {
            let pending = PendingEscalation {
                case_id: case.case_id.clone(),
                preliminary: preliminary.clone(),
                uncertainty: uncertainty.clone(),
                theta_before: theta,
            };
            match clinician.review(preliminary, uncertainty, case) {
                Ok(verdict) => Ok(RouteResult::Completed(resolve(&pending, &verdict, state))),
                Err(ClinicianError::Unavailable) => Ok(RouteResult::Parked(pending)),
                Err(e) => Err(e),
            }
        }
    }
}
