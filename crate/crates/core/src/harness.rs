//! Synthetic scenarios and sequential routing experiments.
//!
//! Cases carry a latent difficulty that drives specialist accuracy,
//! confidence and phrasing agreement. Specialists replay their finding from
//! the payload, the reasoner is the weight-sensitive mock, and embeddings come
//! from the hashing backend, so every run is a pure function of the scenario.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agents::{
    ActivationTable, PayloadSpecialist, SpecialistRegistry, WeightSensitiveReasoner,
};
use crate::clock::LogicalClock;
use crate::embedding::HashingEmbedder;
use crate::fusion::AnnotationMode;
use crate::memory::{AuditSink, ContextStore, FileAuditLog, InMemorySink, MemoryError};
use crate::metrics::{evaluate_outcomes, MetricsReport, SplitEvaluation};
use crate::model::{Case, RoutingMode, RoutingOutcome, TaskKind};
use crate::pipeline::Pipeline;
use crate::routing::{
    ClinicianAgent, ComponentSubset, ScriptedClinician, SimulatedClinician, ThresholdState,
    UncertaintyConfig, DEFAULT_THETA,
};

/// Interpolates between an easy-case and a hard-case value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub easy: f64,
    pub hard: f64,
}

impl Span {
    pub fn at(&self, difficulty: f64) -> f64 {
        self.easy + (self.hard - self.easy) * difficulty
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistProfile {
    pub id: String,
    pub modality: String,
    /// Probability that the case carries this modality.
    #[serde(default = "one")]
    pub presence: f64,
    /// Probability the finding points at the true labels.
    pub accuracy: Span,
    /// Mean confidence of a correct finding.
    pub confidence: Span,
    /// Subtracted from the confidence of an incorrect finding.
    #[serde(default)]
    pub wrong_penalty: f64,
    /// Half-width of the uniform confidence jitter.
    #[serde(default)]
    pub jitter: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClinicianMode {
    /// Replies with ground truth; modified iff any preliminary label was wrong.
    Simulated,
    AlwaysAccept,
    AlwaysModify,
    /// Cycles through the script; `true` means modify.
    Scripted(Vec<bool>),
}

impl ClinicianMode {
    pub fn build(&self) -> Box<dyn ClinicianAgent> {
        match self {
            Self::Simulated => Box::new(SimulatedClinician),
            Self::AlwaysAccept => Box::new(ScriptedClinician::always_accept()),
            Self::AlwaysModify => Box::new(ScriptedClinician::always_modify()),
            Self::Scripted(s) => Box::new(ScriptedClinician::new(s.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub n_cases: usize,
    pub seed: u64,
    pub tasks: Vec<TaskKind>,
    /// Probability of a positive label, per task.
    pub prevalence: f64,
    pub specialists: Vec<SpecialistProfile>,
    /// Difficulty is `min + (max - min) * u^exponent`, `u` uniform.
    #[serde(default = "default_difficulty")]
    pub difficulty: DifficultyConfig,
    /// Filler-token agreement between correct findings on the easiest case;
    /// 1 makes their texts identical, 0 draws every token privately.
    pub agreement: f64,
    /// Scales the agreement of incorrect findings.
    #[serde(default)]
    pub wrong_agreement: f64,
    #[serde(default = "default_tokens")]
    pub text_tokens: usize,
    #[serde(default = "default_vocab")]
    pub shared_vocab: usize,
    pub reasoner_noise: f64,
    pub clinician: ClinicianMode,
    #[serde(default = "default_theta")]
    pub theta_init: f64,
    #[serde(default)]
    pub uncertainty: UncertaintyConfig,
    #[serde(default)]
    pub annotation: AnnotationMode,
    #[serde(default = "yes")]
    pub shuffle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyConfig {
    pub min: f64,
    pub max: f64,
    pub exponent: f64,
}

fn default_difficulty() -> DifficultyConfig {
    DifficultyConfig {
        min: 0.0,
        max: 1.0,
        exponent: 1.0,
    }
}

fn default_tokens() -> usize {
    8
}

fn default_vocab() -> usize {
    400
}

fn default_theta() -> f64 {
    DEFAULT_THETA
}

fn yes() -> bool {
    true
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
}

impl ScenarioConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let unit = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        if self.n_cases == 0 {
            return bad("n_cases must be at least 1".into());
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        if self.specialists.is_empty() {
            return bad("at least one specialist profile is required".into());
        }
        if self.text_tokens == 0 || self.shared_vocab == 0 {
            return bad("text_tokens and shared_vocab must be positive".into());
        }
        for (name, v) in [
            ("prevalence", self.prevalence),
            ("agreement", self.agreement),
            ("wrong_agreement", self.wrong_agreement),
            ("reasoner_noise", self.reasoner_noise),
            ("theta_init", self.theta_init),
            ("difficulty.min", self.difficulty.min),
            ("difficulty.max", self.difficulty.max),
        ] {
            if !unit(v) {
                return bad(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        if !(self.difficulty.exponent.is_finite() && self.difficulty.exponent > 0.0) {
            return bad("difficulty.exponent must be positive".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        let mut modalities = std::collections::BTreeSet::new();
        for p in &self.specialists {
            if !ids.insert(&p.id) {
                return bad(format!("duplicate specialist id {:?}", p.id));
            }
            if !modalities.insert(&p.modality) {
                return bad(format!("modality {:?} has two specialists", p.modality));
            }
            for (name, v) in [
                ("presence", p.presence),
                ("accuracy.easy", p.accuracy.easy),
                ("accuracy.hard", p.accuracy.hard),
                ("confidence.easy", p.confidence.easy),
                ("confidence.hard", p.confidence.hard),
                ("wrong_penalty", p.wrong_penalty),
                ("jitter", p.jitter),
            ] {
                if !unit(v) {
                    return bad(format!("{}: {name} = {v} must lie in [0, 1]", p.id));
                }
            }
        }
        Ok(())
    }
}

fn private_token(specialist: usize, rng: &mut ChaCha8Rng) -> String {
    format!("p{specialist}x{}", rng.random_range(0..100_000u32))
}

/// Deterministic case stream for `cfg`, shuffled when `cfg.shuffle`.
pub fn generate_cases(cfg: &ScenarioConfig) -> Vec<Case> {
    let width = cfg.n_cases.to_string().len().max(4);
    let mut cases = Vec::with_capacity(cfg.n_cases);
    for n in 0..cfg.n_cases {
        // Stream 1 is the shuffle; case n draws from stream n + 2 alone.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(n as u64 + 2);
        let u: f64 = rng.random();
        let d = cfg.difficulty.min + (cfg.difficulty.max - cfg.difficulty.min) * u.powf(cfg.difficulty.exponent);
        let truth: BTreeMap<TaskKind, bool> = cfg
            .tasks
            .iter()
            .map(|t| (t.clone(), rng.random::<f64>() < cfg.prevalence))
            .collect();
        let consensus: Vec<String> = (0..cfg.text_tokens)
            .map(|_| format!("s{}", rng.random_range(0..cfg.shared_vocab)))
            .collect();

        let mut case = Case::new(format!("case-{:0width$}", n + 1))
            .with_info("age", rng.random_range(35..90u32).to_string())
            .with_info("sex", if rng.random::<bool>() { "female" } else { "male" })
            .with_tasks(cfg.tasks.clone())
            .with_ground_truth(truth.clone());

        let present: Vec<bool> = cfg
            .specialists
            .iter()
            .map(|p| rng.random::<f64>() < p.presence)
            .collect();
        let any_present = present.iter().any(|x| *x);
        for (i, p) in cfg.specialists.iter().enumerate() {
            // Every case keeps at least its first modality.
            if !(present[i] || (!any_present && i == 0)) {
                continue;
            }
            let correct = rng.random::<f64>() < p.accuracy.at(d);
            let mut c = p.confidence.at(d);
            if !correct {
                c -= p.wrong_penalty;
            }
            c += p.jitter * (2.0 * rng.random::<f64>() - 1.0);
            let c = c.clamp(0.01, 0.99);

            let agree = cfg.agreement * (1.0 - d) * if correct { 1.0 } else { cfg.wrong_agreement };
            let mut words: Vec<String> = consensus
                .iter()
                .map(|w| {
                    if rng.random::<f64>() < agree {
                        w.clone()
                    } else {
                        private_token(i, &mut rng)
                    }
                })
                .collect();
            for (task, label) in &truth {
                let shown = if correct { *label } else { !*label };
                words.push(format!("{task}:{}", if shown { "positive" } else { "negative" }));
            }
            let payload = json!({"diagnosis": words.join(" "), "confidence": c});
            case = case.with_payload(p.modality.clone(), payload.to_string());
        }
        cases.push(case);
    }
    if cfg.shuffle {
        let mut shuffler = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffler.set_stream(1);
        cases.shuffle(&mut shuffler);
    }
    cases
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaMode {
    Fixed,
    Adaptive,
}

impl FromStr for ThetaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "adaptive" => Ok(Self::Adaptive),
            other => Err(format!("unknown theta mode {other:?} (fixed | adaptive)")),
        }
    }
}

/// One single-variable change for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Annotation(AnnotationMode),
    Components(ComponentSubset),
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Annotation(m) => m.as_str(),
            Self::Components(c) => c.as_str(),
        }
    }

    pub fn apply(&self, cfg: &mut ScenarioConfig) {
        match self {
            Self::Annotation(m) => cfg.annotation = *m,
            Self::Components(c) => {
                cfg.uncertainty.enabled_components = c.components().into_iter().collect()
            }
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(m) = s.parse::<AnnotationMode>() {
            return Ok(Self::Annotation(m));
        }
        s.parse::<ComponentSubset>()
            .map(Self::Components)
            .map_err(|_| {
                format!(
                    "unknown mode {s:?} (weighted, no_annotation, inverse_weighted, full, \
                     no_conf, no_conflict, no_coherence, conf_only)"
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub case_index: usize,
    pub case_id: String,
    pub u_total: Option<f64>,
    pub theta_before: f64,
    pub mode: Option<RoutingMode>,
    pub clinician_modified: Option<bool>,
    pub theta_after: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub label: String,
    pub theta_mode: ThetaMode,
    /// The U distribution is a synthetic calibration, not clinical data.
    pub note: String,
    pub config: ScenarioConfig,
    pub n_cases: usize,
    pub n_autonomous: usize,
    pub n_escalated: usize,
    pub n_errored: usize,
    pub escalation_rate: f64,
    pub theta_initial: f64,
    pub theta_final: f64,
    pub trace: Vec<TraceEntry>,
    pub outcomes: Vec<RoutingOutcome>,
    pub evaluation: BTreeMap<TaskKind, SplitEvaluation>,
    pub metrics: MetricsReport,
    /// Mean over tasks with a defined AIR.
    pub mean_air: Option<f64>,
    pub mean_f1: Option<f64>,
}

impl ExperimentReport {
    pub fn theta_trajectory(&self) -> Vec<f64> {
        std::iter::once(self.theta_initial)
            .chain(self.trace.iter().map(|t| t.theta_after))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "case_index",
            "case_id",
            "u_total",
            "theta_before",
            "mode",
            "clinician_modified",
            "theta_after",
        ])?;
        for t in &self.trace {
            w.write_record([
                t.case_index.to_string(),
                t.case_id.clone(),
                t.u_total.map(|u| u.to_string()).unwrap_or_default(),
                t.theta_before.to_string(),
                match t.mode {
                    Some(RoutingMode::Autonomous) => "autonomous".into(),
                    Some(RoutingMode::Escalated) => "escalated".into(),
                    None => "error".into(),
                },
                t.clinician_modified.map(|m| m.to_string()).unwrap_or_default(),
                t.theta_after.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Pipeline wired for synthetic scenarios.
pub fn scenario_pipeline(cfg: &ScenarioConfig, store: Arc<ContextStore>) -> Pipeline {
    let mut registry = SpecialistRegistry::new();
    let mut activation = ActivationTable::default();
    for p in &cfg.specialists {
        registry.register(Arc::new(PayloadSpecialist::new(p.id.clone(), p.modality.clone())));
        activation
            .defaults
            .entry(p.modality.clone())
            .or_default()
            .insert(p.id.clone());
    }
    let mut pipeline = Pipeline::new(
        store,
        registry,
        activation,
        Arc::new(WeightSensitiveReasoner::new(cfg.reasoner_noise, cfg.seed)),
        Arc::new(HashingEmbedder::default()),
    );
    pipeline.uncertainty = cfg.uncertainty.clone();
    pipeline.annotation = cfg.annotation;
    pipeline
}

/// Runs `cases` in order through one pipeline, routing each against a
/// threshold that is either frozen at `theta` or adapted from it.
pub fn run_experiment(
    cfg: &ScenarioConfig,
    cases: &[Case],
    mode: ThetaMode,
    theta: f64,
    label: &str,
    audit_log: Option<&Path>,
) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let sink: Box<dyn AuditSink> = match audit_log {
        Some(p) => Box::new(FileAuditLog::open(p)?),
        None => Box::new(InMemorySink),
    };
    let store = Arc::new(ContextStore::with_sink(sink, Arc::new(LogicalClock::new())));
    let pipeline = scenario_pipeline(cfg, store);
    let clinician = cfg.clinician.build();
    let mut state = match mode {
        ThetaMode::Fixed => ThresholdState::with_step(theta, 0.0),
        ThetaMode::Adaptive => ThresholdState::new(theta),
    };
    let theta_initial = state.theta();

    let runtime = tokio::runtime::Builder::new_current_thread()
        .enable_time()
        .build()?;
    let mut trace = Vec::with_capacity(cases.len());
    let mut outcomes = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let theta_before = state.theta();
        let routed = runtime
            .block_on(pipeline.evaluate(case))
            .and_then(|eval| pipeline.route_case(&eval, &mut state, clinician.as_ref()));
        match routed {
            Ok(crate::routing::RouteResult::Completed(o)) => {
                trace.push(TraceEntry {
                    case_index: i,
                    case_id: case.case_id.clone(),
                    u_total: Some(o.uncertainty.total),
                    theta_before,
                    mode: Some(o.mode),
                    clinician_modified: o.clinician_modified,
                    theta_after: o.theta_after,
                    error: None,
                });
                outcomes.push(o);
            }
            Ok(crate::routing::RouteResult::Parked(p)) => {
                // Synthetic clinicians always answer; a parked case is an error here.
                trace.push(TraceEntry {
                    case_index: i,
                    case_id: case.case_id.clone(),
                    u_total: Some(p.uncertainty.total),
                    theta_before,
                    mode: None,
                    clinician_modified: None,
                    theta_after: state.theta(),
                    error: Some("escalation parked without a clinician".into()),
                });
            }
            Err(e) => {
                tracing::warn!(case = %case.case_id, error = %e, "case failed");
                trace.push(TraceEntry {
                    case_index: i,
                    case_id: case.case_id.clone(),
                    u_total: None,
                    theta_before,
                    mode: None,
                    clinician_modified: None,
                    theta_after: state.theta(),
                    error: Some(e.to_string()),
                });
            }
        }
    }

    let truths: BTreeMap<&str, &BTreeMap<TaskKind, bool>> = cases
        .iter()
        .filter_map(|c| c.ground_truth.as_ref().map(|t| (c.case_id.as_str(), t)))
        .collect();
    let evaluated = evaluate_outcomes(
        outcomes
            .iter()
            .filter_map(|o| truths.get(o.case_id.as_str()).map(|t| (o, *t))),
    );
    let n_escalated = outcomes.iter().filter(|o| o.mode == RoutingMode::Escalated).count();
    let n_autonomous = outcomes.len() - n_escalated;
    let n_errored = cases.len() - outcomes.len();
    let mean_air = mean(evaluated.values().filter_map(|(s, _)| s.air));
    let mean_f1 = mean(evaluated.values().filter_map(|(_, m)| m.f1));
    let (evaluation, metrics) = evaluated
        .into_iter()
        .map(|(t, (s, m))| ((t.clone(), s), (t, m)))
        .unzip();

    Ok(ExperimentReport {
        scenario: cfg.name.clone(),
        label: label.to_string(),
        theta_mode: mode,
        note: "synthetic scenario; uncertainty distribution is an artifact calibration".into(),
        config: cfg.clone(),
        n_cases: cases.len(),
        n_autonomous,
        n_escalated,
        n_errored,
        escalation_rate: n_escalated as f64 / cases.len().max(1) as f64,
        theta_initial,
        theta_final: state.theta(),
        trace,
        outcomes,
        evaluation,
        metrics,
        mean_air,
        mean_f1,
    })
}

pub fn run_fixed_threshold(
    cfg: &ScenarioConfig,
    cases: &[Case],
    theta: f64,
) -> Result<ExperimentReport, HarnessError> {
    run_experiment(cfg, cases, ThetaMode::Fixed, theta, "fixed", None)
}

pub fn run_adaptive(
    cfg: &ScenarioConfig,
    cases: &[Case],
    theta_init: f64,
) -> Result<ExperimentReport, HarnessError> {
    run_experiment(cfg, cases, ThetaMode::Adaptive, theta_init, "adaptive", None)
}

/// Same case stream, one setting changed, threshold restarted from the
/// scenario's initial value.
pub fn run_ablation(
    cfg: &ScenarioConfig,
    cases: &[Case],
    variant: Variant,
    mode: ThetaMode,
) -> Result<ExperimentReport, HarnessError> {
    let mut cfg = cfg.clone();
    variant.apply(&mut cfg);
    run_experiment(&cfg, cases, mode, cfg.theta_init, variant.label(), None)
}
