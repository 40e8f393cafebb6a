//! Engine configuration: file format, environment overrides and pipeline
//! assembly.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agents::{
    ActivationTable, ChatClient, ChatModel, DispatchPolicy, FixedReasoner, LlmConfig,
    LlmReasoner, LlmSpecialist, PayloadSpecialist, PromptTemplate, ReasoningAgent,
    SpecialistRegistry, TaskSource, WeightSensitiveReasoner,
};
use crate::conflict::SharedDirectionConfig;
use crate::embedding::{EmbeddingBackend, HashingEmbedder, HttpEmbeddingClient, DEFAULT_HASHING_DIM};
use crate::fusion::AnnotationMode;
use crate::memory::ContextStore;
use crate::model::UncertaintyComponent;
use crate::pipeline::Pipeline;
use crate::routing::{UncertaintyConfig, DEFAULT_THETA};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("environment variable {name}: {message}")]
    Env { name: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum EmbeddingSettings {
    Hashing {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Http {
        url: String,
    },
}

fn default_dim() -> usize {
    DEFAULT_HASHING_DIM
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self::Hashing { dim: DEFAULT_HASHING_DIM }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecialistKind {
    /// Reads `{"diagnosis", "confidence" | "token_probs"}` from the payload.
    #[default]
    Payload,
    /// Prompts the configured chat model.
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistSettings {
    pub id: String,
    pub modality: String,
    #[serde(default)]
    pub kind: SpecialistKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<PromptTemplate>,
    /// Used when the chat model returns no token probabilities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReasonerSettings {
    WeightSensitive {
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Fixed {
        text: String,
    },
    Llm,
}

impl Default for ReasonerSettings {
    fn default() -> Self {
        Self::WeightSensitive { noise: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    #[default]
    Declared,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchSettings {
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for DispatchSettings {
    fn default() -> Self {
        let p = DispatchPolicy::default();
        Self {
            timeout_ms: p.timeout.as_millis() as u64,
            retries: p.retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    #[serde(default)]
    pub embedding: EmbeddingSettings,
    #[serde(default = "default_specialists")]
    pub specialists: Vec<SpecialistSettings>,
    /// Empty means every specialist runs whenever its modality is present.
    #[serde(default)]
    pub activation: ActivationTable,
    #[serde(default)]
    pub reasoner: ReasonerSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_template: Option<PromptTemplate>,
    #[serde(default)]
    pub tasks: TaskMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_template: Option<PromptTemplate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<LlmConfig>,
    #[serde(default)]
    pub dispatch: DispatchSettings,
    #[serde(default = "default_theta")]
    pub theta_init: f64,
    #[serde(default)]
    pub uncertainty: UncertaintyConfig,
    #[serde(default)]
    pub annotation: AnnotationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_direction: Option<SharedDirectionConfig>,
}

fn default_theta() -> f64 {
    DEFAULT_THETA
}

fn default_specialists() -> Vec<SpecialistSettings> {
    [("ecg_agent", "ECG"), ("echo_agent", "ECHO"), ("cmr_agent", "CMR")]
        .into_iter()
        .map(|(id, modality)| SpecialistSettings {
            id: id.into(),
            modality: modality.into(),
            kind: SpecialistKind::Payload,
            template: None,
            fallback_confidence: None,
        })
        .collect()
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            embedding: EmbeddingSettings::default(),
            specialists: default_specialists(),
            activation: ActivationTable::default(),
            reasoner: ReasonerSettings::default(),
            reasoning_template: None,
            tasks: TaskMode::Declared,
            task_template: None,
            llm: None,
            dispatch: DispatchSettings::default(),
            theta_init: DEFAULT_THETA,
            uncertainty: UncertaintyConfig::default(),
            annotation: AnnotationMode::Weighted,
            shared_direction: None,
        }
    }
}

/// Environment variables read by [`EngineConfig::apply_env`].
pub const ENV_VARS: [&str; 10] = [
    "MEDROUTE_THETA_INIT",
    "MEDROUTE_LLM_ENDPOINT",
    "MEDROUTE_LLM_MODEL",
    "MEDROUTE_LLM_API_KEY_ENV",
    "MEDROUTE_EMBEDDING_URL",
    "MEDROUTE_LAMBDA_CONF",
    "MEDROUTE_LAMBDA_CONFLICT",
    "MEDROUTE_LAMBDA_COHERENCE",
    "MEDROUTE_DISPATCH_TIMEOUT_MS",
    "MEDROUTE_DISPATCH_RETRIES",
];

fn parse_env<T: std::str::FromStr>(name: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.trim().parse().map_err(|e: T::Err| ConfigError::Env {
        name: name.into(),
        message: e.to_string(),
    })
}

impl EngineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Applies overrides from `lookup` (normally `std::env::var`).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = lookup("MEDROUTE_THETA_INIT") {
            self.theta_init = parse_env("MEDROUTE_THETA_INIT", &v)?;
        }
        let llm_fields = [
            "MEDROUTE_LLM_ENDPOINT",
            "MEDROUTE_LLM_MODEL",
            "MEDROUTE_LLM_API_KEY_ENV",
        ]
        .map(|n| lookup(n));
        if llm_fields.iter().any(Option::is_some) {
            let llm = self.llm.get_or_insert_with(|| LlmConfig {
                endpoint: String::new(),
                model: String::new(),
                temperature: 0.0,
                headers: Default::default(),
                api_key_env: None,
                request_logprobs: false,
                timeout_ms: 60_000,
            });
            let [endpoint, model, key_env] = llm_fields;
            if let Some(v) = endpoint {
                llm.endpoint = v;
            }
            if let Some(v) = model {
                llm.model = v;
            }
            if let Some(v) = key_env {
                llm.api_key_env = Some(v);
            }
        }
        if let Some(url) = lookup("MEDROUTE_EMBEDDING_URL") {
            self.embedding = EmbeddingSettings::Http { url };
        }
        for (name, comp) in [
            ("MEDROUTE_LAMBDA_CONF", UncertaintyComponent::Conf),
            ("MEDROUTE_LAMBDA_CONFLICT", UncertaintyComponent::Conflict),
            ("MEDROUTE_LAMBDA_COHERENCE", UncertaintyComponent::Coherence),
        ] {
            if let Some(v) = lookup(name) {
                self.uncertainty.lambdas.insert(comp, parse_env(name, &v)?);
            }
        }
        if let Some(v) = lookup("MEDROUTE_DISPATCH_TIMEOUT_MS") {
            self.dispatch.timeout_ms = parse_env("MEDROUTE_DISPATCH_TIMEOUT_MS", &v)?;
        }
        if let Some(v) = lookup("MEDROUTE_DISPATCH_RETRIES") {
            self.dispatch.retries = parse_env("MEDROUTE_DISPATCH_RETRIES", &v)?;
        }
        Ok(())
    }

    /// Loads `path` (or the defaults) and applies the process environment.
    pub fn resolve(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply_env(|n| std::env::var(n).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn needs_llm(&self) -> bool {
        self.tasks == TaskMode::Llm
            || matches!(self.reasoner, ReasonerSettings::Llm)
            || self.specialists.iter().any(|s| s.kind == SpecialistKind::Llm)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.theta_init.is_finite() && (0.0..=1.0).contains(&self.theta_init)) {
            return bad(format!("theta_init = {} must lie in [0, 1]", self.theta_init));
        }
        if self.specialists.is_empty() {
            return bad("at least one specialist is required".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.specialists {
            if s.id.is_empty() || s.modality.is_empty() {
                return bad("specialist id and modality must be non-empty".into());
            }
            if !ids.insert(&s.id) {
                return bad(format!("duplicate specialist id {:?}", s.id));
            }
            if let Some(c) = s.fallback_confidence {
                if !(0.0..=1.0).contains(&c) {
                    return bad(format!("{}: fallback_confidence {c} outside [0, 1]", s.id));
                }
            }
        }
        for (c, l) in &self.uncertainty.lambdas {
            if !(l.is_finite() && *l >= 0.0) {
                return bad(format!("lambda for {c:?} must be non-negative, got {l}"));
            }
        }
        if self.dispatch.timeout_ms == 0 {
            return bad("dispatch.timeout_ms must be positive".into());
        }
        if let EmbeddingSettings::Hashing { dim } = self.embedding {
            if dim < 2 {
                return bad("hashing embedding dim must be at least 2".into());
            }
        }
        if self.needs_llm() {
            match &self.llm {
                Some(l) if !l.endpoint.is_empty() && !l.model.is_empty() => {}
                _ => return bad("an llm endpoint and model are required by this config".into()),
            }
        }
        Ok(())
    }

    fn chat_model(&self) -> Result<Option<Arc<dyn ChatModel>>, ConfigError> {
        if !self.needs_llm() {
            return Ok(None);
        }
        let cfg = self
            .llm
            .clone()
            .ok_or_else(|| ConfigError::Invalid("llm settings missing".into()))?;
        let client = ChatClient::new(cfg).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(Some(Arc::new(client)))
    }

    pub fn embedder(&self) -> Arc<dyn EmbeddingBackend> {
        match &self.embedding {
            EmbeddingSettings::Hashing { dim } => Arc::new(HashingEmbedder::new(*dim)),
            EmbeddingSettings::Http { url } => Arc::new(HttpEmbeddingClient::new(url.clone())),
        }
    }

    pub fn build_pipeline(&self, store: Arc<ContextStore>) -> Result<Pipeline, ConfigError> {
        self.validate()?;
        let model = self.chat_model()?;
        let need_model = || {
            model
                .clone()
                .ok_or_else(|| ConfigError::Invalid("llm settings missing".into()))
        };

        let mut registry = SpecialistRegistry::new();
        for s in &self.specialists {
            match s.kind {
                SpecialistKind::Payload => {
                    registry.register(Arc::new(PayloadSpecialist::new(&s.id, &s.modality)));
                }
                SpecialistKind::Llm => {
                    let mut agent = LlmSpecialist::new(&s.id, &s.modality, need_model()?);
                    if let Some(t) = &s.template {
                        agent.template = t.clone();
                    }
                    agent.fallback_confidence = s.fallback_confidence;
                    registry.register(Arc::new(agent));
                }
            }
        }

        let mut activation = self.activation.clone();
        if activation.rules.is_empty() && activation.defaults.is_empty() {
            for s in &self.specialists {
                activation
                    .defaults
                    .entry(s.modality.clone())
                    .or_default()
                    .insert(s.id.clone());
            }
        }
        activation.validate(&registry).map_err(ConfigError::Invalid)?;

        let reasoner: Arc<dyn ReasoningAgent> = match &self.reasoner {
            ReasonerSettings::WeightSensitive { noise, seed } => {
                Arc::new(WeightSensitiveReasoner::new(*noise, *seed))
            }
            ReasonerSettings::Fixed { text } => Arc::new(FixedReasoner::new(text.clone())),
            ReasonerSettings::Llm => Arc::new(LlmReasoner::new("llm-reasoner", need_model()?)),
        };

        let mut pipeline = Pipeline::new(store, registry, activation, reasoner, self.embedder());
        if let Some(t) = &self.reasoning_template {
            pipeline.template = t.clone();
        }
        if self.tasks == TaskMode::Llm {
            pipeline.task_source = TaskSource::Llm {
                model: need_model()?,
                template: self
                    .task_template
                    .clone()
                    .unwrap_or_else(PromptTemplate::default_task_identification),
            };
        }
        pipeline.shared_direction = self.shared_direction.clone();
        pipeline.uncertainty = self.uncertainty.clone();
        pipeline.annotation = self.annotation;
        pipeline.dispatch_policy = DispatchPolicy {
            timeout: Duration::from_millis(self.dispatch.timeout_ms),
            retries: self.dispatch.retries,
        };
        Ok(pipeline)
    }
}
