//! Specialist agents: one modality in, one finding out.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::confidence::generation_confidence;
use super::llm::{ChatMessage, ChatModel};
use super::reasoning::PromptTemplate;
use crate::memory::ContextBundle;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("specialist {0} timed out")]
    Timeout(String),
    #[error("specialist {id}: {message}")]
    Failed { id: String, message: String },
}

/// What a specialist reports; the dispatcher stamps identity and time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistOutput {
    pub diagnosis_text: String,
    pub confidence: f64,
}

#[async_trait]
pub trait SpecialistAgent: Send + Sync {
    fn specialist_id(&self) -> &str;

    fn accepted_modality(&self) -> &str;

    async fn analyze(
        &self,
        payload: &str,
        context: &ContextBundle,
    ) -> Result<SpecialistOutput, AgentError>;
}

/// Registered specialists keyed by id.
#[derive(Clone, Default)]
pub struct SpecialistRegistry {
    agents: BTreeMap<String, Arc<dyn SpecialistAgent>>,
}

impl SpecialistRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, agent: Arc<dyn SpecialistAgent>) -> &mut Self {
        self.agents.insert(agent.specialist_id().to_string(), agent);
        self
    }

    pub fn with(mut self, agent: Arc<dyn SpecialistAgent>) -> Self {
        self.register(agent);
        self
    }

    pub fn get(&self, id: &str) -> Option<&Arc<dyn SpecialistAgent>> {
        self.agents.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.agents.contains_key(id)
    }

    /// specialist id -> accepted modality
    pub fn modalities(&self) -> BTreeMap<String, String> {
        self.agents
            .iter()
            .map(|(id, a)| (id.clone(), a.accepted_modality().to_string()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }
}

/// Fixture specialist with configurable latency and failures.
#[derive(Debug)]
pub struct StubSpecialist {
    pub id: String,
    pub modality: String,
    pub text: String,
    pub confidence: f64,
    pub latency: Duration,
    /// Number of initial calls that fail before it starts answering.
    pub failures_before_success: u32,
    calls: AtomicU32,
}

impl StubSpecialist {
    pub fn new(
        id: impl Into<String>,
        modality: impl Into<String>,
        text: impl Into<String>,
        confidence: f64,
    ) -> Self {
        Self {
            id: id.into(),
            modality: modality.into(),
            text: text.into(),
            confidence,
            latency: Duration::ZERO,
            failures_before_success: 0,
            calls: AtomicU32::new(0),
        }
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn failing(mut self, times: u32) -> Self {
        self.failures_before_success = times;
        self
    }

    pub fn calls(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl SpecialistAgent for StubSpecialist {
    fn specialist_id(&self) -> &str {
        &self.id
    }

    fn accepted_modality(&self) -> &str {
        &self.modality
    }

    async fn analyze(&self, _: &str, _: &ContextBundle) -> Result<SpecialistOutput, AgentError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        if n < self.failures_before_success {
            return Err(AgentError::Failed {
                id: self.id.clone(),
                message: "stub failure".into(),
            });
        }
        Ok(SpecialistOutput {
            diagnosis_text: self.text.clone(),
            confidence: self.confidence,
        })
    }
}

#[derive(Debug, Deserialize)]
struct PayloadFinding {
    diagnosis: String,
    #[serde(default)]
    confidence: Option<f64>,
    #[serde(default)]
    token_probs: Option<Vec<f64>>,
}

/// Reads a precomputed finding from the payload:
/// `{"diagnosis": "...", "confidence": 0.8}` or
/// `{"diagnosis": "...", "token_probs": [...]}`.
///
/// Used for replaying upstream model outputs and by the synthetic harness.
#[derive(Debug, Clone)]
pub struct PayloadSpecialist {
    pub id: String,
    pub modality: String,
}

impl PayloadSpecialist {
    pub fn new(id: impl Into<String>, modality: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            modality: modality.into(),
        }
    }
}

#[async_trait]
impl SpecialistAgent for PayloadSpecialist {
    fn specialist_id(&self) -> &str {
        &self.id
    }

    fn accepted_modality(&self) -> &str {
        &self.modality
    }

    async fn analyze(&self, payload: &str, _: &ContextBundle) -> Result<SpecialistOutput, AgentError> {
        let fail = |message: String| AgentError::Failed {
            id: self.id.clone(),
            message,
        };
        let p: PayloadFinding =
            serde_json::from_str(payload).map_err(|e| fail(format!("bad payload: {e}")))?;
        let confidence = match (p.confidence, p.token_probs) {
            (Some(c), _) => c,
            (None, Some(probs)) => {
                generation_confidence(&probs).map_err(|e| fail(e.to_string()))?
            }
            (None, None) => return Err(fail("payload has neither confidence nor token_probs".into())),
        };
        Ok(SpecialistOutput {
            diagnosis_text: p.diagnosis,
            confidence,
        })
    }
}

/// Chat-model-backed specialist. Confidence comes from the returned token
/// probabilities when available, else `fallback_confidence`.
pub struct LlmSpecialist {
    pub id: String,
    pub modality: String,
    pub template: PromptTemplate,
    pub fallback_confidence: Option<f64>,
    model: Arc<dyn ChatModel>,
}

impl LlmSpecialist {
    pub fn new(
        id: impl Into<String>,
        modality: impl Into<String>,
        model: Arc<dyn ChatModel>,
    ) -> Self {
        Self {
            id: id.into(),
            modality: modality.into(),
            template: PromptTemplate::default_specialist(),
            fallback_confidence: None,
            model,
        }
    }
}

pub(crate) fn render_context(context: &ContextBundle) -> String {
    let mut s = String::new();
    for (k, v) in &context.clinical_info {
        s.push_str(&format!("{k}: {v}\n"));
    }
    s
}

#[async_trait]
impl SpecialistAgent for LlmSpecialist {
    fn specialist_id(&self) -> &str {
        &self.id
    }

    fn accepted_modality(&self) -> &str {
        &self.modality
    }

    async fn analyze(
        &self,
        payload: &str,
        context: &ContextBundle,
    ) -> Result<SpecialistOutput, AgentError> {
        let fail = |message: String| AgentError::Failed {
            id: self.id.clone(),
            message,
        };
        let mut vars = BTreeMap::new();
        vars.insert("modality", self.modality.clone());
        vars.insert("payload", payload.to_string());
        vars.insert("context", render_context(context));
        let prompt = self.template.render(&vars).map_err(|e| fail(e.to_string()))?;
        let reply = self
            .model
            .complete(&[ChatMessage::user(prompt)])
            .await
            .map_err(|e| fail(e.to_string()))?;
        let confidence = match (&reply.token_probs, self.fallback_confidence) {
            (Some(p), _) => generation_confidence(p).map_err(|e| fail(e.to_string()))?,
            (None, Some(c)) => c,
            (None, None) => return Err(fail("model returned no token probabilities".into())),
        };
        Ok(SpecialistOutput {
            diagnosis_text: reply.text.trim().to_string(),
            confidence,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::llm::CannedChat;
    use crate::model::Case;

    fn ctx() -> ContextBundle {
        ContextBundle::from_parts(&Case::new("c").with_info("age", "70"), vec![], vec![])
    }

    #[tokio::test]
    async fn payload_specialist_reads_confidence_or_token_probs() {
        let s = PayloadSpecialist::new("echo", "ECHO");
        let out = s
            .analyze(r#"{"diagnosis":"EF 30%","confidence":0.7}"#, &ctx())
            .await
            .unwrap();
        assert_eq!(out.confidence, 0.7);
        let out = s
            .analyze(r#"{"diagnosis":"EF 30%","token_probs":[0.5,0.5]}"#, &ctx())
            .await
            .unwrap();
        assert!((out.confidence - 0.5).abs() < 1e-12);
        assert!(s.analyze("not json", &ctx()).await.is_err());
        assert!(s.analyze(r#"{"diagnosis":"x"}"#, &ctx()).await.is_err());
    }

    #[tokio::test]
    async fn llm_specialist_uses_token_probs() {
        let chat = CannedChat {
            reply: " sinus tachycardia ".into(),
            token_probs: Some(vec![0.9, 0.4, 0.7]),
        };
        let s = LlmSpecialist::new("ecg", "ECG", Arc::new(chat));
        let out = s.analyze("raw ecg", &ctx()).await.unwrap();
        assert_eq!(out.diagnosis_text, "sinus tachycardia");
        assert!((out.confidence - (0.9f64 * 0.4 * 0.7).powf(1.0 / 3.0)).abs() < 1e-12);

        let s = LlmSpecialist::new("ecg", "ECG", Arc::new(CannedChat::new("x")));
        assert!(s.analyze("raw", &ctx()).await.is_err());
    }

    #[tokio::test]
    async fn stub_fails_then_succeeds() {
        let s = StubSpecialist::new("a", "ECG", "t", 0.5).failing(1);
        assert!(s.analyze("", &ctx()).await.is_err());
        assert!(s.analyze("", &ctx()).await.is_ok());
        assert_eq!(s.calls(), 2);
    }
}
