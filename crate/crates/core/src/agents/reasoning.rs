//! Reasoning agents, prompt templates and the structured-output parser.
//!
//! Agents must answer with numbered steps (`1. ...`) followed by one or more
//! `DECISION: <task>=<score>` lines (pairs may also be joined with `;`).

use std::collections::BTreeMap;
use std::sync::{Arc, LazyLock};

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::llm::{ChatMessage, ChatModel, LlmError};
use crate::model::{format_decision, ReasoningChain, TaskKind};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TemplateError {
    #[error("template {template}: unresolved placeholder {{{{{name}}}}}")]
    Unresolved { template: String, name: String },
}

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").unwrap());

/// Prompt body with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            template_id: id.into(),
            body: body.into(),
        }
    }

    pub fn placeholders(&self) -> Vec<String> {
        PLACEHOLDER
            .captures_iter(&self.body)
            .map(|c| c[1].to_string())
            .collect()
    }

    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        if let Some(name) = self
            .placeholders()
            .into_iter()
            .find(|n| !vars.contains_key(n.as_str()))
        {
            return Err(TemplateError::Unresolved {
                template: self.template_id.clone(),
                name,
            });
        }
        Ok(PLACEHOLDER
            .replace_all(&self.body, |c: &regex::Captures<'_>| vars[&c[1]].clone())
            .into_owned())
    }

    pub fn default_reasoning() -> Self {
        Self::new(
            "reason-v1",
            "You are the attending physician synthesizing specialist evidence.\n\
             Each evidence block may carry a weight: rely more on higher-weight evidence.\n\
             Use clinical knowledge and guidelines; state your reasoning step by step.\n\
             Answer with numbered steps (\"1. ...\"), then one line per task:\n\
             DECISION: <task>=<probability of a positive finding, 0 to 1>\n\
             TASKS: {{tasks}}\n\n{{input}}",
        )
    }

    pub fn default_task_identification() -> Self {
        Self::new(
            "tasks-v1",
            "Identify the clinical decisions required for this case.\n\
             Allowed: risk_stratification, etiology, severity, custom:<name>.\n\
             Reply with one line: TASKS: <comma separated list>\n\n{{context}}",
        )
    }

    pub fn default_specialist() -> Self {
        Self::new(
            "specialist-v1",
            "You are a {{modality}} specialist. Report the key findings in a few sentences.\n\n\
             {{context}}\n[{{modality}}]\n{{payload}}",
        )
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReasoningError {
    #[error("empty reasoning input")]
    EmptyInput,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("agent failed: {0}")]
    Agent(String),
    #[error("malformed reasoning output ({reason}): {raw:?}")]
    Parse { reason: String, raw: String },
}

impl From<LlmError> for ReasoningError {
    fn from(e: LlmError) -> Self {
        ReasoningError::Agent(e.to_string())
    }
}

/// Produces the raw structured answer for a rendered prompt.
#[async_trait]
pub trait ReasoningAgent: Send + Sync {
    fn agent_id(&self) -> &str;

    async fn generate(&self, prompt: &str) -> Result<String, ReasoningError>;
}

static STEP_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*\d+\s*[.)]\s*(\S.*?)\s*$").unwrap());
static DECISION_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*DECISION\s*:\s*(.+?)\s*$").unwrap());

/// Parses numbered steps and `DECISION:` lines into a chain.
pub fn parse_chain(raw: &str) -> Result<ReasoningChain, ReasoningError> {
    let fail = |reason: &str| ReasoningError::Parse {
        reason: reason.to_string(),
        raw: raw.to_string(),
    };
    let mut steps = Vec::new();
    let mut scores = BTreeMap::new();
    for line in raw.lines() {
        if let Some(c) = DECISION_LINE.captures(line) {
            for pair in c[1].split(';').flat_map(|p| p.split(',')) {
                let pair = pair.trim();
                if pair.is_empty() {
                    continue;
                }
                let (task, score) = pair
                    .split_once('=')
                    .ok_or_else(|| fail(&format!("decision {pair:?} lacks '='")))?;
                let task: TaskKind = task
                    .trim()
                    .parse()
                    .map_err(|_| fail(&format!("unknown task {:?}", task.trim())))?;
                let score: f64 = score
                    .trim()
                    .parse()
                    .map_err(|_| fail(&format!("score {:?} is not a number", score.trim())))?;
                if !(0.0..=1.0).contains(&score) {
                    return Err(fail(&format!("score {score} outside [0,1]")));
                }
                scores.insert(task, score);
            }
        } else if let Some(c) = STEP_LINE.captures(line) {
            steps.push(c[1].to_string());
        }
    }
    if steps.is_empty() {
        return Err(fail("no numbered steps"));
    }
    if scores.is_empty() {
        return Err(fail("no DECISION line"));
    }
    Ok(ReasoningChain {
        steps,
        decision_text: format_decision(&scores),
        per_task_scores: scores,
    })
}

/// Renders the template, asks the agent and parses its answer.
pub async fn reason(
    agent: &dyn ReasoningAgent,
    template: &PromptTemplate,
    assembled_input: &str,
    tasks: &[TaskKind],
) -> Result<ReasoningChain, ReasoningError> {
    if assembled_input.trim().is_empty() {
        return Err(ReasoningError::EmptyInput);
    }
    let mut vars = BTreeMap::new();
    vars.insert("input", assembled_input.to_string());
    vars.insert(
        "tasks",
        tasks
            .iter()
            .map(TaskKind::to_string)
            .collect::<Vec<_>>()
            .join(", "),
    );
    let prompt = template.render(&vars)?;
    let raw = agent.generate(&prompt).await?;
    parse_chain(&raw)
}

/// Chat-model-backed reasoner.
pub struct LlmReasoner {
    id: String,
    model: Arc<dyn ChatModel>,
}

impl LlmReasoner {
    pub fn new(id: impl Into<String>, model: Arc<dyn ChatModel>) -> Self {
        Self {
            id: id.into(),
            model,
        }
    }
}

#[async_trait]
impl ReasoningAgent for LlmReasoner {
    fn agent_id(&self) -> &str {
        &self.id
    }

    async fn generate(&self, prompt: &str) -> Result<String, ReasoningError> {
        Ok(self.model.complete(&[ChatMessage::user(prompt)]).await?.text)
    }
}

/// Always returns the same text.
#[derive(Debug, Clone)]
pub struct FixedReasoner {
    pub text: String,
}

impl FixedReasoner {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }
}

#[async_trait]
impl ReasoningAgent for FixedReasoner {
    fn agent_id(&self) -> &str {
        "fixed"
    }

    async fn generate(&self, _prompt: &str) -> Result<String, ReasoningError> {
        Ok(self.text.clone())
    }
}

static EVIDENCE_BLOCK: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?s)\[EVIDENCE specialist=(\S+) modality=(\S+?)(?: weight=([0-9.]+) confidence=([0-9.]+))?\]\n(.*?)\n\[/EVIDENCE\]",
    )
    .unwrap()
});
static HINT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b([a-z][a-z0-9_]*):(positive|negative)\b").unwrap());

#[derive(Debug, Clone)]
pub struct EvidenceBlock {
    pub specialist_id: String,
    pub modality: String,
    pub weight: Option<f64>,
    pub text: String,
}

/// Extracts the evidence blocks from an assembled prompt.
pub fn parse_evidence_blocks(prompt: &str) -> Vec<EvidenceBlock> {
    EVIDENCE_BLOCK
        .captures_iter(prompt)
        .map(|c| EvidenceBlock {
            specialist_id: c[1].to_string(),
            modality: c[2].to_string(),
            weight: c.get(3).and_then(|m| m.as_str().parse().ok()),
            text: c[5].to_string(),
        })
        .collect()
}

/// Label hints (`<task>:positive|negative`) embedded in a finding text.
pub fn parse_hints(text: &str) -> BTreeMap<TaskKind, bool> {
    HINT.captures_iter(text)
        .filter_map(|c| Some((c[1].parse::<TaskKind>().ok()?, &c[2] == "positive")))
        .collect()
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x100_0000_01b3)
    })
}

/// Mock reasoner that follows the highest-weight finding.
///
/// For every task it copies the label hint of the evidence block with the
/// largest displayed weight. Without weights it follows a block chosen
/// pseudo-randomly from the prompt. Each label is flipped with probability
/// `noise`. All randomness is a function of `(seed, prompt)`.
#[derive(Debug, Clone)]
pub struct WeightSensitiveReasoner {
    pub noise: f64,
    pub seed: u64,
}

impl WeightSensitiveReasoner {
    pub fn new(noise: f64, seed: u64) -> Self {
        Self { noise, seed }
    }

    pub fn answer(&self, prompt: &str) -> Result<String, ReasoningError> {
        let blocks = parse_evidence_blocks(prompt);
        if blocks.is_empty() {
            return Err(ReasoningError::Agent("no evidence blocks in prompt".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv(prompt.as_bytes()));
        let weighted = blocks.iter().all(|b| b.weight.is_some());
        let top = if weighted {
            let mut best = 0;
            for (i, b) in blocks.iter().enumerate() {
                if b.weight > blocks[best].weight {
                    best = i;
                }
            }
            best
        } else {
            rng.random_range(0..blocks.len())
        };
        let strength = if weighted {
            0.05 + 0.45 * blocks[top].weight.unwrap_or(0.5).clamp(0.0, 1.0)
        } else {
            0.25
        };

        let mut tasks: BTreeMap<TaskKind, bool> = BTreeMap::new();
        for b in &blocks {
            for (t, l) in parse_hints(&b.text) {
                tasks.entry(t).or_insert(l);
            }
        }
        let top_hints = parse_hints(&blocks[top].text);
        let mut scores = BTreeMap::new();
        for (task, fallback) in tasks {
            let mut label = top_hints.get(&task).copied().unwrap_or(fallback);
            if rng.random::<f64>() < self.noise {
                label = !label;
            }
            let s = if label { 0.5 + strength } else { 0.5 - strength };
            scores.insert(task, s);
        }
        if scores.is_empty() {
            return Err(ReasoningError::Agent("evidence carries no label hints".into()));
        }

        let mut out = String::new();
        for (i, b) in blocks.iter().enumerate() {
            out.push_str(&format!(
                "{}. Review {} ({}) finding: {}\n",
                i + 1,
                b.specialist_id,
                b.modality,
                b.text.replace('\n', " ")
            ));
        }
        out.push_str(&format!(
            "{}. Conclude following {} evidence: {}\n",
            blocks.len() + 1,
            blocks[top].specialist_id,
            format_decision(&scores)
        ));
        out.push_str(&format!("DECISION: {}\n", format_decision(&scores)));
        Ok(out)
    }
}

#[async_trait]
impl ReasoningAgent for WeightSensitiveReasoner {
    fn agent_id(&self) -> &str {
        "weight-sensitive-mock"
    }

    async fn generate(&self, prompt: &str) -> Result<String, ReasoningError> {
        self.answer(prompt)
    }
}
