//! Orchestrator, specialist and reasoning agents.

pub mod confidence;
pub mod llm;
pub mod orchestrator;
pub mod reasoning;
pub mod specialist;

pub use confidence::{generation_confidence, ConfidenceError};
pub use llm::{CannedChat, ChatClient, ChatMessage, ChatModel, ChatReply, LlmConfig, LlmError};
pub use orchestrator::{
    activate, dispatch, identify_tasks, parse_task_list, ActivationRule, ActivationTable,
    DispatchError, DispatchFailure, DispatchOutcome, DispatchPolicy, TaskError, TaskSource,
};
pub use reasoning::{
    parse_chain, reason, FixedReasoner, LlmReasoner, PromptTemplate, ReasoningAgent,
    ReasoningError, WeightSensitiveReasoner,
};
pub use specialist::{
    AgentError, LlmSpecialist, PayloadSpecialist, SpecialistAgent, SpecialistOutput,
    SpecialistRegistry, StubSpecialist,
};
