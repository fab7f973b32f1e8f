//! Intent routing, module orchestration, prompt composition and session
//! memory for the conversational agent.

mod backend;
mod intent;
mod memory;
mod prompt;
mod turn;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    parse_chat_response, BackendError, CompletionBackend, GenerationParams, OpenAiBackend, StubBackend, DEFAULT_MODEL,
    ENV_KEY, ENV_MODEL, ENV_URL,
};
pub use intent::{explicit_query, measure_reference, route_intent, tempo_reference, Intent, IntentKind, Module};
pub use memory::{
    memory_query, valid_session_id, Clock, MemoryEntry, MemoryKind, Payload, Session, SteppingClock, SystemClock,
    INLINE_LIMIT, MEMORY_FILE,
};
pub use prompt::{
    compose_prompt, modality, parse_sections, preamble, ContextPiece, Modality, PromptConfig, AUDIO_PREAMBLE,
    IMAGE_PREAMBLE, MEASURE_PLACEHOLDER, SECTION_ORDER, TEXT_PREAMBLE,
};
pub use turn::{Agent, AgentConfig, TraceStep, TurnOutcome};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("unsupported attachment {0}")]
    UnsupportedAttachment(String),
    #[error("{stage} failed: {message}")]
    ModuleFailure { stage: String, message: String },
    #[error("completion backend timed out after {0:.1} s")]
    BackendTimeout(f64),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("memory store: {0}")]
    Memory(String),
    #[error("invalid session id {0:?}")]
    InvalidSession(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachmentKind {
    /// WAV recording.
    Audio,
    /// ABC or MusicXML score.
    Score,
    /// MIDI performance.
    Performance,
}

impl AttachmentKind {
    /// Kind implied by a file name.
    pub fn from_name(name: &str) -> Option<AttachmentKind> {
        let ext = name.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase())?;
        match ext.as_str() {
            "wav" | "wave" => Some(AttachmentKind::Audio),
            "abc" | "xml" | "musicxml" | "mxl" => Some(AttachmentKind::Score),
            "mid" | "midi" => Some(AttachmentKind::Performance),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub kind: AttachmentKind,
    pub name: String,
    #[serde(skip)]
    pub data: Vec<u8>,
}

impl Attachment {
    pub fn new(kind: AttachmentKind, name: impl Into<String>, data: Vec<u8>) -> Self {
        Self { kind, name: name.into(), data }
    }

    /// Attachment typed from its file name.
    pub fn from_file(name: &str, data: Vec<u8>) -> Result<Attachment, AgentError> {
        AttachmentKind::from_name(name)
            .map(|kind| Attachment::new(kind, name, data))
            .ok_or_else(|| AgentError::UnsupportedAttachment(name.to_string()))
    }
}
