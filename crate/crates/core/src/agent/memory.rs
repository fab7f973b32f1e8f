use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::AgentError;

pub const MEMORY_FILE: &str = "memory.jsonl";
/// Payloads larger than this are written to an artifact file when the
/// session has a directory.
pub const INLINE_LIMIT: usize = 8 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    ModuleOutput,
    RetrievedFile,
    ModelResponse,
    UserMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Payload {
    Content {
        content: Value,
    },
    /// Path relative to the session directory.
    Artifact {
        path: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    /// Position in the session store, strictly increasing.
    pub seq: u64,
    /// Turn that produced the entry, non-decreasing.
    pub turn: u32,
    pub kind: MemoryKind,
    pub label: String,
    pub payload: Payload,
    pub timestamp_ms: u64,
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
    }
}

/// Starts at `start` and advances by `step` on every reading.
#[derive(Debug)]
pub struct SteppingClock {
    next: AtomicU64,
    step: u64,
}

impl SteppingClock {
    pub fn new(start: u64, step: u64) -> Self {
        Self { next: AtomicU64::new(start), step }
    }
}

impl Clock for SteppingClock {
    fn now_ms(&self) -> u64 {
        self.next.fetch_add(self.step, Ordering::SeqCst)
    }
}

/// Session ids are used as directory names.
pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Append-only memory of one conversation, optionally persisted as
/// `<root>/<id>/memory.jsonl`.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    dir: Option<PathBuf>,
    entries: Vec<MemoryEntry>,
    turns: u32,
}

impl Session {
    pub fn in_memory(id: impl Into<String>) -> Session {
        Session { id: id.into(), dir: None, entries: Vec::new(), turns: 0 }
    }

    /// Opens or creates a persisted session, reloading earlier entries.
    pub fn open(root: &Path, id: &str) -> Result<Session, AgentError> {
        if !valid_session_id(id) {
            return Err(AgentError::InvalidSession(id.to_string()));
        }
        let dir = root.join(id);
        fs::create_dir_all(&dir).map_err(|e| AgentError::Memory(format!("{}: {e}", dir.display())))?;
        let mut entries = Vec::new();
        if let Ok(text) = fs::read_to_string(dir.join(MEMORY_FILE)) {
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let entry: MemoryEntry = serde_json::from_str(line)
                    .map_err(|e| AgentError::Memory(format!("{MEMORY_FILE} line {}: {e}", n + 1)))?;
                entries.push(entry);
            }
        }
        let turns = entries.last().map_or(0, |e| e.turn);
        Ok(Session { id: id.to_string(), dir: Some(dir), entries, turns })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn turns(&self) -> u32 {
        self.turns
    }

    pub(crate) fn begin_turn(&mut self) -> u32 {
        self.turns += 1;
        self.turns
    }

    /// Appends one entry. Large payloads go to `artifacts/` when persisted.
    pub fn append(
        &mut self,
        turn: u32,
        kind: MemoryKind,
        label: &str,
        content: Value,
        clock: &dyn Clock,
    ) -> Result<MemoryEntry, AgentError> {
        let seq = self.entries.last().map_or(1, |e| e.seq + 1);
        let payload = match &self.dir {
            Some(dir) => {
                let text = serde_json::to_string(&content).expect("JSON value serializes");
                if text.len() > INLINE_LIMIT {
                    let rel = format!("artifacts/{seq:06}-{label}.json");
                    let path = dir.join(&rel);
                    fs::create_dir_all(path.parent().expect("artifact has a parent"))
                        .and_then(|()| fs::write(&path, text))
                        .map_err(|e| AgentError::Memory(format!("{}: {e}", path.display())))?;
                    Payload::Artifact { path: rel }
                } else {
                    Payload::Content { content }
                }
            }
            None => Payload::Content { content },
        };
        let entry = MemoryEntry { seq, turn, kind, label: label.to_string(), payload, timestamp_ms: clock.now_ms() };
        if let Some(dir) = &self.dir {
            let mut line = serde_json::to_string(&entry).expect("entry serializes");
            line.push('\n');
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(MEMORY_FILE))
                .and_then(|mut f| f.write_all(line.as_bytes()))
                .map_err(|e| AgentError::Memory(e.to_string()))?;
        }
        self.entries.push(entry.clone());
        Ok(entry)
    }

    /// Entry payload, reading artifact files as needed.
    pub fn resolve(&self, entry: &MemoryEntry) -> Result<Value, AgentError> {
        match &entry.payload {
            Payload::Content { content } => Ok(content.clone()),
            Payload::Artifact { path } => {
                let dir =
                    self.dir.as_ref().ok_or_else(|| AgentError::Memory("artifact without session directory".into()))?;
                let text =
                    fs::read_to_string(dir.join(path)).map_err(|e| AgentError::Memory(format!("{path}: {e}")))?;
                serde_json::from_str(&text).map_err(|e| AgentError::Memory(format!("{path}: {e}")))
            }
        }
    }

    /// Most recent entries first, optionally filtered by kind.
    pub fn query(&self, kind: Option<MemoryKind>, limit: usize) -> Vec<MemoryEntry> {
        self.entries.iter().rev().filter(|e| kind.is_none_or(|k| e.kind == k)).take(limit).cloned().collect()
    }
}

pub fn memory_query(session: &Session, kind: Option<MemoryKind>, limit: usize) -> Vec<MemoryEntry> {
    session.query(kind, limit)
}
