use std::path::PathBuf;
use std::sync::{mpsc, Arc, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::backend::{BackendError, CompletionBackend, GenerationParams};
use super::intent::{explicit_query, measure_reference, route_intent, tempo_reference, Intent, IntentKind, Module};
use super::memory::{Clock, MemoryEntry, MemoryKind, Session, SystemClock};
use super::prompt::{compose_prompt, ContextPiece, PromptConfig};
use super::{AgentError, Attachment, AttachmentKind};
use crate::align::{
    align_audio, align_symbolic, AlignmentResult, AudioAlignConfig, AudioObservation, GmmBank, SymbolicAlignConfig,
};
use crate::dsp::{baseline_transcribe, load_wav};
use crate::eval::{evaluate_performance, EvalConfig, EvaluationReport};
use crate::formats::{load_score_bytes, parse_midi, score_to_reference, PerformanceNotes, SymbolicFormat};
use crate::pipeline::{default_bank, DEFAULT_BANK_SEED};
use crate::retrieval::{match_implicit, search_explicit, top_line_from_notes, LibraryIndex, Probe, RetrievalHit};
use crate::score::{serialize_abc, split_measures, Score};

const MEMORY_STAGE: &str = "memory";
const RETRIEVED_HITS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub prompt: PromptConfig,
    pub generation: GenerationParams,
    /// Reference tempo when the message names none.
    pub default_tempo_bpm: f64,
    /// Earlier turns quoted in the HISTORY section.
    pub history_turns: usize,
    /// Seed of the synthetic GMM bank used for audio alignment.
    pub bank_seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            prompt: PromptConfig::default(),
            generation: GenerationParams::default(),
            default_tempo_bpm: 120.0,
            history_turns: 3,
            bank_seed: DEFAULT_BANK_SEED,
        }
    }
}

/// One module call made during a turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub module: String,
    pub operation: String,
    pub input: String,
    pub output: String,
}

impl TraceStep {
    fn new(module: &str, operation: &str, input: impl Into<String>, output: impl Into<String>) -> Self {
        Self { module: module.into(), operation: operation.into(), input: input.into(), output: output.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub session_id: String,
    pub turn: u32,
    pub intent: Intent,
    pub response: String,
    pub trace: Vec<TraceStep>,
    pub memory_delta: Vec<MemoryEntry>,
    pub prompt: String,
}

pub struct Agent {
    backend: Arc<dyn CompletionBackend>,
    library: Option<(LibraryIndex, Option<PathBuf>)>,
    clock: Arc<dyn Clock>,
    config: AgentConfig,
    bank: OnceLock<Arc<GmmBank>>,
}

/// Module outputs gathered during one turn.
struct Work {
    trace: Vec<TraceStep>,
    context: Vec<ContextPiece>,
    outputs: serde_json::Map<String, Value>,
    retrieved: bool,
    measure: Option<usize>,
}

fn failure(module: Module, e: impl std::fmt::Display) -> AgentError {
    AgentError::ModuleFailure { stage: module.name().to_string(), message: e.to_string() }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("agent outputs serialize")
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("agent outputs serialize")
}

/// Evaluation JSON for the prompt: one measure plus the summary when a
/// measure was asked about, otherwise the whole report.
fn evaluation_context(report: &EvaluationReport, measure: Option<usize>) -> String {
    match measure.and_then(|m| report.measures.iter().find(|r| r.measure_id == m)) {
        Some(row) => pretty(&json!({
            "piece": report.piece,
            "tempo_bpm": report.tempo_bpm,
            "measure": row,
            "summary": report.summary,
        })),
        None => pretty(report),
    }
}

fn alignment_context(a: &AlignmentResult) -> String {
    pretty(&json!({
        "matched": a.matched,
        "missing": a.missing,
        "extra": a.extra,
        "absent_pitches": a.absent_pitches,
        "log_prob": a.log_prob,
    }))
}

impl Agent {
    pub fn new(backend: Arc<dyn CompletionBackend>) -> Agent {
        Agent {
            backend,
            library: None,
            clock: Arc::new(SystemClock),
            config: AgentConfig::default(),
            bank: OnceLock::new(),
        }
    }

    /// Library for retrieval; `root` lets retrieved ABC files be quoted.
    pub fn with_library(mut self, index: LibraryIndex, root: Option<PathBuf>) -> Agent {
        self.library = Some((index, root));
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Agent {
        self.clock = clock;
        self
    }

    pub fn with_config(mut self, config: AgentConfig) -> Agent {
        self.config = config;
        self
    }

    pub fn with_bank(self, bank: Arc<GmmBank>) -> Agent {
        let _ = self.bank.set(bank);
        self
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn library(&self) -> Option<&LibraryIndex> {
        self.library.as_ref().map(|(i, _)| i)
    }

    fn gmm_bank(&self) -> Result<Arc<GmmBank>, AgentError> {
        if let Some(b) = self.bank.get() {
            return Ok(Arc::clone(b));
        }
        let bank = if self.config.bank_seed == DEFAULT_BANK_SEED {
            default_bank()
        } else {
            GmmBank::synthetic(self.config.bank_seed).map(Arc::new)
        }
        .map_err(|e| failure(Module::HmmAlign, e))?;
        Ok(Arc::clone(self.bank.get_or_init(|| bank)))
    }

    /// Routes the message, runs the required modules, asks the backend and
    /// records the turn in the session memory. Memory is only written when
    /// the whole turn succeeds.
    pub fn run_turn(
        &self,
        session: &mut Session,
        message: &str,
        attachments: &[Attachment],
    ) -> Result<TurnOutcome, AgentError> {
        let kinds: Vec<AttachmentKind> = attachments.iter().map(|a| a.kind).collect();
        let intent = route_intent(message, &kinds);
        let mut work = Work {
            trace: Vec::new(),
            context: Vec::new(),
            outputs: serde_json::Map::new(),
            retrieved: false,
            measure: measure_reference(message),
        };
        if let Some(h) = self.history(session) {
            work.context.push(h);
        }
        match intent.kind {
            IntentKind::Theory => {}
            IntentKind::ScoreAnalysis => self.score_analysis(&mut work, attachments)?,
            IntentKind::PerformanceAnalysis => self.performance_analysis(&mut work, message, attachments)?,
            IntentKind::RetrievalExplicit => self.explicit_retrieval(&mut work, message),
            IntentKind::RetrievalImplicit => self.implicit_retrieval(&mut work, attachments)?,
            IntentKind::Followup => self.followup(&mut work, session)?,
        }
        let measure_label = work.measure.map(|m| format!("measure {m}"));
        let prompt = compose_prompt(&intent, message, &work.context, measure_label.as_deref(), &self.config.prompt);
        let response = self.complete(&prompt)?;

        let turn = session.begin_turn();
        let clock = self.clock.as_ref();
        let names: Vec<Value> = attachments.iter().map(|a| json!({"kind": a.kind, "name": a.name})).collect();
        let mut delta = Vec::with_capacity(3);
        delta.push(session.append(
            turn,
            MemoryKind::UserMessage,
            "user_message",
            json!({"text": message, "attachments": names}),
            clock,
        )?);
        let mut outputs = work.outputs;
        outputs.insert("intent".into(), to_value(&intent));
        let (kind, label) = if work.retrieved {
            (MemoryKind::RetrievedFile, "retrieved_file")
        } else {
            (MemoryKind::ModuleOutput, "module_output")
        };
        delta.push(session.append(turn, kind, label, Value::Object(outputs), clock)?);
        delta.push(session.append(
            turn,
            MemoryKind::ModelResponse,
            "model_response",
            json!({"text": response}),
            clock,
        )?);

        Ok(TurnOutcome {
            session_id: session.id.clone(),
            turn,
            intent,
            response,
            trace: work.trace,
            memory_delta: delta,
            prompt,
        })
    }

    fn complete(&self, prompt: &str) -> Result<String, AgentError> {
        let timeout = self.config.generation.timeout;
        let (tx, rx) = mpsc::channel();
        let backend = Arc::clone(&self.backend);
        let params = self.config.generation.clone();
        let owned = prompt.to_string();
        std::thread::spawn(move || {
            let _ = tx.send(backend.complete(&owned, &params));
        });
        match rx.recv_timeout(timeout + Duration::from_millis(50)) {
            Ok(Ok(text)) => Ok(text),
            Ok(Err(BackendError::Timeout)) | Err(_) => Err(AgentError::BackendTimeout(timeout.as_secs_f64())),
            Ok(Err(e)) => Err(e.into()),
        }
    }

    fn history(&self, session: &Session) -> Option<ContextPiece> {
        let first = session.turns().saturating_sub(self.config.history_turns as u32) + 1;
        let lines: Vec<String> = session
            .entries()
            .iter()
            .filter(|e| e.turn >= first)
            .filter_map(|e| {
                let tag = match e.kind {
                    MemoryKind::UserMessage => "Q",
                    MemoryKind::ModelResponse => "A",
                    _ => return None,
                };
                let payload = session.resolve(e).ok()?;
                let text = payload.get("text")?.as_str()?.trim().to_string();
                Some(format!("{tag}{}: {text}", e.turn))
            })
            .collect();
        (!lines.is_empty()).then(|| ContextPiece::new("HISTORY", lines.join("\n")))
    }

    fn load_score(&self, work: &mut Work, attachment: &Attachment) -> Result<Score, AgentError> {
        let score =
            load_score_bytes(&attachment.name, &attachment.data).map_err(|e| failure(Module::SymbolicCore, e))?;
        work.trace.push(TraceStep::new(
            Module::SymbolicCore.name(),
            "load_score",
            format!("attachment:{}", attachment.name),
            format!("{} measures, {} events", score.measures.len(), score.event_count()),
        ));
        Ok(score)
    }

    /// ABC of the whole score, or of the requested measure when it exists.
    fn score_abc(&self, work: &mut Work, score: &Score) -> Result<String, AgentError> {
        if let Some(m) = work.measure {
            let fragments = split_measures(score).map_err(|e| failure(Module::SymbolicCore, e))?;
            if let Some((text, meter)) = fragments.get(m.wrapping_sub(1)) {
                work.trace.push(TraceStep::new(
                    Module::SymbolicCore.name(),
                    "split_measures",
                    "score",
                    format!("{} fragments, using measure {m}", fragments.len()),
                ));
                return Ok(format!("% measure {m}, meter {meter}\n{text}"));
            }
        }
        let abc = serialize_abc(score).map_err(|e| failure(Module::SymbolicCore, e))?;
        work.trace.push(TraceStep::new(
            Module::SymbolicCore.name(),
            "serialize_abc",
            "score",
            format!("{} lines", abc.lines().count()),
        ));
        Ok(abc)
    }

    fn score_analysis(&self, work: &mut Work, attachments: &[Attachment]) -> Result<(), AgentError> {
        let att = attachments.iter().find(|a| a.kind == AttachmentKind::Score).expect("routed on a score attachment");
        let score = self.load_score(work, att)?;
        let abc = self.score_abc(work, &score)?;
        work.outputs.insert("score_abc".into(), Value::String(abc.clone()));
        work.context.push(ContextPiece::new("SCORE_ABC", abc));
        Ok(())
    }

    fn performance_analysis(
        &self,
        work: &mut Work,
        message: &str,
        attachments: &[Attachment],
    ) -> Result<(), AgentError> {
        let score_att =
            attachments.iter().find(|a| a.kind == AttachmentKind::Score).expect("routed on a score attachment");
        let score = self.load_score(work, score_att)?;
        let abc = self.score_abc(work, &score)?;
        let tempo = tempo_reference(message).unwrap_or(self.config.default_tempo_bpm);
        let reference = score_to_reference(&score, tempo);
        work.trace.push(TraceStep::new(
            Module::SymbolicCore.name(),
            "score_to_reference",
            format!("tempo {tempo} bpm"),
            format!("{} events", reference.len()),
        ));

        let (performance, alignment) = if let Some(audio) = attachments.iter().find(|a| a.kind == AttachmentKind::Audio)
        {
            let buffer = load_wav(&audio.data).map_err(|e| failure(Module::AudioDsp, e))?;
            let tr = baseline_transcribe(&buffer).map_err(|e| failure(Module::AudioDsp, e))?;
            work.trace.push(TraceStep::new(
                Module::AudioDsp.name(),
                "baseline_transcribe",
                format!("attachment:{}", audio.name),
                format!("{} frames, {} notes", tr.frames.frames(), tr.notes.len()),
            ));
            let bank = self.gmm_bank()?;
            let obs = AudioObservation::from_transcription(&tr, &bank.pca).map_err(|e| failure(Module::HmmAlign, e))?;
            let a = align_audio(&obs, &reference, &bank, &AudioAlignConfig::default())
                .map_err(|e| failure(Module::HmmAlign, e))?;
            (obs.notes, a)
        } else {
            let midi =
                attachments.iter().find(|a| a.kind == AttachmentKind::Performance).expect("routed on a performance");
            let notes = parse_midi(&midi.data).map_err(|e| failure(Module::SymbolicCore, e))?;
            work.trace.push(TraceStep::new(
                Module::SymbolicCore.name(),
                "parse_midi",
                format!("attachment:{}", midi.name),
                format!("{} notes", notes.len()),
            ));
            let a = align_symbolic(&notes, &reference, &SymbolicAlignConfig::default())
                .map_err(|e| failure(Module::HmmAlign, e))?;
            (notes, a)
        };
        let operation =
            if attachments.iter().any(|a| a.kind == AttachmentKind::Audio) { "align_audio" } else { "align_symbolic" };
        work.trace.push(TraceStep::new(
            Module::HmmAlign.name(),
            operation,
            format!("{} events x {} notes", reference.len(), performance.len()),
            format!(
                "{} matched, {} missing, {} extra",
                alignment.matched.len(),
                alignment.missing.len(),
                alignment.extra.len()
            ),
        ));
        let piece = if score.title.is_empty() { score_att.name.clone() } else { score.title.clone() };
        let report = evaluate_performance(&piece, &reference, &performance, &alignment, &EvalConfig::default());
        work.trace.push(TraceStep::new(
            Module::PerfEval.name(),
            "evaluate_performance",
            "alignment",
            format!("{} measures, eva_all {:.3}", report.measures.len(), report.summary.eva_all),
        ));
        work.context.push(ContextPiece::new("SCORE_ABC", abc));
        work.context.push(ContextPiece::new("ALIGNMENT_JSON", alignment_context(&alignment)));
        work.context.push(ContextPiece::new("EVALUATION_JSON", evaluation_context(&report, work.measure)));
        work.outputs.insert("alignment".into(), to_value(&alignment));
        work.outputs.insert("evaluation".into(), to_value(&report));
        Ok(())
    }

    fn retrieved_context(&self, work: &mut Work, operation: &str, input: String, hits: Vec<RetrievalHit>) {
        let index = self.library();
        work.trace.push(TraceStep::new(
            Module::Retrieval.name(),
            operation,
            input,
            match hits.first() {
                Some(h) => format!("{} hits, top {} ({:.3})", hits.len(), h.entry_id, h.score),
                None => "0 hits".to_string(),
            },
        ));
        let hits: Vec<RetrievalHit> = hits.into_iter().take(RETRIEVED_HITS).collect();
        let mut lines = Vec::new();
        for h in &hits {
            if let Some(e) = index.and_then(|i| i.entry(&h.entry_id)) {
                lines.push(format!("{} | {} | {} | score {:.3}", e.id, e.title, e.composer, h.score));
            }
        }
        let top = hits.first().and_then(|h| index.and_then(|i| i.entry(&h.entry_id)));
        let abc = top.and_then(|e| self.entry_abc(e.format, &e.path));
        if let Some(text) = &abc {
            lines.push(String::new());
            lines.push(text.trim_end().to_string());
        }
        if lines.is_empty() {
            lines.push("no matching library entries".into());
        }
        work.context.push(ContextPiece::new("RETRIEVED", lines.join("\n")));
        work.retrieved = !hits.is_empty();
        work.outputs.insert("hits".into(), to_value(&hits));
        if let Some(e) = top {
            work.outputs.insert(
                "retrieved".into(),
                json!({"id": e.id, "title": e.title, "composer": e.composer, "path": e.path, "abc": abc}),
            );
        }
    }

    fn entry_abc(&self, format: SymbolicFormat, path: &str) -> Option<String> {
        let root = self.library.as_ref()?.1.as_ref()?;
        let bytes = std::fs::read(root.join(path)).ok()?;
        match format {
            SymbolicFormat::Abc => String::from_utf8(bytes).ok(),
            SymbolicFormat::MusicXml => load_score_bytes(path, &bytes).ok().and_then(|s| serialize_abc(&s).ok()),
            SymbolicFormat::Midi => None,
        }
    }

    fn explicit_retrieval(&self, work: &mut Work, message: &str) {
        let query = explicit_query(message);
        let hits = self.library().map(|i| search_explicit(i, &query)).unwrap_or_default();
        self.retrieved_context(work, "search_explicit", format!("query:{query}"), hits);
    }

    fn implicit_retrieval(&self, work: &mut Work, attachments: &[Attachment]) -> Result<(), AgentError> {
        let (probe, source) = if let Some(a) = attachments.iter().find(|a| a.kind == AttachmentKind::Audio) {
            let buffer = load_wav(&a.data).map_err(|e| failure(Module::AudioDsp, e))?;
            let tr = baseline_transcribe(&buffer).map_err(|e| failure(Module::AudioDsp, e))?;
            work.trace.push(TraceStep::new(
                Module::AudioDsp.name(),
                "baseline_transcribe",
                format!("attachment:{}", a.name),
                format!("{} frames, {} notes", tr.frames.frames(), tr.notes.len()),
            ));
            (Probe::Notes(tr.notes), a.name.clone())
        } else if let Some(a) = attachments.iter().find(|a| a.kind == AttachmentKind::Performance) {
            let notes: PerformanceNotes = parse_midi(&a.data).map_err(|e| failure(Module::SymbolicCore, e))?;
            work.trace.push(TraceStep::new(
                Module::SymbolicCore.name(),
                "parse_midi",
                format!("attachment:{}", a.name),
                format!("{} notes", notes.len()),
            ));
            (Probe::Notes(notes), a.name.clone())
        } else {
            let a = attachments.iter().find(|a| a.kind == AttachmentKind::Score).expect("routed on an attachment");
            (Probe::Score(self.load_score(work, a)?), a.name.clone())
        };
        let probe_len = match &probe {
            Probe::Notes(n) => top_line_from_notes(n).len(),
            p => p.top_line().len(),
        };
        let hits = match self.library() {
            Some(index) => match_implicit(index, &probe).map_err(|e| failure(Module::Retrieval, e))?,
            None => Vec::new(),
        };
        self.retrieved_context(work, "match_implicit", format!("attachment:{source} ({probe_len} melody notes)"), hits);
        Ok(())
    }

    fn followup(&self, work: &mut Work, session: &Session) -> Result<(), AgentError> {
        let earlier = session
            .entries()
            .iter()
            .rev()
            .filter(|e| matches!(e.kind, MemoryKind::ModuleOutput | MemoryKind::RetrievedFile))
            .find_map(|e| {
                let payload = session.resolve(e).ok()?;
                let report: EvaluationReport = serde_json::from_value(payload.get("evaluation")?.clone()).ok()?;
                Some((e.seq, e.turn, report))
            });
        match earlier {
            Some((seq, turn, report)) => {
                work.trace.push(TraceStep::new(
                    MEMORY_STAGE,
                    "memory_query",
                    "kind=module_output",
                    format!("evaluation from turn {turn} (entry {seq})"),
                ));
                work.context.push(ContextPiece::new("EVALUATION_JSON", evaluation_context(&report, work.measure)));
                work.outputs.insert("reused_entry".into(), json!(seq));
            }
            None => {
                work.trace.push(TraceStep::new(
                    MEMORY_STAGE,
                    "memory_query",
                    "kind=module_output",
                    "no earlier evaluation",
                ));
            }
        }
        Ok(())
    }
}
