use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::AttachmentKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentKind {
    Theory,
    ScoreAnalysis,
    PerformanceAnalysis,
    RetrievalExplicit,
    RetrievalImplicit,
    Followup,
}

/// Engine modules the agent can invoke.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Module {
    SymbolicCore,
    AudioDsp,
    HmmAlign,
    PerfEval,
    Retrieval,
}

impl Module {
    pub fn name(self) -> &'static str {
        match self {
            Module::SymbolicCore => "symbolic-core",
            Module::AudioDsp => "audio-dsp",
            Module::HmmAlign => "hmm-align",
            Module::PerfEval => "perf-eval",
            Module::Retrieval => "retrieval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub kind: IntentKind,
    pub confidence: f64,
    pub required_modules: Vec<Module>,
}

impl Intent {
    fn new(kind: IntentKind, confidence: f64, mut modules: Vec<Module>) -> Intent {
        modules.sort();
        Intent { kind, confidence, required_modules: modules }
    }

    pub fn requires(&self, module: Module) -> bool {
        self.required_modules.contains(&module)
    }
}

const RETRIEVAL_PHRASES: [&str; 10] =
    ["give me", "find", "search", "look up", "look for", "show me", "retrieve", "fetch", "similar", "which piece"];

const THEORY_WORDS: [&str; 30] = [
    "interval",
    "chord",
    "scale",
    "key",
    "mode",
    "cadence",
    "harmony",
    "harmonic",
    "triad",
    "fifth",
    "fourth",
    "third",
    "second",
    "sixth",
    "seventh",
    "octave",
    "inversion",
    "inverting",
    "invert",
    "diminished",
    "augmented",
    "major",
    "minor",
    "tonic",
    "dominant",
    "meter",
    "rhythm",
    "counterpoint",
    "modulation",
    "enharmonic",
];

static MEASURE_REF: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(?:measure|bar)s?\s*#?\s*(\d+)").unwrap());
static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[a-z]+").unwrap());

/// First measure number mentioned in a message ("measure 8", "bar 3").
pub fn measure_reference(message: &str) -> Option<usize> {
    MEASURE_REF.captures(&message.to_lowercase()).and_then(|c| c[1].parse().ok())
}

fn has_phrase(text: &str, phrases: &[&str]) -> bool {
    let words: Vec<&str> = WORD.find_iter(text).map(|m| m.as_str()).collect();
    phrases.iter().any(|p| {
        let parts: Vec<&str> = p.split(' ').collect();
        words.windows(parts.len()).any(|w| w == parts.as_slice())
    })
}

fn is_followup(text: &str) -> bool {
    let t = text.trim_start();
    ["and ", "what about", "how about", "same for", "also "].iter().any(|p| t.starts_with(p)) || MEASURE_REF.is_match(t)
}

fn has_quoted_title(text: &str) -> bool {
    text.matches('"').count() >= 2 || (text.contains('\u{201c}') && text.contains('\u{201d}'))
}

/// Deterministic rule cascade: attachments first, then keyword lexicons,
/// falling back to a music-theory question.
pub fn route_intent(message: &str, attachments: &[AttachmentKind]) -> Intent {
    use IntentKind::*;
    use Module::*;
    let text = message.to_lowercase();
    let audio = attachments.contains(&AttachmentKind::Audio);
    let midi = attachments.contains(&AttachmentKind::Performance);
    let score = attachments.contains(&AttachmentKind::Score);
    let retrieval_words = has_phrase(&text, &RETRIEVAL_PHRASES);

    if audio || midi {
        let source = if audio { AudioDsp } else { SymbolicCore };
        return if score {
            let mut modules = vec![SymbolicCore, HmmAlign, PerfEval];
            if audio {
                modules.push(AudioDsp);
            }
            Intent::new(PerformanceAnalysis, 0.95, modules)
        } else {
            Intent::new(RetrievalImplicit, 0.85, vec![source, Retrieval])
        };
    }
    if score {
        return if retrieval_words {
            Intent::new(RetrievalImplicit, 0.85, vec![SymbolicCore, Retrieval])
        } else {
            Intent::new(ScoreAnalysis, 0.95, vec![SymbolicCore])
        };
    }
    if is_followup(&text) {
        return Intent::new(Followup, 0.8, vec![]);
    }
    if retrieval_words || has_quoted_title(message) {
        return Intent::new(RetrievalExplicit, 0.85, vec![Retrieval]);
    }
    if has_phrase(&text, &THEORY_WORDS) {
        return Intent::new(Theory, 0.8, vec![]);
    }
    Intent::new(Theory, 0.5, vec![])
}

static EXPLICIT_QUERY: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^\s*(?:please\s+)?(?:can you\s+)?(?:give me|find(?: me)?|search(?: for)?|look up|look for|show me|retrieve|fetch)\s+(?:(?:a|an|the|some)\s+)?(?:(?:song|piece|tune|score|melody)s?\s+)?(?:(?:of|by|called|named|titled)\s+)?(.+?)[\s?.!]*$",
    )
    .unwrap()
});

/// The title or composer a retrieval request refers to.
pub fn explicit_query(message: &str) -> String {
    if let Some(start) = message.find('"') {
        if let Some(len) = message[start + 1..].find('"') {
            return message[start + 1..start + 1 + len].to_string();
        }
    }
    EXPLICIT_QUERY
        .captures(message)
        .map(|c| c[1].to_string())
        .unwrap_or_else(|| message.trim().trim_end_matches(['?', '.', '!']).to_string())
}

/// Tempo stated in a message, e.g. "at 96 bpm".
pub fn tempo_reference(message: &str) -> Option<f64> {
    static BPM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)(\d+(?:\.\d+)?)\s*bpm").unwrap());
    BPM.captures(message).and_then(|c| c[1].parse().ok()).filter(|t: &f64| *t > 0.0)
}
