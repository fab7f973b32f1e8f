//! File-level glue shared by the CLI and the HTTP service: load a score and
//! a performance, align them, evaluate.

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{
    align_audio, align_symbolic, AlignError, AlignmentResult, AudioAlignConfig, AudioObservation, GmmBank,
    SymbolicAlignConfig,
};
use crate::dsp::{baseline_transcribe, load_wav, AudioBuffer, DspError};
use crate::eval::{evaluate_performance, EvalConfig, EvaluationReport};
use crate::formats::{
    load_score_bytes, parse_midi, score_to_reference, FormatError, PerformanceNotes, ReferenceEvents,
};
use crate::score::Score;

pub const DEFAULT_BANK_SEED: u64 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("unrecognized performance file {0}")]
    UnknownPerformance(String),
    #[error("performance JSON: {0}")]
    Json(String),
}

/// A recording or a list of performed notes.
#[derive(Debug, Clone)]
pub enum Performance {
    Audio(AudioBuffer),
    Notes(PerformanceNotes),
}

/// WAV, MIDI or PerformanceNotes JSON, detected from the content first.
pub fn load_performance(name: &str, bytes: &[u8]) -> Result<Performance, PipelineError> {
    let lower = name.to_ascii_lowercase();
    if bytes.starts_with(b"RIFF") || lower.ends_with(".wav") {
        Ok(Performance::Audio(load_wav(bytes)?))
    } else if bytes.starts_with(b"MThd") || lower.ends_with(".mid") || lower.ends_with(".midi") {
        Ok(Performance::Notes(parse_midi(bytes)?))
    } else if lower.ends_with(".json") || bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{') {
        let notes: PerformanceNotes = serde_json::from_slice(bytes).map_err(|e| PipelineError::Json(e.to_string()))?;
        Ok(Performance::Notes(PerformanceNotes::new(notes.notes)))
    } else {
        Err(PipelineError::UnknownPerformance(name.to_string()))
    }
}

pub fn load_score_file(name: &str, bytes: &[u8]) -> Result<Score, PipelineError> {
    Ok(load_score_bytes(name, bytes)?)
}

/// Process-wide GMM bank trained on the default synthetic corpus.
pub fn default_bank() -> Result<Arc<GmmBank>, AlignError> {
    static BANK: OnceLock<Arc<GmmBank>> = OnceLock::new();
    if let Some(b) = BANK.get() {
        return Ok(Arc::clone(b));
    }
    let bank = Arc::new(GmmBank::synthetic(DEFAULT_BANK_SEED)?);
    Ok(Arc::clone(BANK.get_or_init(|| bank)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Audio goes through the audio aligner, notes through the symbolic one.
    #[default]
    Auto,
    /// Audio is transcribed first, then aligned symbolically.
    Symbolic,
}

#[derive(Debug, Clone)]
pub struct Aligned {
    pub reference: ReferenceEvents,
    /// Performed notes the alignment indices refer to.
    pub notes: PerformanceNotes,
    pub alignment: AlignmentResult,
}

pub fn align_performance(
    score: &Score,
    performance: &Performance,
    tempo_bpm: f64,
    mode: AlignMode,
) -> Result<Aligned, PipelineError> {
    let reference = score_to_reference(score, tempo_bpm);
    let (notes, alignment) = match (performance, mode) {
        (Performance::Notes(notes), _) => {
            (notes.clone(), align_symbolic(notes, &reference, &SymbolicAlignConfig::default())?)
        }
        (Performance::Audio(audio), AlignMode::Symbolic) => {
            let notes = baseline_transcribe(audio)?.notes;
            let a = align_symbolic(&notes, &reference, &SymbolicAlignConfig::default())?;
            (notes, a)
        }
        (Performance::Audio(audio), AlignMode::Auto) => {
            let bank = default_bank()?;
            let tr = baseline_transcribe(audio)?;
            let obs = AudioObservation::from_transcription(&tr, &bank.pca)?;
            let a = align_audio(&obs, &reference, &bank, &AudioAlignConfig::default())?;
            (obs.notes, a)
        }
    };
    Ok(Aligned { reference, notes, alignment })
}

pub fn evaluate_aligned(piece: &str, aligned: &Aligned) -> EvaluationReport {
    evaluate_performance(piece, &aligned.reference, &aligned.notes, &aligned.alignment, &EvalConfig::default())
}

/// Piece name for reports: the score title, else the file name.
pub fn piece_name(score: &Score, file_name: &str) -> String {
    if score.title.trim().is_empty() {
        file_name.to_string()
    } else {
        score.title.clone()
    }
}
