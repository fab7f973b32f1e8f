//! Score alignment: Viterbi decoding, Gaussian mixtures, the two-level
//! transition model, and symbolic and audio aligners.

mod audio;
mod gmm;
mod hmm;
mod symbolic;
mod viterbi;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::DspError;
use crate::formats::{PerformanceNotes, ReferenceEvents};

pub use audio::{align_audio, AudioAlignConfig, AudioObservation, GmmBank, AUDIO_STATES_PER_EVENT};
pub use gmm::{fit_gmm, EmConfig, GmmFit, GmmParams, VARIANCE_FLOOR};
pub use hmm::{build_hmm, HmmModel, TransitionParams};
pub use symbolic::{align_symbolic, SymbolicAlignConfig};
pub use viterbi::{log_add, path_log_prob, viterbi, viterbi_sparse, viterbi_switched, Decoded, SparseTransitions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no path has finite probability")]
    NoFeasiblePath,
    #[error("need at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },
    #[error("nothing to align: {0}")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Decoded alignment between performed notes and reference events.
///
/// `path` holds one flat state index per observation: per performed note
/// for symbolic alignment, per frame for audio alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub path: Vec<usize>,
    /// `(performance index, score index)`, sorted by score index.
    pub matched: Vec<(usize, usize)>,
    pub missing: Vec<usize>,
    pub extra: Vec<usize>,
    pub onsets_sec: BTreeMap<usize, f64>,
    pub log_prob: f64,
    /// Pitches of matched chord events that nobody played.
    #[serde(default)]
    pub absent_pitches: Vec<(usize, u8)>,
}

impl AlignmentResult {
    /// Checks that every performed note and score event lands in exactly one bucket.
    pub fn check_partition(&self, performed: usize, events: usize) -> Result<(), String> {
        let mut perf = vec![0u32; performed];
        let mut score_matched = vec![false; events];
        for &(p, s) in &self.matched {
            *perf.get_mut(p).ok_or("performance index out of range")? += 1;
            *score_matched.get_mut(s).ok_or("score index out of range")? = true;
        }
        for &p in &self.extra {
            *perf.get_mut(p).ok_or("performance index out of range")? += 1;
        }
        if let Some(p) = perf.iter().position(|&c| c != 1) {
            return Err(format!("performance note {p} is in {} buckets", perf[p]));
        }
        let mut score = score_matched.iter().map(|&m| u32::from(m)).collect::<Vec<_>>();
        for &s in &self.missing {
            *score.get_mut(s).ok_or("score index out of range")? += 1;
        }
        if let Some(s) = score.iter().position(|&c| c != 1) {
            return Err(format!("score event {s} is in {} buckets", score[s]));
        }
        Ok(())
    }

    pub fn matched_events(&self) -> usize {
        let mut events: Vec<usize> = self.matched.iter().map(|&(_, s)| s).collect();
        events.dedup();
        events.len()
    }
}

/// Builds the matched/missing/extra partition from a per-note assignment.
///
/// `assignment[k]` is the score event performed note `k` was decoded into,
/// if any. A note counts only if its pitch belongs to that event and has not
/// been claimed already. An event is matched once at least half its pitches
/// (rounded up) are; otherwise its notes are released as extra.
pub fn extract_correspondences(
    assignment: &[Option<usize>],
    performance: &PerformanceNotes,
    reference: &ReferenceEvents,
) -> AlignmentResult {
    let n = reference.len();
    let mut claimed: Vec<Vec<(usize, u8)>> = vec![Vec::new(); n];
    let mut extra = Vec::new();
    for (k, slot) in assignment.iter().enumerate() {
        let note = performance.notes[k];
        match slot {
            Some(s)
                if *s < n
                    && reference.events[*s].pitches.contains(&note.pitch)
                    && !claimed[*s].iter().any(|&(_, p)| p == note.pitch) =>
            {
                claimed[*s].push((k, note.pitch));
            }
            _ => extra.push(k),
        }
    }
    let mut matched = Vec::new();
    let mut missing = Vec::new();
    let mut onsets_sec = BTreeMap::new();
    let mut absent_pitches = Vec::new();
    for (s, notes) in claimed.iter().enumerate() {
        let pitches = &reference.events[s].pitches;
        let needed = pitches.len().div_ceil(2).max(1);
        if notes.len() >= needed {
            let mut ks: Vec<usize> = notes.iter().map(|&(k, _)| k).collect();
            ks.sort_unstable();
            matched.extend(ks.iter().map(|&k| (k, s)));
            let onset = ks.iter().map(|&k| performance.notes[k].onset_sec).fold(f64::INFINITY, f64::min);
            onsets_sec.insert(s, onset);
            absent_pitches.extend(pitches.iter().filter(|p| !notes.iter().any(|&(_, q)| q == **p)).map(|&p| (s, p)));
        } else {
            missing.push(s);
            extra.extend(notes.iter().map(|&(k, _)| k));
        }
    }
    extra.sort_unstable();
    AlignmentResult { path: Vec::new(), matched, missing, extra, onsets_sec, log_prob: 0.0, absent_pitches }
}
