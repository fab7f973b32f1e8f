//! Timed note lists: performances (seconds) and score references (beats).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::score::{Fraction, Score};

/// One performed note.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfNote {
    pub pitch: u8,
    pub onset_sec: f64,
    pub offset_sec: f64,
    pub velocity: u8,
}

/// Performed notes sorted by onset, then pitch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerformanceNotes {
    pub notes: Vec<PerfNote>,
}

impl PerformanceNotes {
    pub fn new(mut notes: Vec<PerfNote>) -> Self {
        notes.sort_by(|a, b| a.onset_sec.total_cmp(&b.onset_sec).then(a.pitch.cmp(&b.pitch)));
        Self { notes }
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// Checks the ordering and timing invariants.
    pub fn validate(&self) -> Result<(), String> {
        for (i, n) in self.notes.iter().enumerate() {
            if !(n.onset_sec >= 0.0 && n.offset_sec > n.onset_sec) || n.velocity > 127 || n.pitch > 127 {
                return Err(format!("note {i} has invalid timing or range"));
            }
        }
        let sorted = self
            .notes
            .windows(2)
            .all(|w| w[0].onset_sec < w[1].onset_sec || (w[0].onset_sec == w[1].onset_sec && w[0].pitch <= w[1].pitch));
        if sorted {
            Ok(())
        } else {
            Err("notes are not sorted by onset then pitch".into())
        }
    }
}

/// One alignment position: the notes a score asks to be struck together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEvent {
    pub score_index: usize,
    pub measure_index: usize,
    /// Quarter-note beats from the start of the piece.
    pub onset_beats: f64,
    /// Longest written duration in the group, in quarter-note beats.
    pub duration_beats: f64,
    pub onset_sec: f64,
    /// Sorted, distinct MIDI pitches.
    pub pitches: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEvents {
    pub tempo_bpm: f64,
    pub events: Vec<ReferenceEvent>,
    /// Quarter-note beat at which each measure starts, plus the end of the piece.
    pub measure_starts_beats: Vec<f64>,
}

impl ReferenceEvents {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn measure_count(&self) -> usize {
        self.measure_starts_beats.len().saturating_sub(1)
    }

    pub fn beats_to_sec(&self, beats: f64) -> f64 {
        beats * 60.0 / self.tempo_bpm
    }

    /// Score indices belonging to a measure.
    pub fn events_in_measure(&self, measure: usize) -> impl Iterator<Item = &ReferenceEvent> {
        self.events.iter().filter(move |e| e.measure_index == measure)
    }
}

fn to_beats(whole: Fraction) -> f64 {
    4.0 * *whole.numer() as f64 / *whole.denom() as f64
}

/// Flattens a score into chord events. Sounding notes that start at the same
/// position merge into one event, across voices too. Rests produce nothing.
pub fn score_to_reference(score: &Score, tempo_bpm: f64) -> ReferenceEvents {
    assert!(tempo_bpm > 0.0, "tempo must be positive");
    let starts = score.measure_starts();
    let mut groups: BTreeMap<Fraction, (usize, Fraction, Vec<u8>)> = BTreeMap::new();
    for (mi, m) in score.measures.iter().enumerate() {
        for e in m.events.iter().filter(|e| !e.is_rest()) {
            let at = starts[mi] + e.onset;
            let entry = groups.entry(at).or_insert_with(|| (mi, Fraction::from_integer(0), Vec::new()));
            entry.1 = entry.1.max(e.duration.as_fraction());
            entry.2.extend(e.pitches.iter().map(|p| p.midi().clamp(0, 127) as u8));
        }
    }
    let events = groups
        .into_iter()
        .enumerate()
        .map(|(score_index, (at, (measure_index, dur, mut pitches)))| {
            pitches.sort_unstable();
            pitches.dedup();
            let onset_beats = to_beats(at);
            ReferenceEvent {
                score_index,
                measure_index,
                onset_beats,
                duration_beats: to_beats(dur),
                onset_sec: onset_beats * 60.0 / tempo_bpm,
                pitches,
            }
        })
        .collect();
    let mut measure_starts_beats: Vec<f64> = starts.iter().map(|s| to_beats(*s)).collect();
    measure_starts_beats.push(to_beats(score.total_length()));
    ReferenceEvents { tempo_bpm, events, measure_starts_beats }
}

pub const DEFAULT_VELOCITY: u8 = 80;

/// Plays every reference event exactly at its nominal time and length.
pub fn render_reference(reference: &ReferenceEvents) -> PerformanceNotes {
    let notes = reference
        .events
        .iter()
        .flat_map(|e| {
            let offset = e.onset_sec + reference.beats_to_sec(e.duration_beats);
            e.pitches.iter().map(move |&pitch| PerfNote {
                pitch,
                onset_sec: e.onset_sec,
                offset_sec: offset,
                velocity: DEFAULT_VELOCITY,
            })
        })
        .collect();
    PerformanceNotes::new(notes)
}

/// Symbolic rendering of a score at a fixed tempo.
pub fn render_score(score: &Score, tempo_bpm: f64) -> PerformanceNotes {
    render_reference(&score_to_reference(score, tempo_bpm))
}
