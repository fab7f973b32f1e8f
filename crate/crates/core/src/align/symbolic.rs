//! Note-clocked alignment of a performed note list against reference events.
//!
//! State layout for `n` events: `2i` is "extra note before event i"
//! (`2n` is after the last event) and `2i + 1` is "playing event i".

use serde::{Deserialize, Serialize};

use crate::formats::{PerformanceNotes, ReferenceEvents};

use super::{
    build_hmm, extract_correspondences, viterbi_switched, AlignError, AlignmentResult, SparseTransitions,
    TransitionParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SymbolicAlignConfig {
    pub transitions: TransitionParams,
    /// Emission probability of a pitch outside the event's set.
    pub eps_mismatch: f64,
    /// Emission probability of any note in an extra state.
    pub eps_extra: f64,
    /// Probability of entering an extra state after a note.
    pub match_to_extra: f64,
    /// Notes starting within this many seconds of the previous note count as
    /// struck together.
    pub chord_window_sec: f64,
    /// Probability of staying in a chord when the next note is not struck
    /// together with the previous one.
    pub chord_apart: f64,
}

impl Default for SymbolicAlignConfig {
    fn default() -> Self {
        Self {
            transitions: TransitionParams::default(),
            eps_mismatch: 1e-3,
            eps_extra: 1e-2,
            match_to_extra: 0.05,
            chord_window_sec: 0.05,
            chord_apart: 1e-3,
        }
    }
}

fn match_state(i: usize) -> usize {
    2 * i + 1
}

fn extra_state(i: usize) -> usize {
    2 * i
}

pub fn align_symbolic(
    performance: &PerformanceNotes,
    reference: &ReferenceEvents,
    config: &SymbolicAlignConfig,
) -> Result<AlignmentResult, AlignError> {
    if performance.is_empty() {
        return Err(AlignError::EmptyInput("performance has no notes"));
    }
    if reference.is_empty() {
        return Err(AlignError::EmptyInput("reference has no events"));
    }
    let n = reference.len();
    let states = 2 * n + 1;
    let hmm = build_hmm(reference, config.transitions);
    let stay = config.match_to_extra;

    // Two tables: one for a note struck together with its predecessor, one
    // for a note that starts later. Only the first lets a chord continue
    // cheaply; a k-note event then expects k - 1 more notes.
    let table = |together: bool| {
        let mut trans = SparseTransitions::new(states);
        for i in 0..n {
            let k = reference.events[i].pitches.len().max(1) as f64;
            let chord = if k == 1.0 {
                0.0
            } else if together {
                (k - 1.0) / k
            } else {
                config.chord_apart
            };
            trans.add(match_state(i), match_state(i), chord);
            trans.add(match_state(i), extra_state(i + 1), (1.0 - chord) * stay);
            for (j, &p) in hmm.transitions[i].iter().enumerate() {
                trans.add(match_state(i), match_state(j), (1.0 - chord) * (1.0 - stay) * p);
            }
        }
        for i in 0..=n {
            trans.add(extra_state(i), extra_state(i), stay);
            let row = if i == 0 { &hmm.entry } else { &hmm.transitions[i - 1] };
            for (j, &p) in row.iter().enumerate() {
                trans.add(extra_state(i), match_state(j), (1.0 - stay) * p);
            }
        }
        trans.finish();
        trans
    };
    let tables = [table(false), table(true)];
    let notes = &performance.notes;
    let select = |t: usize| usize::from(notes[t].onset_sec - notes[t - 1].onset_sec <= config.chord_window_sec);
    let mut init = vec![f64::NEG_INFINITY; states];
    init[extra_state(0)] = stay.ln();
    for (j, &p) in hmm.entry.iter().enumerate() {
        init[match_state(j)] = ((1.0 - stay) * p).ln();
    }

    let (hit, miss, extra) = ((1.0 - config.eps_mismatch).ln(), config.eps_mismatch.ln(), config.eps_extra.ln());
    let emit = |t: usize, s: usize| {
        if s % 2 == 0 {
            extra
        } else if reference.events[s / 2].pitches.contains(&performance.notes[t].pitch) {
            hit
        } else {
            miss
        }
    };
    let decoded = viterbi_switched(performance.len(), &init, &tables, select, emit)?;
    let assignment: Vec<Option<usize>> =
        decoded.path.iter().map(|&s| if s % 2 == 1 { Some(s / 2) } else { None }).collect();
    let mut result = extract_correspondences(&assignment, performance, reference);
    result.path = decoded.path;
    result.log_prob = decoded.log_prob;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{render_score, score_to_reference, PerfNote};
    use crate::score::parse_abc;

    fn setup(abc: &str) -> (ReferenceEvents, PerformanceNotes) {
        let s = parse_abc(abc).unwrap();
        (score_to_reference(&s, 120.0), render_score(&s, 120.0))
    }

    #[test]
    fn self_alignment() {
        let (r, p) = setup("X:1\nM:4/4\nL:1/8\nK:D\n[DFA]2 F2 A2 d2|[Ace]4 c2 A2|d8|");
        let a = align_symbolic(&p, &r, &SymbolicAlignConfig::default()).unwrap();
        assert_eq!(a.matched.len(), p.len());
        assert!(a.missing.is_empty() && a.extra.is_empty());
        a.check_partition(p.len(), r.len()).unwrap();
    }

    #[test]
    fn chord_boundaries_follow_onsets() {
        // The smaller chord shares pitches with the next one; only timing
        // keeps its top note from being absorbed there.
        let (r, p) = setup("X:1\nM:4/4\nL:1/4\nK:F\n[FAc] [GBd] [Ac] [FAc]|[EGc]2 [FAc]2|");
        let a = align_symbolic(&p, &r, &SymbolicAlignConfig::default()).unwrap();
        assert!(a.missing.is_empty() && a.extra.is_empty(), "{:?} {:?}", a.missing, a.extra);
        assert_eq!(a.matched.iter().filter(|m| m.1 == 2).count(), 2);
    }

    #[test]
    fn inserted_wrong_note_is_extra() {
        let (r, mut p) = setup("X:1\nM:4/4\nL:1/4\nK:C\nCDEF|GABc|");
        p.notes.insert(3, PerfNote { pitch: 61, onset_sec: 1.2, offset_sec: 1.4, velocity: 80 });
        let p = PerformanceNotes::new(p.notes);
        let wrong = p.notes.iter().position(|n| n.pitch == 61).unwrap();
        let a = align_symbolic(&p, &r, &SymbolicAlignConfig::default()).unwrap();
        assert_eq!(a.extra, vec![wrong]);
        assert!(a.missing.is_empty());
    }

    #[test]
    fn deleted_note_is_missing() {
        let (r, mut p) = setup("X:1\nM:4/4\nL:1/4\nK:C\nCDEF|GABc|");
        p.notes.remove(4);
        let a = align_symbolic(&p, &r, &SymbolicAlignConfig::default()).unwrap();
        assert_eq!(a.missing, vec![4]);
        assert!(a.extra.is_empty());
    }

    #[test]
    fn forward_only_path_is_monotone() {
        let (r, mut p) = setup("X:1\nM:4/4\nL:1/4\nK:C\nCDEF|GABc|CDEF|");
        p.notes.swap(2, 6);
        let config = SymbolicAlignConfig { transitions: TransitionParams::forward_only(), ..Default::default() };
        let a = align_symbolic(&p, &r, &config).unwrap();
        let tops: Vec<usize> = a.path.iter().filter(|s| *s % 2 == 1).map(|s| s / 2).collect();
        assert!(tops.windows(2).all(|w| w[0] <= w[1]), "{tops:?}");
    }

    #[test]
    fn empty_inputs() {
        let (r, p) = setup("X:1\nK:C\nC|");
        assert!(align_symbolic(&PerformanceNotes::default(), &r, &SymbolicAlignConfig::default()).is_err());
        let empty = ReferenceEvents { tempo_bpm: 120.0, events: vec![], measure_starts_beats: vec![0.0] };
        assert!(align_symbolic(&p, &empty, &SymbolicAlignConfig::default()).is_err());
    }
}
