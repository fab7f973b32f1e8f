//! Measure-level structure shared by the symbolic parsers: repeat unrolling,
//! pickup detection and tie merging.

use std::collections::HashSet;

use super::model::{Fraction, Measure, NoteEvent};

/// Repeat and ending marks attached to a notated measure.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BarMarks {
    pub repeat_start: bool,
    pub repeat_end: bool,
    /// First-/second-ending number starting at this measure.
    pub ending: Option<u32>,
}

impl BarMarks {
    pub fn merge(&mut self, other: BarMarks) {
        self.repeat_start |= other.repeat_start;
        self.repeat_end |= other.repeat_end;
        if self.ending.is_none() {
            self.ending = other.ending;
        }
    }
}

/// Expands repeats and endings into the performed order of notated measures.
pub fn unroll_repeats(marks: &[BarMarks]) -> Vec<usize> {
    let n = marks.len();
    // Ending that applies to each measure. An ending closed by a repeat and
    // followed by another ending runs through that repeat; otherwise it
    // covers only its own measure.
    let mut ending_of = vec![None; n];
    for i in 0..n {
        let Some(e) = marks[i].ending else { continue };
        ending_of[i] = Some(e);
        let mut j = i;
        let closed = loop {
            if marks[j].repeat_end {
                break Some(j);
            }
            j += 1;
            if j >= n || marks[j].ending.is_some() || marks[j].repeat_start {
                break None;
            }
        };
        if let Some(end) = closed.filter(|&end| end + 1 < n && marks[end + 1].ending.is_some()) {
            for slot in &mut ending_of[i..=end] {
                *slot = Some(e);
            }
        }
    }

    let mut order = Vec::with_capacity(n);
    let mut start = 0;
    let mut pass = 1u32;
    let mut i = 0;
    // A malformed structure must not loop forever.
    let budget = 4 * n + 8;
    while i < n && order.len() < budget {
        if marks[i].repeat_start && i != start {
            start = i;
            pass = 1;
        }
        if let Some(e) = ending_of[i] {
            if e != pass {
                i += 1;
                continue;
            }
        }
        order.push(i);
        if marks[i].repeat_end {
            if pass == 1 {
                pass = 2;
                i = start;
                continue;
            }
            pass = 1;
            start = i + 1;
        } else if pass >= 2 && ending_of[i].is_some() && (i + 1 >= n || ending_of[i + 1].is_none()) {
            pass = 1;
            start = i + 1;
        }
        i += 1;
    }
    order
}

/// Absolute start of each measure, in whole notes.
pub fn measure_starts(measures: &[Measure]) -> Vec<Fraction> {
    let mut pos = Fraction::from_integer(0);
    measures
        .iter()
        .map(|m| {
            let s = pos;
            pos += m.length();
            s
        })
        .collect()
}

/// Merges tied notes of equal pitch into single sounding events. The merged
/// event stays in the measure where it starts and may extend past its end.
pub fn merge_ties(measures: &mut [Measure], voices: &[String]) {
    let starts = measure_starts(measures);
    let mut removed: HashSet<(usize, usize)> = HashSet::new();
    for voice in voices {
        let mut refs: Vec<(usize, usize)> = Vec::new();
        for (mi, m) in measures.iter().enumerate() {
            let mut idx: Vec<usize> = (0..m.events.len()).filter(|&k| m.events[k].voice == *voice).collect();
            idx.sort_by_key(|&k| m.events[k].onset);
            refs.extend(idx.into_iter().map(|k| (mi, k)));
        }
        let mut open: Option<(usize, usize)> = None;
        for r in refs {
            let event = measures[r.0].events[r.1].clone();
            if let Some(o) = open {
                let head = &measures[o.0].events[o.1];
                let head_end = starts[o.0] + head.end();
                if head_end == starts[r.0] + event.onset && head.pitches == event.pitches && !event.is_rest() {
                    let head = &mut measures[o.0].events[o.1];
                    head.duration = super::model::Duration::from_fraction(
                        head.duration.as_fraction() + event.duration.as_fraction(),
                    )
                    .expect("sum of positive durations");
                    head.tie_start = event.tie_start;
                    removed.insert(r);
                    if !event.tie_start {
                        open = None;
                    }
                    continue;
                }
                open = None;
            }
            if event.tie_start && !event.is_rest() {
                open = Some(r);
            }
        }
    }
    if removed.is_empty() {
        return;
    }
    for (mi, m) in measures.iter_mut().enumerate() {
        let mut k = 0;
        m.events.retain(|_| {
            let keep = !removed.contains(&(mi, k));
            k += 1;
            keep
        });
    }
}

/// End position of a voice's events within a measure, or `None` if absent.
pub fn voice_extent(events: &[NoteEvent], voice: &str) -> Option<Fraction> {
    events.iter().filter(|e| e.voice == voice).map(NoteEvent::end).max()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn marks(spec: &[(bool, bool, Option<u32>)]) -> Vec<BarMarks> {
        spec.iter().map(|&(s, e, end)| BarMarks { repeat_start: s, repeat_end: e, ending: end }).collect()
    }

    #[test]
    fn no_repeats_is_identity() {
        assert_eq!(unroll_repeats(&[BarMarks::default(); 4]), vec![0, 1, 2, 3]);
    }

    #[test]
    fn simple_repeat() {
        // |: A B :| C
        let m = marks(&[(true, false, None), (false, true, None), (false, false, None)]);
        assert_eq!(unroll_repeats(&m), vec![0, 1, 0, 1, 2]);
    }

    #[test]
    fn repeat_from_beginning_without_start_mark() {
        // A B :| C
        let m = marks(&[(false, false, None), (false, true, None), (false, false, None)]);
        assert_eq!(unroll_repeats(&m), vec![0, 1, 0, 1, 2]);
    }

    #[test]
    fn first_and_second_endings() {
        // |: A |1 B :|2 C | D
        let m = marks(&[(true, false, None), (false, true, Some(1)), (false, false, Some(2)), (false, false, None)]);
        assert_eq!(unroll_repeats(&m), vec![0, 1, 0, 2, 3]);
    }

    #[test]
    fn repeat_after_final_ending_starts_fresh() {
        // |: A |1 B :|2 C | D :|
        let m = marks(&[(true, false, None), (false, true, Some(1)), (false, false, Some(2)), (false, true, None)]);
        assert_eq!(unroll_repeats(&m), vec![0, 1, 0, 2, 3, 3]);
    }

    #[test]
    fn two_sections() {
        // |: A :|: B :|
        let m = marks(&[(true, true, None), (true, true, None)]);
        assert_eq!(unroll_repeats(&m), vec![0, 0, 1, 1]);
    }
}
