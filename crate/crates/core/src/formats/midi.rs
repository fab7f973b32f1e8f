//! Standard MIDI File reading (formats 0 and 1) and format-0 writing.

use std::collections::{HashMap, VecDeque};

use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};

use super::performance::{PerfNote, PerformanceNotes};
use super::FormatError;

const DEFAULT_TEMPO_USEC: u32 = 500_000;
const PERCUSSION_CHANNEL: u8 = 9;

/// Parsed notes plus any recoverable problems found on the way.
#[derive(Debug, Clone, Default)]
pub struct MidiParse {
    pub notes: PerformanceNotes,
    pub warnings: Vec<String>,
}

/// Checks chunk framing so a cut-off file reports `TruncatedFile` rather than
/// a generic parse failure.
fn check_framing(bytes: &[u8]) -> Result<(), FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::TruncatedFile);
    }
    if &bytes[..4] != b"MThd" {
        return Err(FormatError::Midi("missing MThd header".into()));
    }
    let declared = bytes.get(10..12).map(|b| u16::from_be_bytes([b[0], b[1]])).ok_or(FormatError::TruncatedFile)?;
    let mut pos = 0usize;
    let mut tracks = 0u16;
    while pos < bytes.len() {
        let header = bytes.get(pos..pos + 8).ok_or(FormatError::TruncatedFile)?;
        let len = u32::from_be_bytes([header[4], header[5], header[6], header[7]]) as usize;
        pos = pos.checked_add(8 + len).ok_or(FormatError::TruncatedFile)?;
        if pos > bytes.len() {
            return Err(FormatError::TruncatedFile);
        }
        tracks += u16::from(&header[..4] == b"MTrk");
    }
    if tracks < declared {
        return Err(FormatError::TruncatedFile);
    }
    Ok(())
}

enum Clock {
    Metrical { ppq: u16 },
    Timecode { seconds_per_tick: f64 },
}

/// Maps ticks to seconds through a tempo map.
struct TempoMap {
    clock: Clock,
    /// (tick, seconds at tick, microseconds per quarter from tick on)
    segments: Vec<(u64, f64, u32)>,
}

impl TempoMap {
    fn new(clock: Clock, mut changes: Vec<(u64, u32)>) -> Self {
        changes.sort_by_key(|c| c.0);
        let mut segments = vec![(0u64, 0.0f64, DEFAULT_TEMPO_USEC)];
        if let Clock::Metrical { ppq } = clock {
            for (tick, tempo) in changes {
                let &(t0, s0, u0) = segments.last().expect("non-empty");
                let secs = s0 + (tick - t0) as f64 * u0 as f64 / 1e6 / ppq as f64;
                if tick == t0 {
                    segments.pop();
                }
                segments.push((tick, secs, tempo));
            }
        }
        Self { clock, segments }
    }

    fn seconds(&self, tick: u64) -> f64 {
        match self.clock {
            Clock::Timecode { seconds_per_tick } => tick as f64 * seconds_per_tick,
            Clock::Metrical { ppq } => {
                let idx = self.segments.partition_point(|s| s.0 <= tick).saturating_sub(1);
                let (t0, s0, u0) = self.segments[idx];
                s0 + (tick - t0) as f64 * u0 as f64 / 1e6 / ppq as f64
            }
        }
    }
}

pub fn parse_midi(bytes: &[u8]) -> Result<PerformanceNotes, FormatError> {
    parse_midi_detailed(bytes).map(|p| p.notes)
}

/// Absolute-tick view of one track.
fn absolute<'a>(track: &[TrackEvent<'a>]) -> Vec<(u64, TrackEventKind<'a>)> {
    let mut tick = 0u64;
    track
        .iter()
        .map(|e| {
            tick += e.delta.as_int() as u64;
            (tick, e.kind)
        })
        .collect()
}

/// Reads a Standard MIDI File. Note-ons pair FIFO with note-offs per
/// (track, channel, pitch); unterminated notes close at the end of their
/// track with a warning. The percussion channel is skipped.
pub fn parse_midi_detailed(bytes: &[u8]) -> Result<MidiParse, FormatError> {
    check_framing(bytes)?;
    let smf = Smf::parse(bytes).map_err(|e| FormatError::Midi(e.to_string()))?;
    if smf.header.format == Format::Sequential {
        return Err(FormatError::Midi("SMF format 2 is not supported".into()));
    }
    let clock = match smf.header.timing {
        Timing::Metrical(ppq) if ppq.as_int() > 0 => Clock::Metrical { ppq: ppq.as_int() },
        Timing::Metrical(_) => return Err(FormatError::Midi("zero ticks per quarter note".into())),
        Timing::Timecode(fps, sub) if sub > 0 => {
            Clock::Timecode { seconds_per_tick: 1.0 / (fps.as_f32() as f64 * sub as f64) }
        }
        Timing::Timecode(..) => return Err(FormatError::Midi("invalid SMPTE division".into())),
    };
    let tracks: Vec<Vec<(u64, TrackEventKind<'_>)>> = smf.tracks.iter().map(|t| absolute(t)).collect();
    let tempo_changes: Vec<(u64, u32)> = tracks
        .iter()
        .flatten()
        .filter_map(|(tick, kind)| match kind {
            TrackEventKind::Meta(MetaMessage::Tempo(t)) => Some((*tick, t.as_int())),
            _ => None,
        })
        .collect();
    let tempo = TempoMap::new(clock, tempo_changes);

    let mut warnings = Vec::new();
    let mut notes = Vec::new();
    let mut skipped_percussion = false;
    for (ti, track) in tracks.iter().enumerate() {
        let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
        let end_tick = track.last().map_or(0, |e| e.0);
        let mut push = |pitch: u8, on: u64, off: u64, velocity: u8, warnings: &mut Vec<String>| {
            if off <= on {
                warnings.push(format!("track {ti}: zero-length note {pitch} at tick {on} dropped"));
                return;
            }
            notes.push(PerfNote { pitch, onset_sec: tempo.seconds(on), offset_sec: tempo.seconds(off), velocity });
        };
        for (tick, kind) in track {
            let TrackEventKind::Midi { channel, message } = kind else { continue };
            let channel = channel.as_int();
            let (pitch, velocity) = match message {
                MidiMessage::NoteOn { key, vel } => (key.as_int(), vel.as_int()),
                MidiMessage::NoteOff { key, .. } => (key.as_int(), 0),
                _ => continue,
            };
            if channel == PERCUSSION_CHANNEL {
                skipped_percussion = true;
                continue;
            }
            if velocity > 0 {
                open.entry((channel, pitch)).or_default().push_back((*tick, velocity));
            } else if let Some((on, v)) = open.get_mut(&(channel, pitch)).and_then(VecDeque::pop_front) {
                push(pitch, on, *tick, v, &mut warnings);
            }
        }
        let mut dangling: Vec<((u8, u8), (u64, u8))> =
            open.into_iter().flat_map(|(k, q)| q.into_iter().map(move |v| (k, v))).collect();
        dangling.sort_by_key(|&((c, p), (t, _))| (t, c, p));
        for ((channel, pitch), (on, velocity)) in dangling {
            warnings.push(format!(
                "track {ti}: dangling note-on (channel {channel}, pitch {pitch}, tick {on}) closed at end of track"
            ));
            push(pitch, on, end_tick, velocity, &mut warnings);
        }
    }
    if skipped_percussion {
        warnings.push("percussion channel 10 skipped".into());
    }
    Ok(MidiParse { notes: PerformanceNotes::new(notes), warnings })
}

/// Writes a format-0 file on channel 1 with a single tempo. Times are
/// rounded to the nearest tick; every note lasts at least one tick.
/// Velocities are clamped to 1..=127 since velocity 0 means note-off.
pub fn export_midi(notes: &PerformanceNotes, ppq: u16, tempo_bpm: f64) -> Vec<u8> {
    assert!(ppq > 0 && ppq < 0x8000, "ppq must be in 1..32768");
    assert!(tempo_bpm > 0.0, "tempo must be positive");
    let ticks_per_sec = ppq as f64 * tempo_bpm / 60.0;
    // (tick, order, message); note-offs sort before note-ons at the same tick.
    let mut events: Vec<(u64, u8, MidiMessage)> = Vec::with_capacity(notes.len() * 2);
    for n in &notes.notes {
        let on = (n.onset_sec * ticks_per_sec).round().max(0.0) as u64;
        let off = ((n.offset_sec * ticks_per_sec).round() as u64).max(on + 1);
        let key = u7::new(n.pitch.min(127));
        events.push((on, 1, MidiMessage::NoteOn { key, vel: u7::new(n.velocity.clamp(1, 127)) }));
        events.push((off, 0, MidiMessage::NoteOff { key, vel: u7::new(0) }));
    }
    events.sort_by_key(|e| (e.0, e.1, note_key(&e.2)));

    let usec = (60e6 / tempo_bpm).round().clamp(1.0, 0xff_ffff as f64) as u32;
    let mut track =
        vec![TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(usec))) }];
    let mut last = 0u64;
    for (tick, _, message) in events {
        track.push(TrackEvent {
            delta: u28::new((tick - last) as u32),
            kind: TrackEventKind::Midi { channel: u4::new(0), message },
        });
        last = tick;
    }
    track.push(TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::EndOfTrack) });

    let mut smf = Smf::new(Header::new(Format::SingleTrack, Timing::Metrical(u15::new(ppq))));
    smf.tracks.push(track);
    let mut out = Vec::new();
    smf.write_std(&mut out).expect("writing to a Vec cannot fail");
    out
}

fn note_key(m: &MidiMessage) -> u8 {
    match m {
        MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => key.as_int(),
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smf(format: u16, ppq: u16, tracks: &[Vec<u8>]) -> Vec<u8> {
        let mut out = b"MThd".to_vec();
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&format.to_be_bytes());
        out.extend_from_slice(&(tracks.len() as u16).to_be_bytes());
        out.extend_from_slice(&ppq.to_be_bytes());
        for t in tracks {
            out.extend_from_slice(b"MTrk");
            out.extend_from_slice(&(t.len() as u32).to_be_bytes());
            out.extend_from_slice(t);
        }
        out
    }

    const TEMPO_120: [u8; 7] = [0xff, 0x51, 0x03, 0x07, 0xa1, 0x20, 0x00];

    #[test]
    fn single_note_at_120_bpm() {
        let mut t = vec![0x00];
        t.extend_from_slice(&TEMPO_120[..6]);
        t.extend_from_slice(&[0x00, 0x90, 60, 80, 0x83, 0x60, 0x80, 60, 0, 0x00, 0xff, 0x2f, 0x00]);
        let notes = parse_midi(&smf(0, 480, &[t])).unwrap();
        assert_eq!(notes.notes, vec![PerfNote { pitch: 60, onset_sec: 0.0, offset_sec: 0.5, velocity: 80 }]);
    }

    #[test]
    fn empty_track() {
        let notes = parse_midi(&smf(1, 480, &[vec![0x00, 0xff, 0x2f, 0x00]])).unwrap();
        assert!(notes.is_empty());
    }

    #[test]
    fn overlapping_same_pitch_pairs_fifo() {
        // on@0 v100, on@240 v50 (running status), off@480, off@720
        let t = vec![
            0x00, 0x90, 64, 100, 0x81, 0x70, 64, 50, 0x81, 0x70, 64, 0, 0x81, 0x70, 0x80, 64, 0, 0x00, 0xff, 0x2f, 0x00,
        ];
        let notes = parse_midi(&smf(0, 480, &[t])).unwrap();
        assert_eq!(notes.len(), 2);
        assert_eq!((notes.notes[0].velocity, notes.notes[0].offset_sec), (100, 0.5));
        assert_eq!((notes.notes[1].velocity, notes.notes[1].offset_sec), (50, 0.75));
    }

    #[test]
    fn dangling_note_closed_with_warning() {
        let t = vec![0x00, 0x90, 60, 80, 0x83, 0x60, 0xff, 0x2f, 0x00];
        let parsed = parse_midi_detailed(&smf(0, 480, &[t])).unwrap();
        assert_eq!(parsed.notes.len(), 1);
        assert_eq!(parsed.notes.notes[0].offset_sec, 0.5);
        assert_eq!(parsed.warnings.len(), 1);
    }

    #[test]
    fn tempo_change_in_conductor_track() {
        // Track 0: 120 bpm, then 60 bpm at tick 480. Track 1: notes at 0 and 960.
        let mut t0 = vec![0x00];
        t0.extend_from_slice(&TEMPO_120[..6]);
        t0.extend_from_slice(&[0x83, 0x60, 0xff, 0x51, 0x03, 0x0f, 0x42, 0x40, 0x00, 0xff, 0x2f, 0x00]);
        let t1 = vec![
            0x00, 0x90, 60, 80, 0x83, 0x60, 0x80, 60, 0, 0x83, 0x60, 0x90, 62, 80, 0x83, 0x60, 0x80, 62, 0, 0x00, 0xff,
            0x2f, 0x00,
        ];
        let notes = parse_midi(&smf(1, 480, &[t0, t1])).unwrap();
        assert_eq!(notes.notes[1].onset_sec, 1.5);
        assert_eq!(notes.notes[1].offset_sec, 2.5);
    }

    #[test]
    fn percussion_skipped() {
        let t = vec![0x00, 0x99, 36, 100, 0x60, 0x89, 36, 0, 0x00, 0xff, 0x2f, 0x00];
        let parsed = parse_midi_detailed(&smf(0, 96, &[t])).unwrap();
        assert!(parsed.notes.is_empty());
        assert!(!parsed.warnings.is_empty());
    }

    #[test]
    fn truncated_input() {
        let full = export_midi(
            &PerformanceNotes::new(vec![PerfNote { pitch: 60, onset_sec: 0.0, offset_sec: 1.0, velocity: 90 }]),
            480,
            120.0,
        );
        for cut in [3, 10, 14, full.len() - 3] {
            assert!(matches!(parse_midi(&full[..cut]), Err(FormatError::TruncatedFile)), "cut at {cut}");
        }
    }

    #[test]
    fn export_empty_is_valid() {
        let bytes = export_midi(&PerformanceNotes::default(), 480, 120.0);
        assert!(parse_midi(&bytes).unwrap().is_empty());
    }
}
