//! ABC output, plus measure-wise split and concatenation.

use std::collections::HashMap;
use std::fmt::Write as _;

use num_integer::Integer;

use super::abc::{assemble, parse_fragment_raw, RawMeasure, RawTune, DEFAULT_VOICE};
use super::model::{format_fraction, Fraction, KeySignature, Pitch, Score, Step, TimeSignature};
use super::AbcError;

/// Largest unit-length denominator accepted when no power-of-two unit fits.
const MAX_UNIT_DENOM: i64 = 1 << 20;

/// A stretch of one voice inside one measure: a note, chord or rest.
#[derive(Debug, Clone)]
struct Segment {
    length: Fraction,
    pitches: Vec<Pitch>,
    tie: bool,
}

#[derive(Debug)]
struct MeasurePlan {
    time_signature: TimeSignature,
    key: KeySignature,
    voices: Vec<(String, Vec<Segment>)>,
}

/// A voice's sounding span in absolute whole-note time.
struct Span {
    start: Fraction,
    end: Fraction,
    pitches: Vec<Pitch>,
    dangling_tie: bool,
}

fn voice_spans(score: &Score, starts: &[Fraction], voice: &str) -> Result<Vec<Span>, AbcError> {
    let mut spans: Vec<(usize, Span)> = Vec::new();
    for (mi, m) in score.measures.iter().enumerate() {
        for e in m.voice_events(voice) {
            let start = starts[mi] + e.onset;
            spans.push((
                mi,
                Span {
                    start,
                    end: start + e.duration.as_fraction(),
                    pitches: e.pitches.clone(),
                    dangling_tie: e.tie_start,
                },
            ));
        }
    }
    spans.sort_by(|a, b| a.1.start.cmp(&b.1.start));
    for w in spans.windows(2) {
        if w[1].1.start < w[0].1.end {
            return Err(AbcError::OverlappingEvents { measure: w[1].0, voice: voice.to_string() });
        }
    }
    Ok(spans.into_iter().map(|(_, s)| s).collect())
}

fn plan(score: &Score) -> Result<Vec<MeasurePlan>, AbcError> {
    let starts = score.measure_starts();
    let spans: Vec<Vec<Span>> =
        score.voices.iter().map(|v| voice_spans(score, &starts, v)).collect::<Result<_, _>>()?;
    let mut plans = Vec::with_capacity(score.measures.len());
    for (mi, m) in score.measures.iter().enumerate() {
        let ms = starts[mi];
        let me = ms + m.length();
        let mut voices = Vec::with_capacity(score.voices.len());
        for (vi, voice) in score.voices.iter().enumerate() {
            let mut segs = Vec::new();
            let mut cursor = ms;
            for span in spans[vi].iter().filter(|s| s.start < me && s.end > ms) {
                let s = span.start.max(ms);
                let e = span.end.min(me);
                if s > cursor {
                    segs.push(Segment { length: s - cursor, pitches: Vec::new(), tie: false });
                }
                let is_rest = span.pitches.is_empty();
                let continues = e < span.end;
                segs.push(Segment {
                    length: e - s,
                    pitches: span.pitches.clone(),
                    tie: !is_rest && (continues || span.dangling_tie),
                });
                cursor = e;
            }
            if cursor < me {
                segs.push(Segment { length: me - cursor, pitches: Vec::new(), tie: false });
            }
            voices.push((voice.clone(), segs));
        }
        plans.push(MeasurePlan { time_signature: m.time_signature, key: m.key_signature, voices });
    }
    Ok(plans)
}

fn is_pow2_small(den: i64) -> bool {
    den > 0 && den <= 64 && (den & (den - 1)) == 0
}

/// Keeps the score's unit length when every segment is a simple multiple of
/// it; otherwise falls back to one over the lcm of all denominators.
fn choose_unit(score: &Score, plans: &[MeasurePlan]) -> Result<Fraction, AbcError> {
    let preferred = score.default_unit_length.as_fraction();
    let lengths = plans.iter().flat_map(|p| p.voices.iter().flat_map(|(_, segs)| segs.iter().map(|s| s.length)));
    let mut simple = true;
    let mut lcm: i64 = 1;
    for len in lengths {
        simple &= is_pow2_small(*(len / preferred).denom());
        lcm = lcm.lcm(len.denom());
        if lcm > MAX_UNIT_DENOM {
            return Err(AbcError::UnrepresentableDuration(format_fraction(&len)));
        }
    }
    Ok(if simple { preferred } else { Fraction::new(1, lcm) })
}

fn write_length(out: &mut String, multiple: Fraction) {
    let (n, d) = (*multiple.numer(), *multiple.denom());
    match (n, d) {
        (1, 1) => {}
        (n, 1) => write!(out, "{n}").unwrap(),
        (1, d) => write!(out, "/{d}").unwrap(),
        (n, d) => write!(out, "{n}/{d}").unwrap(),
    }
}

/// Per-voice state the parser keeps between notes, mirrored so accidentals
/// are written exactly when the parser would infer something else.
#[derive(Default)]
struct VoiceWriter {
    accidentals: HashMap<(Step, i8), i8>,
    carry: Option<Vec<Pitch>>,
}

impl VoiceWriter {
    fn write_pitch(&mut self, out: &mut String, p: &Pitch, key: &KeySignature) {
        let slot = (p.step, p.octave);
        let carried = self
            .carry
            .as_ref()
            .and_then(|ps| ps.iter().find(|c| c.step == p.step && c.octave == p.octave))
            .map(|c| c.alter);
        let implied = carried.or_else(|| self.accidentals.get(&slot).copied()).unwrap_or_else(|| key.alter_for(p.step));
        if p.alter != implied {
            let sign = match p.alter {
                0 => "=",
                a if a > 0 => "^",
                _ => "_",
            };
            for _ in 0..p.alter.unsigned_abs().max(1) {
                out.push_str(sign);
            }
            self.accidentals.insert(slot, p.alter);
        }
        let letter = p.step.letter();
        if p.octave >= 5 {
            out.push(letter.to_ascii_lowercase());
            for _ in 5..p.octave {
                out.push('\'');
            }
        } else {
            out.push(letter);
            for _ in p.octave..4 {
                out.push(',');
            }
        }
    }

    fn write_segment(&mut self, out: &mut String, seg: &Segment, unit: Fraction, key: &KeySignature) {
        let multiple = seg.length / unit;
        match seg.pitches.len() {
            0 => {
                out.push('z');
                write_length(out, multiple);
            }
            1 => {
                self.write_pitch(out, &seg.pitches[0], key);
                write_length(out, multiple);
            }
            _ => {
                out.push('[');
                for p in &seg.pitches {
                    self.write_pitch(out, p, key);
                }
                out.push(']');
                write_length(out, multiple);
            }
        }
        self.carry = None;
        if seg.tie {
            out.push('-');
            self.carry = Some(seg.pitches.clone());
        }
    }
}

fn needs_voice_fields(score: &Score) -> bool {
    score.voices.len() > 1 || score.voices.first().is_some_and(|v| v != DEFAULT_VOICE)
}

fn render_measure(
    plan: &MeasurePlan,
    unit: Fraction,
    writers: &mut [VoiceWriter],
    voice_fields: bool,
    out: &mut String,
) {
    for (vi, (voice, segs)) in plan.voices.iter().enumerate() {
        if vi > 0 {
            out.push(' ');
        }
        if voice_fields {
            write!(out, "[V:{voice}] ").unwrap();
        }
        let writer = &mut writers[vi];
        writer.accidentals.clear();
        for seg in segs {
            writer.write_segment(out, seg, unit, &plan.key);
        }
        out.push_str(" |");
    }
}

/// Writes a score as a single ABC tune. Repeats appear unrolled and tied
/// notes that cross barlines are split with `-`.
pub fn serialize_abc(score: &Score) -> Result<String, AbcError> {
    score.validate()?;
    let plans = plan(score)?;
    let unit = choose_unit(score, &plans)?;
    let voice_fields = needs_voice_fields(score);
    let mut out = String::from("X:1\n");
    if !score.title.is_empty() {
        writeln!(out, "T:{}", score.title).unwrap();
    }
    if !score.composer.is_empty() {
        writeln!(out, "C:{}", score.composer).unwrap();
    }
    let first = plans.first();
    let meter = first.map(|p| p.time_signature).unwrap_or_default();
    let key = first.map(|p| p.key).unwrap_or_default();
    writeln!(out, "M:{meter}").unwrap();
    writeln!(out, "L:{}", format_fraction(&unit)).unwrap();
    if voice_fields {
        for v in &score.voices {
            writeln!(out, "V:{v}").unwrap();
        }
    }
    writeln!(out, "K:{}", key.to_abc()).unwrap();

    let mut writers: Vec<VoiceWriter> = score.voices.iter().map(|_| VoiceWriter::default()).collect();
    let (mut meter, mut key) = (meter, key);
    for p in &plans {
        if p.time_signature != meter {
            write!(out, "[M:{}] ", p.time_signature).unwrap();
            meter = p.time_signature;
        }
        if p.key != key {
            write!(out, "[K:{}] ", p.key.to_abc()).unwrap();
            key = p.key;
        }
        render_measure(p, unit, &mut writers, voice_fields, &mut out);
        out.push('\n');
    }
    Ok(out)
}

/// Splits a score into standalone per-measure fragments, each paired with
/// the meter active in that measure.
pub fn split_measures(score: &Score) -> Result<Vec<(String, TimeSignature)>, AbcError> {
    score.validate()?;
    let plans = plan(score)?;
    let unit = choose_unit(score, &plans)?;
    let voice_fields = needs_voice_fields(score);
    Ok(plans
        .iter()
        .map(|p| {
            // Fresh writer state: a fragment must parse without its neighbours.
            let mut writers: Vec<VoiceWriter> = p.voices.iter().map(|_| VoiceWriter::default()).collect();
            let mut text = format!("[K:{}][L:{}] ", p.key.to_abc(), format_fraction(&unit));
            render_measure(p, unit, &mut writers, voice_fields, &mut text);
            (text, p.time_signature)
        })
        .collect())
}

/// Rebuilds a score from measure fragments in order. Each fragment must hold
/// exactly one measure per voice; ties may span fragment boundaries.
pub fn concat_measures(fragments: &[(String, TimeSignature)]) -> Result<Score, AbcError> {
    if fragments.is_empty() {
        return Err(AbcError::NoMusic);
    }
    let wrap = |index: usize, e: AbcError| AbcError::FragmentParseError { index, source: Box::new(e) };
    let mut tune =
        RawTune { title: String::new(), composer: String::new(), unit: Fraction::new(1, 8), voices: Vec::new() };
    for (index, (text, meter)) in fragments.iter().enumerate() {
        let raw = parse_fragment_raw(text, *meter).map_err(|e| wrap(index, e))?;
        if index == 0 {
            tune.unit = raw.unit;
        }
        if raw.voices.is_empty() {
            return Err(wrap(index, AbcError::NoMusic));
        }
        for (voice, measures) in raw.voices {
            if measures.len() != 1 {
                let found =
                    AbcError::InvalidField(format!("expected one measure for voice {voice}, found {}", measures.len()));
                return Err(wrap(index, found));
            }
            let slot = match tune.voices.iter().position(|(v, _)| *v == voice) {
                Some(p) => p,
                None => {
                    tune.voices.push((voice, Vec::new()));
                    tune.voices.len() - 1
                }
            };
            let list = &mut tune.voices[slot].1;
            while list.len() < index {
                list.push(empty_measure(&measures[0]));
            }
            list.extend(measures);
        }
    }
    assemble(tune, false).map_err(|e| match e {
        AbcError::MeasureOverflow { measure, .. } => wrap(measure, e),
        other => other,
    })
}

fn empty_measure(like: &RawMeasure) -> RawMeasure {
    RawMeasure { events: Vec::new(), time_signature: like.time_signature, key: like.key, marks: Default::default() }
}
