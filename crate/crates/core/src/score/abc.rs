//! ABC parser: token stream to [`Score`].
//!
//! Parsing runs in two stages. The first walks the tokens and produces raw
//! per-voice measures in notated order (ties unmerged, repeats not expanded).
//! The second assembles those into a [`Score`]: duration checks, repeat
//! unrolling and tie merging. Measure fragments reuse the second stage when
//! they are concatenated back into a piece.

use std::collections::HashMap;

use super::model::{frac, Duration, Fraction, KeySignature, Measure, NoteEvent, Pitch, Score, Step, TimeSignature};
use super::structure::{merge_ties, unroll_repeats, voice_extent, BarMarks};
use super::tokenizer::{tokenize_abc, tokenize_body, AbcToken, TokenKind};
use super::AbcError;

pub(crate) const DEFAULT_VOICE: &str = "1";

#[derive(Debug, Clone)]
pub(crate) struct RawMeasure {
    pub events: Vec<NoteEvent>,
    pub time_signature: TimeSignature,
    pub key: KeySignature,
    pub marks: BarMarks,
}

impl RawMeasure {
    fn new(ctx: &Context) -> Self {
        Self { events: Vec::new(), time_signature: ctx.meter, key: ctx.key, marks: BarMarks::default() }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RawTune {
    pub title: String,
    pub composer: String,
    pub unit: Fraction,
    /// Voices in order of first appearance with their notated measures.
    pub voices: Vec<(String, Vec<RawMeasure>)>,
}

#[derive(Debug, Clone, Copy)]
struct Context {
    meter: TimeSignature,
    unit: Fraction,
    key: KeySignature,
}

#[derive(Debug, Clone, Copy)]
struct Tuplet {
    factor: Fraction,
    remaining: u32,
}

struct VoiceState {
    id: String,
    measures: Vec<RawMeasure>,
    current: RawMeasure,
    time: Fraction,
    accidentals: HashMap<(Step, i8), i8>,
    tuplet: Option<Tuplet>,
    broken_next: Option<Fraction>,
    /// Pitches of the previous event when it ended with a tie.
    tie_carry: Option<Vec<Pitch>>,
    /// Marks seen before the first event of the current measure.
    pending_marks: BarMarks,
}

impl VoiceState {
    fn new(id: String, ctx: &Context) -> Self {
        Self {
            id,
            measures: Vec::new(),
            current: RawMeasure::new(ctx),
            time: Fraction::from_integer(0),
            accidentals: HashMap::new(),
            tuplet: None,
            broken_next: None,
            tie_carry: None,
            pending_marks: BarMarks::default(),
        }
    }

    fn close_measure(&mut self, ctx: &Context) {
        let mut finished = std::mem::replace(&mut self.current, RawMeasure::new(ctx));
        finished.marks.merge(std::mem::take(&mut self.pending_marks));
        self.measures.push(finished);
        self.time = Fraction::from_integer(0);
        self.accidentals.clear();
        self.broken_next = None;
    }
}

/// Parses a note length suffix (`""`, `3`, `/`, `3/2`, `//`) as a multiplier.
pub(crate) fn parse_length(text: &str) -> Fraction {
    let (num_part, rest) = match text.find('/') {
        Some(p) => (&text[..p], &text[p..]),
        None => (text, ""),
    };
    let mut value = Fraction::from_integer(num_part.parse::<i64>().unwrap_or(1));
    let mut rest = rest;
    while let Some(stripped) = rest.strip_prefix('/') {
        let digits: String = stripped.chars().take_while(char::is_ascii_digit).collect();
        let den = digits.parse::<i64>().unwrap_or(2).max(1);
        value /= Fraction::from_integer(den);
        rest = &stripped[digits.len()..];
    }
    value
}

struct NoteParts {
    explicit_alter: Option<i8>,
    step: Step,
    octave: i8,
    length: Fraction,
}

fn parse_note_lexeme(lexeme: &str) -> NoteParts {
    let bytes = lexeme.as_bytes();
    let mut i = 0;
    let mut alter: Option<i8> = None;
    while i < bytes.len() && matches!(bytes[i], b'^' | b'_' | b'=') {
        let delta = match bytes[i] {
            b'^' => 1,
            b'_' => -1,
            _ => 0,
        };
        alter = Some(alter.unwrap_or(0) + delta);
        i += 1;
    }
    let letter = bytes[i] as char;
    i += 1;
    let mut octave: i8 = if letter.is_ascii_lowercase() { 5 } else { 4 };
    while i < bytes.len() && matches!(bytes[i], b'\'' | b',') {
        octave += if bytes[i] == b'\'' { 1 } else { -1 };
        i += 1;
    }
    NoteParts {
        explicit_alter: alter,
        step: Step::from_letter(letter).expect("tokenizer guarantees a note letter"),
        octave,
        length: parse_length(&lexeme[i..]),
    }
}

fn default_unit(meter: TimeSignature) -> Fraction {
    if meter.length() < frac(3, 4) {
        frac(1, 16)
    } else {
        frac(1, 8)
    }
}

fn field_value(lexeme: &str) -> &str {
    let body = lexeme.trim_start_matches('[').trim_end_matches(']');
    let value = body.split_once(':').map_or("", |(_, v)| v);
    value.split('%').next().unwrap_or("").trim()
}

fn parse_unit(value: &str) -> Result<Fraction, AbcError> {
    let f = super::model::parse_fraction(value)
        .filter(|f| *f > Fraction::from_integer(0))
        .ok_or_else(|| AbcError::InvalidField(format!("L:{value}")))?;
    Ok(f)
}

struct Parser {
    ctx: Context,
    voices: Vec<VoiceState>,
    current: usize,
    title: Option<String>,
    composer: Option<String>,
    chord: Option<Vec<(Pitch, Fraction)>>,
    chord_tie: bool,
    /// Whether an explicit L: field was seen in the header.
    unit_set: bool,
}

impl Parser {
    fn new(ctx: Context) -> Self {
        Self {
            ctx,
            voices: Vec::new(),
            current: 0,
            title: None,
            composer: None,
            chord: None,
            chord_tie: false,
            unit_set: false,
        }
    }

    fn voice(&mut self) -> &mut VoiceState {
        if self.voices.is_empty() {
            self.voices.push(VoiceState::new(DEFAULT_VOICE.to_string(), &self.ctx));
        }
        &mut self.voices[self.current]
    }

    fn switch_voice(&mut self, value: &str) {
        let id = value.split_whitespace().next().unwrap_or(DEFAULT_VOICE).to_string();
        match self.voices.iter().position(|v| v.id == id) {
            Some(p) => self.current = p,
            None => {
                // An undeclared default voice with no music is replaced.
                if self.voices.len() == 1
                    && self.voices[0].id == DEFAULT_VOICE
                    && self.voices[0].measures.is_empty()
                    && self.voices[0].current.events.is_empty()
                {
                    self.voices[0] = VoiceState::new(id, &self.ctx);
                    self.current = 0;
                } else {
                    self.voices.push(VoiceState::new(id, &self.ctx));
                    self.current = self.voices.len() - 1;
                }
            }
        }
    }

    /// Applies an information field. Returns false when a new tune starts.
    fn field(&mut self, letter: char, value: &str, in_header: bool) -> Result<bool, AbcError> {
        match letter {
            'X' if !in_header => return Ok(false),
            'T' => {
                if self.title.is_none() {
                    self.title = Some(value.to_string());
                }
            }
            'C' if in_header => {
                if self.composer.is_none() {
                    self.composer = Some(value.to_string());
                }
            }
            'M' => {
                let meter: TimeSignature = value.parse().map_err(|_| AbcError::InvalidField(format!("M:{value}")))?;
                self.ctx.meter = meter;
                for v in &mut self.voices {
                    if v.current.events.is_empty() {
                        v.current.time_signature = meter;
                    }
                }
            }
            'L' => self.ctx.unit = parse_unit(value)?,
            'K' => {
                let key = KeySignature::parse_abc(value)?;
                self.ctx.key = key;
                for v in &mut self.voices {
                    if v.current.events.is_empty() {
                        v.current.key = key;
                    }
                }
            }
            'V' => self.switch_voice(value),
            _ => {}
        }
        Ok(true)
    }

    fn resolve_pitch(&mut self, parts: &NoteParts) -> Pitch {
        let key = self.ctx.key;
        let voice = self.voice();
        let slot = (parts.step, parts.octave);
        let alter = match parts.explicit_alter {
            Some(a) => {
                voice.accidentals.insert(slot, a);
                a
            }
            None => {
                let carried = voice
                    .tie_carry
                    .as_ref()
                    .and_then(|ps| ps.iter().find(|p| p.step == parts.step && p.octave == parts.octave))
                    .map(|p| p.alter);
                carried.or_else(|| voice.accidentals.get(&slot).copied()).unwrap_or_else(|| key.alter_for(parts.step))
            }
        };
        Pitch::new(parts.step, alter, parts.octave)
    }

    fn emit(&mut self, mut pitches: Vec<Pitch>, base: Fraction) -> Result<(), AbcError> {
        let voice = self.voice();
        let mut d = base;
        if let Some(t) = voice.tuplet.as_mut() {
            d *= t.factor;
            t.remaining -= 1;
            if t.remaining == 0 {
                voice.tuplet = None;
            }
        }
        if let Some(f) = voice.broken_next.take() {
            d *= f;
        }
        pitches.sort();
        pitches.dedup();
        let tie_end = voice.tie_carry.take().is_some();
        let duration = Duration::from_fraction(d).map_err(AbcError::Score)?;
        if voice.current.events.is_empty() {
            let marks = std::mem::take(&mut voice.pending_marks);
            voice.current.marks.merge(marks);
        }
        voice.current.events.push(NoteEvent {
            onset: voice.time,
            duration,
            pitches,
            voice: voice.id.clone(),
            tie_start: false,
            tie_end,
        });
        voice.time += d;
        Ok(())
    }

    fn tie(&mut self) {
        if self.chord.is_some() {
            self.chord_tie = true;
            return;
        }
        let voice = self.voice();
        if let Some(last) = voice.current.events.last_mut() {
            if !last.is_rest() {
                last.tie_start = true;
                voice.tie_carry = Some(last.pitches.clone());
            }
        }
    }

    fn broken(&mut self, lexeme: &str) {
        let n = lexeme.len() as i32;
        let short = Fraction::new(1, 1 << n);
        let long = Fraction::from_integer(2) - short;
        let (prev, next) = if lexeme.starts_with('>') { (long, short) } else { (short, long) };
        let voice = self.voice();
        if let Some(last) = voice.current.events.last_mut() {
            let old = last.duration.as_fraction();
            if let Ok(d) = Duration::from_fraction(old * prev) {
                last.duration = d;
                voice.time += old * prev - old;
                voice.broken_next = Some(next);
            }
        }
    }

    fn tuplet(&mut self, lexeme: &str) {
        let nums: Vec<u32> = lexeme[1..].split(':').map(|s| s.parse().unwrap_or(0)).collect();
        let p = nums.first().copied().filter(|&p| p > 0).unwrap_or(3);
        let compound = self.ctx.meter.is_compound();
        let q = nums.get(1).copied().filter(|&q| q > 0).unwrap_or(match p {
            2 | 4 | 8 => 3,
            3 | 6 => 2,
            _ if compound => 3,
            _ => 2,
        });
        let r = nums.get(2).copied().filter(|&r| r > 0).unwrap_or(p);
        self.voice().tuplet = Some(Tuplet { factor: Fraction::new(q as i64, p as i64), remaining: r });
    }

    fn barline(&mut self, lexeme: &str) {
        let ctx = self.ctx;
        let voice = self.voice();
        let ending: Option<u32> = {
            let digits: String =
                lexeme.chars().skip_while(|c| !c.is_ascii_digit()).take_while(char::is_ascii_digit).collect();
            digits.parse().ok()
        };
        let body = lexeme.trim_end_matches(|c: char| c.is_ascii_digit() || c == ',' || c == '-');
        let ends_repeat = body.starts_with(':');
        let starts_repeat = body.trim_end_matches(']').ends_with(':') || body.ends_with("|:");
        if ends_repeat {
            if !voice.current.events.is_empty() {
                voice.current.marks.repeat_end = true;
            } else if let Some(prev) = voice.measures.last_mut() {
                prev.marks.repeat_end = true;
            }
        }
        if !voice.current.events.is_empty() {
            voice.close_measure(&ctx);
        }
        if starts_repeat {
            voice.pending_marks.repeat_start = true;
        }
        if ending.is_some() {
            voice.pending_marks.ending = ending;
        }
    }

    fn rest(&mut self, lexeme: &str) -> Result<(), AbcError> {
        let kind = lexeme.as_bytes()[0];
        let length = parse_length(&lexeme[1..]);
        if kind == b'Z' || kind == b'X' {
            let count = lexeme[1..].parse::<usize>().unwrap_or(1).max(1);
            for k in 0..count {
                if k > 0 {
                    let ctx = self.ctx;
                    self.voice().close_measure(&ctx);
                }
                let full = self.voice().current.time_signature.length();
                self.emit(Vec::new(), full)?;
            }
            return Ok(());
        }
        let unit = self.ctx.unit;
        self.emit(Vec::new(), length * unit)
    }

    fn run(&mut self, tokens: &[AbcToken], mut in_header: bool) -> Result<(), AbcError> {
        for token in tokens {
            match token.kind {
                TokenKind::Separator | TokenKind::Decoration => {}
                TokenKind::HeaderField | TokenKind::Key | TokenKind::Meter | TokenKind::UnitLength => {
                    let letter = token.lexeme.chars().next().unwrap_or(' ');
                    let value = field_value(&token.lexeme);
                    if letter == 'L' && in_header {
                        self.unit_set = true;
                    }
                    if !self.field(letter, value, in_header)? {
                        break;
                    }
                    if token.kind == TokenKind::Key && in_header {
                        in_header = false;
                        if !self.unit_set {
                            self.ctx.unit = default_unit(self.ctx.meter);
                        }
                        let ctx = self.ctx;
                        for v in &mut self.voices {
                            v.current = RawMeasure::new(&ctx);
                        }
                    }
                }
                TokenKind::InlineField => {
                    let letter = token.lexeme[1..].chars().next().unwrap_or(' ');
                    self.field(letter, field_value(&token.lexeme), false)?;
                }
                TokenKind::Note => {
                    let parts = parse_note_lexeme(&token.lexeme);
                    let pitch = self.resolve_pitch(&parts);
                    match self.chord.as_mut() {
                        Some(chord) => chord.push((pitch, parts.length)),
                        None => {
                            let unit = self.ctx.unit;
                            self.emit(vec![pitch], parts.length * unit)?;
                        }
                    }
                }
                TokenKind::Rest => self.rest(&token.lexeme)?,
                TokenKind::ChordOpen => {
                    self.chord = Some(Vec::new());
                    self.chord_tie = false;
                }
                TokenKind::ChordClose => {
                    let notes = self.chord.take().unwrap_or_default();
                    if let Some(&(_, first_len)) = notes.first() {
                        let mult = parse_length(&token.lexeme[1..]);
                        let unit = self.ctx.unit;
                        self.emit(notes.into_iter().map(|(p, _)| p).collect(), first_len * mult * unit)?;
                        if self.chord_tie {
                            self.tie();
                        }
                    }
                }
                TokenKind::Barline => self.barline(&token.lexeme),
                TokenKind::Tuplet => self.tuplet(&token.lexeme),
                TokenKind::Tie => self.tie(),
                TokenKind::BrokenRhythm => self.broken(&token.lexeme),
            }
        }
        let ctx = self.ctx;
        for v in &mut self.voices {
            if !v.current.events.is_empty() {
                v.close_measure(&ctx);
            } else if v.pending_marks != BarMarks::default() {
                // Trailing marks (e.g. a final ":|") belong to the last measure.
                if let Some(last) = v.measures.last_mut() {
                    last.marks.repeat_end |= v.pending_marks.repeat_end;
                }
            }
        }
        Ok(())
    }

    fn into_raw(self) -> RawTune {
        RawTune {
            title: self.title.unwrap_or_default(),
            composer: self.composer.unwrap_or_default(),
            unit: self.ctx.unit,
            voices: self.voices.into_iter().map(|v| (v.id, v.measures)).collect(),
        }
    }
}

pub(crate) fn parse_raw(text: &str) -> Result<RawTune, AbcError> {
    let tokens = tokenize_abc(text)?;
    if !tokens.iter().any(|t| t.kind == TokenKind::Key) {
        return Err(AbcError::MissingKeyHeader);
    }
    let ctx = Context { meter: TimeSignature::default(), unit: frac(1, 8), key: KeySignature::default() };
    let mut parser = Parser::new(ctx);
    parser.run(&tokens, true)?;
    Ok(parser.into_raw())
}

/// Parses a headerless measure fragment under the given meter.
pub(crate) fn parse_fragment_raw(text: &str, meter: TimeSignature) -> Result<RawTune, AbcError> {
    let tokens = tokenize_body(text)?;
    let ctx = Context { meter, unit: frac(1, 8), key: KeySignature::default() };
    let mut parser = Parser::new(ctx);
    parser.unit_set = true;
    parser.run(&tokens, false)?;
    Ok(parser.into_raw())
}

pub fn parse_abc(text: &str) -> Result<Score, AbcError> {
    let raw = parse_raw(text)?;
    assemble(raw, true)
}

/// Builds a [`Score`] from raw notated measures: checks measure durations,
/// flags pickups, expands repeats (when `unroll`) and merges ties.
pub(crate) fn assemble(raw: RawTune, unroll: bool) -> Result<Score, AbcError> {
    let voices: Vec<String> = if raw.voices.is_empty() {
        vec![DEFAULT_VOICE.to_string()]
    } else {
        raw.voices.iter().map(|(id, _)| id.clone()).collect()
    };
    let count = raw.voices.iter().map(|(_, ms)| ms.len()).max().unwrap_or(0);
    if count == 0 {
        return Err(AbcError::NoMusic);
    }

    let mut notated: Vec<Measure> = Vec::with_capacity(count);
    let mut marks = vec![BarMarks::default(); count];
    for i in 0..count {
        let first = raw.voices.iter().find_map(|(_, ms)| ms.get(i)).expect("some voice has measure i");
        let mut measure = Measure::new(i, first.time_signature, first.key);
        let full = measure.time_signature.length();
        let mut extent = Fraction::from_integer(0);
        let mut underfull = false;
        for (voice, ms) in &raw.voices {
            let Some(rm) = ms.get(i) else { continue };
            marks[i].merge(rm.marks);
            let Some(end) = voice_extent(&rm.events, voice) else { continue };
            if end > full {
                return Err(AbcError::MeasureOverflow { measure: i, voice: voice.clone() });
            }
            underfull |= end < full;
            extent = extent.max(end);
            measure.events.extend(rm.events.iter().cloned());
        }
        if underfull && extent > Fraction::from_integer(0) {
            measure.pickup = Some(extent);
        }
        notated.push(measure);
    }

    let order: Vec<usize> = if unroll { unroll_repeats(&marks) } else { (0..count).collect() };
    let mut measures: Vec<Measure> = order
        .iter()
        .enumerate()
        .map(|(idx, &src)| {
            let mut m = notated[src].clone();
            m.index = idx;
            m
        })
        .collect();
    merge_ties(&mut measures, &voices);

    let score = Score {
        title: raw.title,
        composer: raw.composer,
        default_unit_length: Duration::from_fraction(raw.unit)?,
        measures,
        voices,
    };
    score.validate()?;
    Ok(score)
}
