use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ScoreError;

/// Exact musical time, measured in whole notes.
pub type Fraction = Ratio<i64>;

pub fn frac(num: i64, den: i64) -> Fraction {
    Ratio::new(num, den)
}

/// Serde helpers that write fractions as `"n/d"` strings.
pub(crate) mod fraction_str {
    use super::*;

    pub fn serialize<S: Serializer>(value: &Fraction, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_fraction(value))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Fraction, D::Error> {
        let text = String::deserialize(d)?;
        parse_fraction(&text).ok_or_else(|| serde::de::Error::custom(format!("bad fraction {text:?}")))
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(value: &Option<Fraction>, s: S) -> Result<S::Ok, S::Error> {
            match value {
                Some(v) => s.serialize_some(&format_fraction(v)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Fraction>, D::Error> {
            match Option::<String>::deserialize(d)? {
                Some(text) => parse_fraction(&text)
                    .map(Some)
                    .ok_or_else(|| serde::de::Error::custom(format!("bad fraction {text:?}"))),
                None => Ok(None),
            }
        }
    }
}

pub fn format_fraction(value: &Fraction) -> String {
    if *value.denom() == 1 {
        value.numer().to_string()
    } else {
        format!("{}/{}", value.numer(), value.denom())
    }
}

pub fn parse_fraction(text: &str) -> Option<Fraction> {
    let text = text.trim();
    match text.split_once('/') {
        Some((n, d)) => {
            let n: i64 = n.trim().parse().ok()?;
            let d: i64 = d.trim().parse().ok()?;
            (d != 0).then(|| Ratio::new(n, d))
        }
        None => text.parse::<i64>().ok().map(Ratio::from_integer),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Step {
    C,
    D,
    E,
    F,
    G,
    A,
    B,
}

impl Step {
    pub const ALL: [Step; 7] = [Step::C, Step::D, Step::E, Step::F, Step::G, Step::A, Step::B];

    /// Semitones above C within the octave.
    pub fn semitone(self) -> i32 {
        match self {
            Step::C => 0,
            Step::D => 2,
            Step::E => 4,
            Step::F => 5,
            Step::G => 7,
            Step::A => 9,
            Step::B => 11,
        }
    }

    pub fn from_letter(c: char) -> Option<Step> {
        Some(match c.to_ascii_uppercase() {
            'C' => Step::C,
            'D' => Step::D,
            'E' => Step::E,
            'F' => Step::F,
            'G' => Step::G,
            'A' => Step::A,
            'B' => Step::B,
            _ => return None,
        })
    }

    pub fn letter(self) -> char {
        match self {
            Step::C => 'C',
            Step::D => 'D',
            Step::E => 'E',
            Step::F => 'F',
            Step::G => 'G',
            Step::A => 'A',
            Step::B => 'B',
        }
    }
}

/// A spelled pitch. Octave numbers follow scientific pitch notation, so C4
/// is middle C (MIDI 60).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pitch {
    pub step: Step,
    pub alter: i8,
    pub octave: i8,
}

impl Pitch {
    pub fn new(step: Step, alter: i8, octave: i8) -> Self {
        Self { step, alter, octave }
    }

    pub fn midi(&self) -> i32 {
        12 * (self.octave as i32 + 1) + self.step.semitone() + self.alter as i32
    }

    /// Spells a MIDI number using sharps.
    pub fn from_midi(midi: i32) -> Self {
        const SPELLING: [(Step, i8); 12] = [
            (Step::C, 0),
            (Step::C, 1),
            (Step::D, 0),
            (Step::D, 1),
            (Step::E, 0),
            (Step::F, 0),
            (Step::F, 1),
            (Step::G, 0),
            (Step::G, 1),
            (Step::A, 0),
            (Step::A, 1),
            (Step::B, 0),
        ];
        let (step, alter) = SPELLING[midi.rem_euclid(12) as usize];
        Pitch { step, alter, octave: (midi.div_euclid(12) - 1) as i8 }
    }

    pub fn in_range(&self, range: &PitchRange) -> bool {
        (range.low..=range.high).contains(&self.midi())
    }
}

impl Ord for Pitch {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.midi(), self.step, self.alter).cmp(&(other.midi(), other.step, other.alter))
    }
}

impl PartialOrd for Pitch {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Pitch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let acc = match self.alter {
            a if a > 0 => "#".repeat(a as usize),
            a if a < 0 => "b".repeat((-a) as usize),
            _ => String::new(),
        };
        write!(f, "{}{}{}", self.step.letter(), acc, self.octave)
    }
}

/// Inclusive MIDI bounds used for range validation (piano keyboard by default).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PitchRange {
    pub low: i32,
    pub high: i32,
}

impl Default for PitchRange {
    fn default() -> Self {
        Self { low: 21, high: 108 }
    }
}

/// A positive note length in whole notes, always stored in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Duration(Fraction);

impl Duration {
    pub fn new(numer: i64, denom: i64) -> Result<Self, ScoreError> {
        if denom == 0 {
            return Err(ScoreError::InvalidDuration(format!("{numer}/0")));
        }
        Self::from_fraction(Ratio::new(numer, denom))
    }

    pub fn from_fraction(value: Fraction) -> Result<Self, ScoreError> {
        if value <= Fraction::from_integer(0) {
            return Err(ScoreError::InvalidDuration(format_fraction(&value)));
        }
        Ok(Duration(value))
    }

    pub fn numer(&self) -> i64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> i64 {
        *self.0.denom()
    }

    pub fn as_fraction(&self) -> Fraction {
        self.0
    }

    pub fn as_f64(&self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }
}

impl fmt::Display for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_fraction(&self.0))
    }
}

impl Serialize for Duration {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        fraction_str::serialize(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for Duration {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = fraction_str::deserialize(d)?;
        Duration::from_fraction(value).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimeSignature {
    pub numerator: u32,
    pub denominator: u32,
}

impl TimeSignature {
    pub fn new(numerator: u32, denominator: u32) -> Self {
        Self { numerator, denominator }
    }

    /// Length of a full measure in whole notes.
    pub fn length(&self) -> Fraction {
        frac(self.numerator as i64, self.denominator as i64)
    }

    pub fn is_compound(&self) -> bool {
        self.numerator % 3 == 0 && self.numerator > 3
    }
}

impl Default for TimeSignature {
    fn default() -> Self {
        Self::new(4, 4)
    }
}

impl fmt::Display for TimeSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

impl FromStr for TimeSignature {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "C" => return Ok(TimeSignature::new(4, 4)),
            "C|" => return Ok(TimeSignature::new(2, 2)),
            _ => {}
        }
        let bad = || ScoreError::InvalidMeter(s.to_string());
        let (n, d) = s.split_once('/').ok_or_else(bad)?;
        // Additive numerators like "2+3" are summed.
        let mut numerator = 0u32;
        for part in n.split('+') {
            numerator += part.trim().parse::<u32>().map_err(|_| bad())?;
        }
        let denominator: u32 = d.trim().parse().map_err(|_| bad())?;
        if numerator == 0 || denominator == 0 {
            return Err(bad());
        }
        Ok(TimeSignature::new(numerator, denominator))
    }
}

impl Serialize for TimeSignature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TimeSignature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Major,
    Minor,
    Dorian,
    Phrygian,
    Lydian,
    Mixolydian,
    Locrian,
}

impl Mode {
    /// Offset in fifths relative to the major key on the same tonic.
    pub fn fifths_offset(self) -> i32 {
        match self {
            Mode::Major => 0,
            Mode::Minor => -3,
            Mode::Dorian => -2,
            Mode::Phrygian => -4,
            Mode::Lydian => 1,
            Mode::Mixolydian => -1,
            Mode::Locrian => -5,
        }
    }

    fn abc_suffix(self) -> &'static str {
        match self {
            Mode::Major => "",
            Mode::Minor => "m",
            Mode::Dorian => "dor",
            Mode::Phrygian => "phr",
            Mode::Lydian => "lyd",
            Mode::Mixolydian => "mix",
            Mode::Locrian => "loc",
        }
    }

    fn parse(word: &str) -> Option<Mode> {
        let w = word.to_ascii_lowercase();
        if w.is_empty() {
            return Some(Mode::Major);
        }
        let prefix = |p: &str| w.len() >= 3 && w.starts_with(&p[..3]);
        Some(if w == "m" || prefix("min") || prefix("aeolian") {
            Mode::Minor
        } else if prefix("maj") || prefix("ionian") {
            Mode::Major
        } else if prefix("dorian") {
            Mode::Dorian
        } else if prefix("phrygian") {
            Mode::Phrygian
        } else if prefix("lydian") {
            Mode::Lydian
        } else if prefix("mixolydian") {
            Mode::Mixolydian
        } else if prefix("locrian") {
            Mode::Locrian
        } else {
            return None;
        })
    }
}

/// Key signature as a count of fifths (positive = sharps) plus mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct KeySignature {
    pub fifths: i32,
    pub mode: Mode,
}

const MAJOR_TONICS: [(&str, i32); 15] = [
    ("Cb", -7),
    ("Gb", -6),
    ("Db", -5),
    ("Ab", -4),
    ("Eb", -3),
    ("Bb", -2),
    ("F", -1),
    ("C", 0),
    ("G", 1),
    ("D", 2),
    ("A", 3),
    ("E", 4),
    ("B", 5),
    ("F#", 6),
    ("C#", 7),
];

impl KeySignature {
    pub fn new(fifths: i32, mode: Mode) -> Self {
        Self { fifths, mode }
    }

    /// Alteration the key applies to a step.
    pub fn alter_for(&self, step: Step) -> i8 {
        const SHARPS: [Step; 7] = [Step::F, Step::C, Step::G, Step::D, Step::A, Step::E, Step::B];
        if self.fifths > 0 {
            let n = self.fifths.min(7) as usize;
            if SHARPS[..n].contains(&step) {
                return 1;
            }
        } else if self.fifths < 0 {
            let n = (-self.fifths).min(7) as usize;
            if SHARPS.iter().rev().take(n).any(|s| *s == step) {
                return -1;
            }
        }
        0
    }

    /// Parses the value of an ABC `K:` field, e.g. `G`, `Am`, `Bb mixolydian`.
    pub fn parse_abc(value: &str) -> Result<KeySignature, ScoreError> {
        let value = value.split('%').next().unwrap_or("").trim();
        let bad = || ScoreError::InvalidKey(value.to_string());
        if value.is_empty() || value.eq_ignore_ascii_case("none") || value == "HP" || value == "Hp" {
            return Ok(KeySignature::default());
        }
        let mut chars = value.chars();
        let letter = chars.next().ok_or_else(bad)?;
        if Step::from_letter(letter).is_none() || !letter.is_ascii_uppercase() {
            return Err(bad());
        }
        let rest = chars.as_str();
        let (accidental, rest) = match rest.chars().next() {
            Some('#') => ("#", &rest[1..]),
            Some('b') => ("b", &rest[1..]),
            _ => ("", rest),
        };
        let tonic = format!("{letter}{accidental}");
        let major = MAJOR_TONICS
            .iter()
            .find(|(name, _)| *name == tonic)
            .map(|(_, f)| *f)
            .or_else(|| {
                // Tonics outside the 15 standard majors (e.g. D# minor).
                let step = Step::from_letter(letter)?;
                let base = MAJOR_TONICS.iter().find(|(n, _)| n.len() == 1 && n.starts_with(step.letter()))?.1;
                Some(base + if accidental == "#" { 7 } else { -7 })
            })
            .ok_or_else(bad)?;
        // Mode word, ignoring trailing clef or explicit-accidental tokens.
        let mode_word = rest.split_whitespace().next().unwrap_or("");
        let mode = if mode_word.starts_with(['^', '_', '=']) || mode_word.contains('=') {
            Mode::Major
        } else {
            Mode::parse(mode_word).unwrap_or(Mode::Major)
        };
        Ok(KeySignature { fifths: major + mode.fifths_offset(), mode })
    }

    pub fn to_abc(&self) -> String {
        let major_fifths = self.fifths - self.mode.fifths_offset();
        let tonic = MAJOR_TONICS
            .iter()
            .find(|(_, f)| *f == major_fifths)
            .map(|(n, _)| n.to_string())
            .unwrap_or_else(|| "C".to_string());
        format!("{}{}", tonic, self.mode.abc_suffix())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteEvent {
    /// Offset from the start of the owning measure, in whole notes.
    #[serde(with = "fraction_str")]
    pub onset: Fraction,
    pub duration: Duration,
    /// Sorted, distinct pitches. Empty for a rest.
    pub pitches: Vec<Pitch>,
    pub voice: String,
    #[serde(default)]
    pub tie_start: bool,
    #[serde(default)]
    pub tie_end: bool,
}

impl NoteEvent {
    pub fn is_rest(&self) -> bool {
        self.pitches.is_empty()
    }

    pub fn end(&self) -> Fraction {
        self.onset + self.duration.as_fraction()
    }

    pub fn midi_pitches(&self) -> Vec<i32> {
        self.pitches.iter().map(Pitch::midi).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measure {
    pub index: usize,
    pub time_signature: TimeSignature,
    pub key_signature: KeySignature,
    /// Actual length of an incomplete (pickup) measure; `None` for full measures.
    #[serde(default, with = "fraction_str::option")]
    pub pickup: Option<Fraction>,
    pub events: Vec<NoteEvent>,
}

impl Measure {
    pub fn new(index: usize, time_signature: TimeSignature, key_signature: KeySignature) -> Self {
        Self { index, time_signature, key_signature, pickup: None, events: Vec::new() }
    }

    /// Notated length: the pickup length if flagged, otherwise the meter length.
    pub fn length(&self) -> Fraction {
        self.pickup.unwrap_or_else(|| self.time_signature.length())
    }

    pub fn is_pickup(&self) -> bool {
        self.pickup.is_some()
    }

    pub fn voice_events<'a>(&'a self, voice: &'a str) -> impl Iterator<Item = &'a NoteEvent> + 'a {
        self.events.iter().filter(move |e| e.voice == voice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub title: String,
    pub composer: String,
    pub default_unit_length: Duration,
    pub measures: Vec<Measure>,
    pub voices: Vec<String>,
}

/// A sounding note at an absolute score position, used for equivalence checks.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct FlatEvent {
    pub measure: usize,
    pub voice: String,
    pub onset: Fraction,
    pub duration: Fraction,
    pub pitches: Vec<Pitch>,
}

impl Score {
    pub fn new(title: impl Into<String>) -> Self {
        Score {
            title: title.into(),
            composer: String::new(),
            default_unit_length: Duration::new(1, 8).expect("1/8 is positive"),
            measures: Vec::new(),
            voices: vec!["1".to_string()],
        }
    }

    /// Absolute start of every measure in whole notes.
    pub fn measure_starts(&self) -> Vec<Fraction> {
        let mut starts = Vec::with_capacity(self.measures.len());
        let mut pos = Fraction::from_integer(0);
        for m in &self.measures {
            starts.push(pos);
            pos += m.length();
        }
        starts
    }

    pub fn total_length(&self) -> Fraction {
        self.measures.iter().map(Measure::length).sum()
    }

    pub fn event_count(&self) -> usize {
        self.measures.iter().map(|m| m.events.len()).sum()
    }

    /// Sounding events in canonical order. Rests are excluded.
    pub fn sounding_events(&self) -> Vec<FlatEvent> {
        let mut out: Vec<FlatEvent> = self
            .measures
            .iter()
            .flat_map(|m| {
                m.events.iter().filter(|e| !e.is_rest()).map(move |e| FlatEvent {
                    measure: m.index,
                    voice: e.voice.clone(),
                    onset: e.onset,
                    duration: e.duration.as_fraction(),
                    pitches: e.pitches.clone(),
                })
            })
            .collect();
        out.sort();
        out
    }

    /// Same sounding pitches, onsets and durations per measure, and the same
    /// meter for every measure.
    pub fn event_equivalent(&self, other: &Score) -> bool {
        self.measures.len() == other.measures.len()
            && self.measures.iter().zip(&other.measures).all(|(a, b)| a.time_signature == b.time_signature)
            && self.sounding_events() == other.sounding_events()
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        for (i, m) in self.measures.iter().enumerate() {
            if m.index != i {
                return Err(ScoreError::Invariant(format!("measure {i} has index {}", m.index)));
            }
            for e in &m.events {
                if e.onset < Fraction::from_integer(0) {
                    return Err(ScoreError::Invariant(format!("negative onset in measure {i}")));
                }
                if !self.voices.contains(&e.voice) {
                    return Err(ScoreError::Invariant(format!("unknown voice {:?} in measure {i}", e.voice)));
                }
                if e.pitches.windows(2).any(|w| w[0] == w[1]) {
                    return Err(ScoreError::Invariant(format!("duplicate chord pitch in measure {i}")));
                }
            }
        }
        Ok(())
    }
}
