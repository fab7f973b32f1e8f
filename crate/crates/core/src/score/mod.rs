//! Symbolic music model and ABC notation support.

mod abc;
mod model;
mod serialize;
mod structure;
mod tokenizer;

use thiserror::Error;

pub use abc::parse_abc;
pub use model::{
    format_fraction, frac, parse_fraction, Duration, FlatEvent, Fraction, KeySignature, Measure, Mode, NoteEvent,
    Pitch, PitchRange, Score, Step, TimeSignature,
};
pub use serialize::{concat_measures, serialize_abc, split_measures};
pub use structure::{measure_starts, merge_ties, unroll_repeats, BarMarks};
pub use tokenizer::{detokenize, tokenize_abc, tokenize_body, AbcToken, TokenKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("invalid duration {0}")]
    InvalidDuration(String),
    #[error("invalid meter {0:?}")]
    InvalidMeter(String),
    #[error("invalid key {0:?}")]
    InvalidKey(String),
    #[error("score invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AbcError {
    #[error("chord opened at byte {offset} is never closed")]
    UnbalancedChord { offset: usize },
    #[error("line {line}: header line without a field separator: {text:?}")]
    MalformedHeader { line: usize, text: String },
    #[error("missing K: header")]
    MissingKeyHeader,
    #[error("measure {measure} of voice {voice:?} exceeds its time signature")]
    MeasureOverflow { measure: usize, voice: String },
    #[error("invalid field {0}")]
    InvalidField(String),
    #[error("no music found")]
    NoMusic,
    #[error("duration cannot be written with a usable unit length: {0}")]
    UnrepresentableDuration(String),
    #[error("overlapping events in measure {measure} of voice {voice:?}")]
    OverlappingEvents { measure: usize, voice: String },
    #[error("fragment {index}: {source}")]
    FragmentParseError {
        index: usize,
        #[source]
        source: Box<AbcError>,
    },
    #[error(transparent)]
    Score(#[from] ScoreError),
}
