//! Score and performance file formats: MusicXML, Standard MIDI Files, and
//! the timed event lists used by alignment.

mod midi;
mod musicxml;
mod performance;

use std::path::Path;

use thiserror::Error;

use crate::score::{parse_abc, AbcError, Score, ScoreError};

pub use midi::{export_midi, parse_midi, parse_midi_detailed, MidiParse};
pub use musicxml::{parse_musicxml, parse_musicxml_detailed, parse_mxl, read_mxl, MusicXmlParse};
pub use performance::{
    render_reference, render_score, score_to_reference, PerfNote, PerformanceNotes, ReferenceEvent, ReferenceEvents,
    DEFAULT_VELOCITY,
};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("XML syntax error: {0}")]
    XmlSyntax(String),
    #[error("unsupported layout: {0}")]
    UnsupportedLayout(String),
    #[error("invalid MusicXML: {0}")]
    InvalidMusicXml(String),
    #[error("MIDI file is truncated")]
    TruncatedFile,
    #[error("invalid MIDI: {0}")]
    Midi(String),
    #[error("archive error: {0}")]
    Archive(String),
    #[error("unrecognized file format: {0}")]
    UnknownFormat(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Abc(#[from] AbcError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Symbolic file kinds the library and CLI accept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolicFormat {
    Abc,
    MusicXml,
    Midi,
}

impl SymbolicFormat {
    /// Guesses the format from a file name, falling back to the content.
    pub fn detect(name: &str, bytes: &[u8]) -> Option<SymbolicFormat> {
        let lower = name.to_ascii_lowercase();
        let ext = lower.rsplit_once('.').map_or("", |(_, e)| e);
        match ext {
            "abc" => return Some(SymbolicFormat::Abc),
            "xml" | "musicxml" | "mxl" => return Some(SymbolicFormat::MusicXml),
            "mid" | "midi" | "smf" => return Some(SymbolicFormat::Midi),
            _ => {}
        }
        if bytes.starts_with(b"MThd") {
            return Some(SymbolicFormat::Midi);
        }
        if bytes.starts_with(b"PK") {
            return Some(SymbolicFormat::MusicXml);
        }
        let head = String::from_utf8_lossy(&bytes[..bytes.len().min(512)]);
        if head.contains("<score-partwise")
            || head.contains("<score-timewise")
            || head.trim_start().starts_with("<?xml")
        {
            Some(SymbolicFormat::MusicXml)
        } else if head.lines().any(|l| l.starts_with("X:") || l.starts_with("K:")) {
            Some(SymbolicFormat::Abc)
        } else {
            None
        }
    }
}

fn utf8(bytes: &[u8], name: &str) -> Result<String, FormatError> {
    String::from_utf8(bytes.to_vec()).map_err(|_| FormatError::UnknownFormat(format!("{name} is not UTF-8 text")))
}

/// Parses an ABC or MusicXML (plain or compressed) score from memory.
pub fn load_score_bytes(name: &str, bytes: &[u8]) -> Result<Score, FormatError> {
    match SymbolicFormat::detect(name, bytes) {
        Some(SymbolicFormat::Abc) => Ok(parse_abc(&utf8(bytes, name)?)?),
        Some(SymbolicFormat::MusicXml) if bytes.starts_with(b"PK") => Ok(parse_mxl(bytes)?.score),
        Some(SymbolicFormat::MusicXml) => parse_musicxml(&utf8(bytes, name)?),
        Some(SymbolicFormat::Midi) => {
            Err(FormatError::UnknownFormat(format!("{name}: MIDI files are performances, not scores")))
        }
        None => Err(FormatError::UnknownFormat(name.to_string())),
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    std::fs::read(path).map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

pub fn load_score(path: &Path) -> Result<Score, FormatError> {
    load_score_bytes(&path.to_string_lossy(), &read_file(path)?)
}
