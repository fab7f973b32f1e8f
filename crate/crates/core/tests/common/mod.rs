//! Fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cadenza_core::dsp::{synthesize, AudioBuffer, SynthNote, SynthOptions};
use cadenza_core::formats::PerformanceNotes;
use cadenza_core::score::{parse_abc, Score};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data")
}

/// The 20 hand-written ABC pieces, sorted by file name.
pub fn corpus() -> Vec<(String, String, Score)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(data_dir().join("corpus"))
        .expect("corpus directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "abc"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p).unwrap();
            let score = parse_abc(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            (p.file_name().unwrap().to_string_lossy().into_owned(), text, score)
        })
        .collect()
}

pub fn is_monophonic(score: &Score) -> bool {
    score.voices.len() == 1 && score.measures.iter().flat_map(|m| &m.events).all(|e| e.pitches.len() <= 1)
}

/// ABC spelling of a MIDI pitch with sharps (C4 = 60 = `C`).
pub fn abc_note(midi: i32) -> String {
    const NAMES: [&str; 12] = ["C", "^C", "D", "^D", "E", "F", "^F", "G", "^G", "A", "^A", "B"];
    let octave = midi.div_euclid(12) - 1;
    let name = NAMES[midi.rem_euclid(12) as usize];
    let (acc, letter) = name.split_at(name.len() - 1);
    match octave {
        o if o <= 4 => format!("{acc}{letter}{}", ",".repeat((4 - o) as usize)),
        o => format!("{acc}{}{}", letter.to_lowercase(), "'".repeat((o - 5) as usize)),
    }
}

/// One measure of notes; a natural after a sharp on the same staff
/// position gets an explicit `=`.
pub fn abc_measure(pitches: &[i32]) -> String {
    let mut sharpened: Vec<String> = Vec::new();
    let mut out = String::new();
    for &p in pitches {
        let note = abc_note(p);
        match note.strip_prefix('^') {
            Some(base) => {
                sharpened.push(base.to_string());
                out.push_str(&note);
            }
            None if sharpened.contains(&note) => {
                out.push('=');
                out.push_str(&note);
            }
            None => out.push_str(&note),
        }
    }
    out
}

const ADJECTIVES: [&str; 10] =
    ["Silver", "Hidden", "Golden", "Quiet", "Northern", "Crimson", "Distant", "Gentle", "Wild", "Broken"];
const NOUNS: [&str; 5] = ["River", "Lantern", "Harbour", "Meadow", "Bell"];

pub struct LibraryPiece {
    pub id: String,
    pub title: String,
    pub composer: String,
    /// Melody as MIDI pitches.
    pub line: Vec<i32>,
}

/// Random-walk melody of `len` notes with steps of 1 to 7 semitones.
pub fn random_melody(rng: &mut ChaCha8Rng, len: usize) -> Vec<i32> {
    let mut line = vec![rng.random_range(60..72)];
    while line.len() < len {
        let last = *line.last().unwrap();
        let step = rng.random_range(1..=7) * if rng.random_bool(0.5) { 1 } else { -1 };
        let next = last + step;
        line.push(if (55..=84).contains(&next) { next } else { last - step });
    }
    line
}

/// Writes a seeded library of monophonic ABC tunes (eight 4/4 measures of
/// eighth notes each). The first piece is "Kikujiro's Summer".
pub fn write_library(dir: &Path, count: usize, seed: u64) -> Vec<LibraryPiece> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pieces = Vec::with_capacity(count);
    for i in 0..count {
        let title = if i == 0 {
            "Kikujiro's Summer".to_string()
        } else {
            format!(
                "The {} {} {}",
                ADJECTIVES[i % 10],
                NOUNS[(i / 10) % 5],
                ["Air", "Reel", "Song", "Dance", "Waltz"][i % 5]
            )
        };
        let composer = format!("Composer {}", (b'A' + (i % 7) as u8) as char);
        let line = random_melody(&mut rng, 64);
        let body: Vec<String> = line.chunks(8).map(abc_measure).collect();
        let text = format!("X:{}\nT:{title}\nC:{composer}\nM:4/4\nL:1/8\nK:C\n{}|\n", i + 1, body.join("|"));
        let id = format!("piece{:02}.abc", i);
        std::fs::write(dir.join(&id), text).unwrap();
        pieces.push(LibraryPiece { id, title, composer, line });
    }
    pieces
}

/// Sine rendering of performed notes, delayed by `lead` seconds. Each note
/// is cut 40 ms short (never below half its length) so repeated pitches are
/// struck again rather than merged.
pub fn render_audio(notes: &PerformanceNotes, lead: f64) -> AudioBuffer {
    let mut synth = SynthNote::from_performance(notes, 0.4);
    for n in &mut synth {
        let length = n.offset_sec - n.onset_sec;
        n.offset_sec = n.onset_sec + (length - 0.04).max(length / 2.0) + lead;
        n.onset_sec += lead;
    }
    synthesize(&synth, &SynthOptions::default())
}
