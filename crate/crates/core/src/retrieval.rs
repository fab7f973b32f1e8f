//! Symbolic library indexing with metadata search and melodic fingerprint
//! matching.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::formats::{load_score_bytes, parse_midi, score_to_reference, PerformanceNotes, SymbolicFormat};
use crate::metrics::similarity_ratio;
use crate::score::Score;

pub const INDEX_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "library-index.json";
/// Intervals per n-gram.
pub const NGRAM: usize = 4;
pub const DEFAULT_EXPLICIT_THRESHOLD: f64 = 0.5;
/// Notes whose onsets fall within this window count as one sonority.
const ONSET_GROUP_SEC: f64 = 0.05;
const EXTENSIONS: [&str; 6] = ["abc", "xml", "musicxml", "mxl", "mid", "midi"];

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot read library directory {path}: {reason}")]
    DirectoryUnreadable { path: String, reason: String },
    #[error("probe has {got} notes; at least {needed} are required")]
    ProbeTooShort { needed: usize, got: usize },
    #[error("index file: {0}")]
    IndexFile(String),
}

/// Multiset of interval n-grams keyed by comma-joined semitone steps.
pub type Fingerprint = BTreeMap<String, u32>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMetadata {
    pub key: Option<String>,
    pub meter: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub id: String,
    pub title: String,
    pub composer: String,
    pub format: SymbolicFormat,
    /// Path relative to the library root, `/`-separated.
    pub path: String,
    pub metadata: EntryMetadata,
    pub fingerprint: Fingerprint,
    /// n-grams of every one-note-deleted variant of each window, so a single
    /// wrong or extra note in a probe still leaves exact matches.
    pub deletion_fingerprint: Fingerprint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryIndex {
    pub version: u32,
    pub entries: Vec<LibraryEntry>,
    #[serde(default)]
    pub skipped: Vec<SkipRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub entry_id: String,
    pub score: f64,
    pub match_kind: MatchKind,
}

/// Probe material for implicit matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "value")]
pub enum Probe {
    Notes(PerformanceNotes),
    Score(Score),
}

impl Probe {
    pub fn top_line(&self) -> Vec<i32> {
        match self {
            Probe::Notes(n) => top_line_from_notes(n),
            Probe::Score(s) => top_line_from_score(s),
        }
    }
}

/// Highest pitch of each score event.
pub fn top_line_from_score(score: &Score) -> Vec<i32> {
    score_to_reference(score, 120.0)
        .events
        .iter()
        .filter_map(|e| e.pitches.iter().max().map(|&p| i32::from(p)))
        .collect()
}

/// Highest pitch of each group of near-simultaneous onsets.
pub fn top_line_from_notes(notes: &PerformanceNotes) -> Vec<i32> {
    let mut line = Vec::new();
    let mut group_start = f64::NEG_INFINITY;
    for n in &notes.notes {
        if n.onset_sec - group_start > ONSET_GROUP_SEC {
            group_start = n.onset_sec;
            line.push(i32::from(n.pitch));
        } else if let Some(last) = line.last_mut() {
            *last = (*last).max(i32::from(n.pitch));
        }
    }
    line
}

fn intervals(line: &[i32]) -> Vec<i32> {
    line.windows(2).map(|w| w[1] - w[0]).collect()
}

fn gram_key(steps: &[i32]) -> String {
    steps.iter().map(i32::to_string).collect::<Vec<_>>().join(",")
}

/// Interval n-gram multiset of a pitch line.
pub fn fingerprint(line: &[i32]) -> Fingerprint {
    let mut fp = Fingerprint::new();
    for g in intervals(line).windows(NGRAM) {
        *fp.entry(gram_key(g)).or_default() += 1;
    }
    fp
}

/// n-grams of each (n+2)-note window with one interior note removed.
pub fn deletion_fingerprint(line: &[i32]) -> Fingerprint {
    let mut fp = Fingerprint::new();
    let width = NGRAM + 2;
    for w in line.windows(width) {
        for skip in 1..width - 1 {
            let reduced: Vec<i32> = w.iter().enumerate().filter(|&(i, _)| i != skip).map(|(_, &p)| p).collect();
            *fp.entry(gram_key(&intervals(&reduced))).or_default() += 1;
        }
    }
    fp
}

fn metadata_of(score: &Score) -> EntryMetadata {
    score.measures.first().map_or_else(EntryMetadata::default, |m| EntryMetadata {
        key: Some(m.key_signature.to_abc()),
        meter: Some(m.time_signature.to_string()),
    })
}

fn build_entry(rel: &str, bytes: &[u8]) -> Result<LibraryEntry, String> {
    let format = SymbolicFormat::detect(rel, bytes).ok_or_else(|| "unrecognized format".to_string())?;
    let stem = Path::new(rel).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let (title, composer, metadata, line) = match format {
        SymbolicFormat::Midi => {
            let notes = parse_midi(bytes).map_err(|e| e.to_string())?;
            (stem, String::new(), EntryMetadata::default(), top_line_from_notes(&notes))
        }
        _ => {
            let score = load_score_bytes(rel, bytes).map_err(|e| e.to_string())?;
            let title = if score.title.trim().is_empty() { stem } else { score.title.clone() };
            (title, score.composer.clone(), metadata_of(&score), top_line_from_score(&score))
        }
    };
    if line.is_empty() {
        return Err("no sounding notes".into());
    }
    Ok(LibraryEntry {
        id: rel.to_string(),
        title,
        composer,
        format,
        path: rel.to_string(),
        metadata,
        fingerprint: fingerprint(&line),
        deletion_fingerprint: deletion_fingerprint(&line),
    })
}

/// Indexes every ABC, MusicXML and MIDI file below `dir`. Files that fail to
/// parse are listed in `skipped`.
pub fn index_library(dir: &Path) -> Result<LibraryIndex, RetrievalError> {
    let unreadable = |reason: String| RetrievalError::DirectoryUnreadable { path: dir.display().to_string(), reason };
    std::fs::read_dir(dir).map_err(|e| unreadable(e.to_string()))?;
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for item in WalkDir::new(dir).sort_by_file_name() {
        let item = item.map_err(|e| unreadable(e.to_string()))?;
        if !item.file_type().is_file() {
            continue;
        }
        let ext = item.path().extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
        if !EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        let rel = item
            .path()
            .strip_prefix(dir)
            .unwrap_or(item.path())
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let result = std::fs::read(item.path()).map_err(|e| e.to_string()).and_then(|b| build_entry(&rel, &b));
        match result {
            Ok(entry) => entries.push(entry),
            Err(reason) => {
                log::warn!("skipping {rel}: {reason}");
                skipped.push(SkipRecord { path: rel, reason });
            }
        }
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(LibraryIndex { version: INDEX_VERSION, entries, skipped })
}

impl LibraryIndex {
    pub fn entry(&self, id: &str) -> Option<&LibraryEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("index serializes")
    }

    /// Writes `library-index.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), RetrievalError> {
        std::fs::write(dir.join(INDEX_FILE), self.to_json()).map_err(|e| RetrievalError::IndexFile(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<LibraryIndex, RetrievalError> {
        let text = std::fs::read_to_string(path).map_err(|e| RetrievalError::IndexFile(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| RetrievalError::IndexFile(e.to_string()))
    }
}

fn rank(mut hits: Vec<RetrievalHit>) -> Vec<RetrievalHit> {
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.entry_id.cmp(&b.entry_id)));
    hits
}

/// Fuzzy title/composer search with the default threshold.
pub fn search_explicit(index: &LibraryIndex, query: &str) -> Vec<RetrievalHit> {
    search_explicit_with(index, query, DEFAULT_EXPLICIT_THRESHOLD)
}

/// Score = best `1 - levenshtein / max_len` over the lower-cased title and
/// composer. Hits below `threshold` are dropped.
pub fn search_explicit_with(index: &LibraryIndex, query: &str, threshold: f64) -> Vec<RetrievalHit> {
    let q = query.to_lowercase();
    let hits = index
        .entries
        .iter()
        .filter_map(|e| {
            let score = [&e.title, &e.composer]
                .into_iter()
                .filter(|f| !f.is_empty())
                .map(|f| similarity_ratio(&q, &f.to_lowercase()))
                .fold(0.0, f64::max);
            (score >= threshold && score > 0.0).then(|| RetrievalHit {
                entry_id: e.id.clone(),
                score,
                match_kind: MatchKind::Explicit,
            })
        })
        .collect();
    rank(hits)
}

/// Smoothed inverse document frequency of each gram over the index.
fn idf_table<'a>(
    index: &'a LibraryIndex,
    pick: impl Fn(&'a LibraryEntry) -> &'a Fingerprint,
) -> (BTreeMap<&'a str, f64>, f64) {
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &index.entries {
        for g in pick(e).keys() {
            *df.entry(g.as_str()).or_default() += 1;
        }
    }
    let n = index.entries.len() as f64;
    let unseen = ((1.0 + n) / 1.0).ln() + 1.0;
    (df.into_iter().map(|(g, d)| (g, ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)).collect(), unseen)
}

/// `sum idf * min(p, e) / sum idf * max(p, e)` over the union of grams.
fn weighted_jaccard(probe: &Fingerprint, entry: &Fingerprint, idf: &BTreeMap<&str, f64>, unseen: f64) -> f64 {
    let weight = |g: &str| idf.get(g).copied().unwrap_or(unseen);
    let mut num = 0.0;
    let mut den = 0.0;
    for (g, &p) in probe {
        let e = entry.get(g).copied().unwrap_or(0);
        num += weight(g) * f64::from(p.min(e));
        den += weight(g) * f64::from(p.max(e));
    }
    for (g, &e) in entry {
        if !probe.contains_key(g) {
            den += weight(g) * f64::from(e);
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Ranks entries by the mean of the weighted Jaccard overlaps of the exact
/// and the one-deletion fingerprints. Only entries with a positive score are
/// returned.
pub fn match_implicit(index: &LibraryIndex, probe: &Probe) -> Result<Vec<RetrievalHit>, RetrievalError> {
    match_line(index, &probe.top_line())
}

/// Implicit matching on an already extracted pitch line.
pub fn match_line(index: &LibraryIndex, line: &[i32]) -> Result<Vec<RetrievalHit>, RetrievalError> {
    if line.len() < NGRAM + 1 {
        return Err(RetrievalError::ProbeTooShort { needed: NGRAM + 1, got: line.len() });
    }
    let exact = fingerprint(line);
    let deleted = deletion_fingerprint(line);
    let (idf_exact, unseen_exact) = idf_table(index, |e| &e.fingerprint);
    let (idf_del, unseen_del) = idf_table(index, |e| &e.deletion_fingerprint);
    let hits = index
        .entries
        .iter()
        .filter_map(|e| {
            let a = weighted_jaccard(&exact, &e.fingerprint, &idf_exact, unseen_exact);
            let b = weighted_jaccard(&deleted, &e.deletion_fingerprint, &idf_del, unseen_del);
            let score = 0.5 * (a + b);
            (score > 0.0).then(|| RetrievalHit { entry_id: e.id.clone(), score, match_kind: MatchKind::Implicit })
        })
        .collect();
    Ok(rank(hits))
}
