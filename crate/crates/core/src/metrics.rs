//! Edit distance and text-overlap metrics.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("the fitting corpus has no tokens")]
    EmptyVocabulary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizeConfig {
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for TokenizeConfig {
    fn default() -> Self {
        Self { lowercase: true, strip_punctuation: true }
    }
}

/// Whitespace tokenization with optional case folding and punctuation removal.
pub fn tokenize(text: &str, config: &TokenizeConfig) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            let w: String = if config.strip_punctuation {
                w.chars().filter(|c| !c.is_ascii_punctuation()).collect()
            } else {
                w.to_string()
            };
            if config.lowercase {
                w.to_lowercase()
            } else {
                w
            }
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Edit distance between two sequences with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character-level Levenshtein distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    edit_distance(&a, &b)
}

/// `1 - distance / max(len)`, or 1 for two empty strings.
pub fn similarity_ratio(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        1.0
    } else {
        1.0 - levenshtein(a, b) as f64 / longest as f64
    }
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, hyp: usize, reference: usize) -> Prf {
        let precision = if hyp == 0 { 0.0 } else { overlap as f64 / hyp as f64 };
        let recall = if reference == 0 { 0.0 } else { overlap as f64 / reference as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Prf { precision, recall, f1 }
    }
}

/// Clipped unigram overlap.
pub fn rouge1<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Prf {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    let mut overlap = 0;
    for t in hypothesis {
        if let Some(c) = counts.get_mut(t.as_ref()).filter(|c| **c > 0) {
            *c -= 1;
            overlap += 1;
        }
    }
    Prf::from_counts(overlap, hypothesis.len(), reference.len())
}

/// Longest-common-subsequence overlap.
pub fn rouge_l<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Prf {
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    Prf::from_counts(lcs_len(&r, &h), h.len(), r.len())
}

/// Extra matching stage for METEOR beyond exact matches.
pub trait SynonymTable {
    fn are_synonyms(&self, a: &str, b: &str) -> bool;
}

/// Word-to-synonym-set table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynonymMap(pub BTreeMap<String, Vec<String>>);

impl SynonymTable for SynonymMap {
    fn are_synonyms(&self, a: &str, b: &str) -> bool {
        let has = |x: &str, y: &str| self.0.get(x).is_some_and(|s| s.iter().any(|w| w == y));
        has(a, b) || has(b, a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeteorScore {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_mean: f64,
    pub penalty: f64,
    pub matches: usize,
    pub chunks: usize,
}

pub fn meteor_lite<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> MeteorScore {
    meteor_lite_with(reference, hypothesis, None)
}

/// Greedy leftmost alignment (exact matches, then synonyms if given),
/// `F = 10PR / (P + 9R)`, fragmentation penalty `0.5 (chunks / matches)^3`.
pub fn meteor_lite_with<S: AsRef<str>>(
    reference: &[S],
    hypothesis: &[S],
    synonyms: Option<&dyn SynonymTable>,
) -> MeteorScore {
    let mut ref_used = vec![false; reference.len()];
    let mut pairs: Vec<Option<usize>> = vec![None; hypothesis.len()];
    let mut stage = |eq: &dyn Fn(&str, &str) -> bool| {
        for (h, slot) in pairs.iter_mut().enumerate() {
            if slot.is_some() {
                continue;
            }
            if let Some(r) =
                (0..reference.len()).find(|&r| !ref_used[r] && eq(reference[r].as_ref(), hypothesis[h].as_ref()))
            {
                ref_used[r] = true;
                *slot = Some(r);
            }
        }
    };
    stage(&|a, b| a == b);
    if let Some(table) = synonyms {
        stage(&|a, b| table.are_synonyms(a, b));
    }
    let aligned: Vec<(usize, usize)> = pairs.iter().enumerate().filter_map(|(h, r)| r.map(|r| (h, r))).collect();
    let matches = aligned.len();
    if matches == 0 {
        return MeteorScore {
            score: 0.0,
            precision: 0.0,
            recall: 0.0,
            f_mean: 0.0,
            penalty: 0.0,
            matches: 0,
            chunks: 0,
        };
    }
    let chunks = 1 + aligned.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let precision = matches as f64 / hypothesis.len() as f64;
    let recall = matches as f64 / reference.len() as f64;
    let f_mean = 10.0 * precision * recall / (precision + 9.0 * recall);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    MeteorScore { score: f_mean * (1.0 - penalty), precision, recall, f_mean, penalty, matches, chunks }
}

/// TF-IDF vectorizer with an optional truncated-SVD projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsaModel {
    pub tokenize: TokenizeConfig,
    pub vocabulary: BTreeMap<String, usize>,
    pub idf: Vec<f64>,
    /// Rows are the leading left singular vectors of the term-document matrix.
    pub projection: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsaConfig {
    pub tokenize: TokenizeConfig,
    /// Number of latent dimensions; `None` keeps raw TF-IDF space.
    pub dims: Option<usize>,
}

impl Default for LsaConfig {
    fn default() -> Self {
        Self { tokenize: TokenizeConfig::default(), dims: Some(100) }
    }
}

impl LsaModel {
    pub fn fit<S: AsRef<str>>(corpus: &[S], config: &LsaConfig) -> Result<LsaModel, MetricsError> {
        let docs: Vec<Vec<String>> = corpus.iter().map(|d| tokenize(d.as_ref(), &config.tokenize)).collect();
        let mut vocabulary = BTreeMap::new();
        for t in docs.iter().flatten() {
            let next = vocabulary.len();
            vocabulary.entry(t.clone()).or_insert(next);
        }
        if vocabulary.is_empty() {
            return Err(MetricsError::EmptyVocabulary);
        }
        // Re-number in sorted order so the model does not depend on corpus order.
        for (i, v) in vocabulary.values_mut().enumerate() {
            *v = i;
        }
        let mut df = vec![0usize; vocabulary.len()];
        for doc in &docs {
            let mut seen: Vec<usize> = doc.iter().map(|t| vocabulary[t]).collect();
            seen.sort_unstable();
            seen.dedup();
            seen.iter().for_each(|&i| df[i] += 1);
        }
        let n = docs.len() as f64;
        let idf = df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
        let mut model = LsaModel { tokenize: config.tokenize, vocabulary, idf, projection: None };
        if let Some(k) = config.dims {
            let v = model.vocabulary.len();
            let mut x = DMatrix::<f64>::zeros(v, docs.len());
            for (j, doc) in docs.iter().enumerate() {
                for (i, w) in model.tfidf_tokens(doc).into_iter().enumerate() {
                    x[(i, j)] = w;
                }
            }
            let svd = x.svd(true, false);
            let u = svd.u.expect("requested U");
            let top = svd.singular_values.iter().copied().fold(0.0, f64::max);
            let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
            order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
            let rows = order
                .into_iter()
                .filter(|&c| svd.singular_values[c] > 1e-10 * top)
                .take(k)
                .map(|c| u.column(c).iter().copied().collect())
                .collect();
            model.projection = Some(rows);
        }
        Ok(model)
    }

    fn tfidf_tokens(&self, tokens: &[String]) -> Vec<f64> {
        let mut v = vec![0.0; self.vocabulary.len()];
        for t in tokens {
            if let Some(&i) = self.vocabulary.get(t) {
                v[i] += self.idf[i];
            }
        }
        v
    }

    /// Vector for a text in the model's space.
    pub fn vectorize(&self, text: &str) -> Vec<f64> {
        let v = self.tfidf_tokens(&tokenize(text, &self.tokenize));
        match &self.projection {
            Some(rows) => rows.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect(),
            None => v,
        }
    }

    pub fn cosine(&self, a: &str, b: &str) -> f64 {
        cosine(&self.vectorize(a), &self.vectorize(b))
    }
}

/// `<u, v> / (|u| |v|)`, or 0 when either vector is zero.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        (dot / (nu * nv)).clamp(-1.0, 1.0)
    }
}
