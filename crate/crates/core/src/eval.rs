//! Per-measure performance evaluation built from an alignment.

use serde::{Deserialize, Serialize};

use crate::align::AlignmentResult;
use crate::formats::{PerformanceNotes, ReferenceEvents};

/// One measure's scores. Field names and order follow the published record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureEvaluation {
    /// 1-based measure number.
    pub measure_id: usize,
    pub eva_all: f64,
    pub eva_note: f64,
    pub eva_speed: f64,
    pub eva_stability: f64,
    pub eva_tempo_sync: f64,
    pub extra_count: usize,
    pub matched_count: usize,
    pub missing_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub eva_all: f64,
    pub eva_note: f64,
    pub eva_speed: f64,
    pub eva_stability: f64,
    pub eva_tempo_sync: f64,
    pub extra_count: usize,
    pub matched_count: usize,
    pub missing_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub piece: String,
    pub tempo_bpm: f64,
    pub measures: Vec<MeasureEvaluation>,
    pub summary: EvaluationSummary,
}

/// Scoring rules; every method can be replaced independently.
pub trait EvalFormulas {
    fn note(&self, matched: usize, missing: usize, extra: usize) -> f64 {
        let total = matched + missing + extra;
        if total == 0 {
            1.0
        } else {
            matched as f64 / total as f64
        }
    }

    /// `ratio` is performed over nominal duration.
    fn speed(&self, ratio: f64) -> f64 {
        symmetric(ratio)
    }

    /// `ratios` are performed over nominal inter-onset intervals.
    fn stability(&self, ratios: &[f64]) -> f64 {
        if ratios.len() < 2 {
            return 1.0;
        }
        let n = ratios.len() as f64;
        let mean = ratios.iter().sum::<f64>() / n;
        if mean <= 0.0 {
            return 0.0;
        }
        let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        1.0 / (1.0 + var.sqrt() / mean)
    }

    /// `ratio` is the measure tempo over the piece's median tempo.
    fn tempo_sync(&self, ratio: f64) -> f64 {
        symmetric(ratio)
    }

    fn overall(&self, note: f64, speed: f64, stability: f64, sync: f64) -> f64;
}

fn symmetric(r: f64) -> f64 {
    if r.is_finite() && r > 0.0 {
        r.min(1.0 / r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Weights of note, speed, stability and tempo sync in `eva_all`.
    pub weights: [f64; 4],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { weights: [0.4, 0.2, 0.2, 0.2] }
    }
}

impl EvalFormulas for EvalConfig {
    fn overall(&self, note: f64, speed: f64, stability: f64, sync: f64) -> f64 {
        let w = self.weights;
        let total: f64 = w.iter().sum();
        ((w[0] * note + w[1] * speed + w[2] * stability + w[3] * sync) / total).clamp(0.0, 1.0)
    }
}

/// What one measure contributes, gathered from the alignment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasureObservation {
    pub has_events: bool,
    pub matched_count: usize,
    pub missing_count: usize,
    pub extra_count: usize,
    /// `(nominal_sec, performed_sec)` of matched events, in score order.
    pub anchors: Vec<(f64, f64)>,
    /// First matched event of the following measure, closing the span.
    pub boundary: Option<(f64, f64)>,
}

impl MeasureObservation {
    /// Performed over nominal duration, when at least two anchors exist.
    pub fn speed_ratio(&self) -> Option<f64> {
        let first = *self.anchors.first()?;
        let last = self.boundary.or(self.anchors.last().copied())?;
        let nominal = last.0 - first.0;
        (nominal > 1e-9).then(|| (last.1 - first.1).max(0.0) / nominal)
    }

    pub fn ioi_ratios(&self) -> Vec<f64> {
        self.anchors
            .windows(2)
            .filter(|w| w[1].0 - w[0].0 > 1e-9)
            .map(|w| (w[1].1 - w[0].1).max(0.0) / (w[1].0 - w[0].0))
            .collect()
    }
}

/// Scores one measure. `tempo_ratio` is the measure's tempo over the
/// piece's median tempo (`None` when undefined).
pub fn evaluate_measure(
    measure_id: usize,
    obs: &MeasureObservation,
    tempo_ratio: Option<f64>,
    formulas: &dyn EvalFormulas,
) -> MeasureEvaluation {
    if !obs.has_events && obs.extra_count == 0 {
        return MeasureEvaluation {
            measure_id,
            eva_all: 1.0,
            eva_note: 1.0,
            eva_speed: 1.0,
            eva_stability: 1.0,
            eva_tempo_sync: 1.0,
            extra_count: 0,
            matched_count: 0,
            missing_count: 0,
        };
    }
    let note = formulas.note(obs.matched_count, obs.missing_count, obs.extra_count).clamp(0.0, 1.0);
    let speed = obs.speed_ratio().map_or(1.0, |r| formulas.speed(r)).clamp(0.0, 1.0);
    let stability = formulas.stability(&obs.ioi_ratios()).clamp(0.0, 1.0);
    let sync = tempo_ratio.map_or(1.0, |r| formulas.tempo_sync(r)).clamp(0.0, 1.0);
    MeasureEvaluation {
        measure_id,
        eva_all: formulas.overall(note, speed, stability, sync).clamp(0.0, 1.0),
        eva_note: note,
        eva_speed: speed,
        eva_stability: stability,
        eva_tempo_sync: sync,
        extra_count: obs.extra_count,
        matched_count: obs.matched_count,
        missing_count: obs.missing_count,
    }
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 { values[m] } else { 0.5 * (values[m - 1] + values[m]) })
}

/// Splits an alignment into per-measure observations. Extra notes belong to
/// the measure of the latest matched event performed at or before them.
pub fn observe_measures(
    reference: &ReferenceEvents,
    performance: &PerformanceNotes,
    alignment: &AlignmentResult,
) -> Vec<MeasureObservation> {
    let measures =
        reference.measure_count().max(reference.events.iter().map(|e| e.measure_index + 1).max().unwrap_or(0));
    let mut obs = vec![MeasureObservation::default(); measures];
    for e in &reference.events {
        obs[e.measure_index].has_events = true;
    }
    for &(_, s) in &alignment.matched {
        obs[reference.events[s].measure_index].matched_count += 1;
    }
    for &s in &alignment.missing {
        obs[reference.events[s].measure_index].missing_count += 1;
    }
    let mut anchors: Vec<(usize, f64, f64)> = alignment
        .onsets_sec
        .iter()
        .filter(|(s, _)| alignment.missing.binary_search(s).is_err() && **s < reference.len())
        .map(|(&s, &t)| (s, reference.events[s].onset_sec, t))
        .collect();
    anchors.sort_by_key(|a| a.0);
    for &(s, nominal, performed) in &anchors {
        obs[reference.events[s].measure_index].anchors.push((nominal, performed));
    }
    for m in 0..measures {
        obs[m].boundary =
            anchors.iter().find(|&&(s, _, _)| reference.events[s].measure_index > m).map(|&(_, n, p)| (n, p));
    }
    let mut by_time: Vec<(f64, usize)> =
        anchors.iter().map(|&(s, _, p)| (p, reference.events[s].measure_index)).collect();
    by_time.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for &k in &alignment.extra {
        let onset = performance.notes.get(k).map_or(0.0, |n| n.onset_sec);
        let measure = by_time.iter().rev().find(|(t, _)| *t <= onset).or(by_time.first()).map_or(0, |&(_, m)| m);
        if let Some(o) = obs.get_mut(measure) {
            o.extra_count += 1;
        }
    }
    obs
}

pub fn evaluate_performance(
    piece: &str,
    reference: &ReferenceEvents,
    performance: &PerformanceNotes,
    alignment: &AlignmentResult,
    formulas: &dyn EvalFormulas,
) -> EvaluationReport {
    let obs = observe_measures(reference, performance, alignment);
    let tempos: Vec<Option<f64>> =
        obs.iter().map(|o| o.speed_ratio().filter(|r| *r > 0.0).map(|r| reference.tempo_bpm / r)).collect();
    let global = median(&mut tempos.iter().flatten().copied().collect::<Vec<_>>());
    let measures: Vec<MeasureEvaluation> = obs
        .iter()
        .enumerate()
        .map(|(m, o)| {
            let ratio = tempos[m].zip(global).map(|(t, g)| t / g);
            evaluate_measure(m + 1, o, ratio, formulas)
        })
        .collect();
    let n = measures.len().max(1) as f64;
    let mean = |f: fn(&MeasureEvaluation) -> f64| {
        if measures.is_empty() {
            1.0
        } else {
            measures.iter().map(f).sum::<f64>() / n
        }
    };
    let summary = EvaluationSummary {
        eva_all: mean(|m| m.eva_all),
        eva_note: mean(|m| m.eva_note),
        eva_speed: mean(|m| m.eva_speed),
        eva_stability: mean(|m| m.eva_stability),
        eva_tempo_sync: mean(|m| m.eva_tempo_sync),
        extra_count: measures.iter().map(|m| m.extra_count).sum(),
        matched_count: measures.iter().map(|m| m.matched_count).sum(),
        missing_count: measures.iter().map(|m| m.missing_count).sum(),
    };
    EvaluationReport { piece: piece.to_string(), tempo_bpm: reference.tempo_bpm, measures, summary }
}
