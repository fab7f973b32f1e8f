//! Frame-clocked alignment of analysed audio against reference events.
//!
//! Each event owns three bottom-layer states (onset, sustain, trailing
//! silence), preceded by one lead-in silence state:
//! `0` is the lead-in, `1 + 3i` onset, `2 + 3i` sustain, `3 + 3i` silence.
//! All silence states share one emission model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{
    baseline_transcribe, compute_cqt, pca_fit, pca_transform, synthesize, ActivationMatrix, AudioBuffer, CqtConfig,
    FeatureMatrix, FrameMatrix, PcaModel, SynthNote, SynthOptions, Transcription,
};
use crate::formats::{PerformanceNotes, ReferenceEvents};

use super::{
    build_hmm, extract_correspondences, fit_gmm, viterbi_sparse, AlignError, AlignmentResult, EmConfig, GmmParams,
    SparseTransitions, TransitionParams,
};

pub const AUDIO_STATES_PER_EVENT: usize = 3;
const LOWEST_PITCH: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioAlignConfig {
    pub transitions: TransitionParams,
    /// Weight of the pitch-template cosine term.
    pub kappa: f64,
    /// Weight of the onset-activation term.
    pub onset_weight: f64,
    /// Bound on the sounding-vs-silence log-likelihood ratio.
    pub llr_clamp: f64,
    /// Expected length of the lead-in silence, seconds.
    pub lead_dwell: f64,
    /// Shortest expected dwell in a silence state, seconds.
    pub rest_dwell: f64,
    /// Frames on either side of a note onset searched for its event.
    pub match_window: usize,
}

impl Default for AudioAlignConfig {
    fn default() -> Self {
        Self {
            transitions: TransitionParams::default(),
            kappa: 20.0,
            onset_weight: 6.0,
            llr_clamp: 20.0,
            lead_dwell: 1.0,
            rest_dwell: 0.25,
            match_window: 2,
        }
    }
}

/// PCA projection plus one mixture per observation class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmBank {
    pub pca: PcaModel,
    pub sounding: GmmParams,
    pub silence: GmmParams,
}

pub const PCA_DIMS: usize = 30;

impl GmmBank {
    /// Fits the projection and both mixtures from labelled CQT frames
    /// (`true` = sounding).
    pub fn train(examples: &[(FeatureMatrix, Vec<bool>)], em: &EmConfig) -> Result<GmmBank, AlignError> {
        for (m, labels) in examples {
            if m.frames() != labels.len() {
                return Err(AlignError::DimensionMismatch(format!("{} frames, {} labels", m.frames(), labels.len())));
            }
        }
        let mats: Vec<&FrameMatrix> = examples.iter().map(|(m, _)| m).collect();
        let pca = pca_fit(&mats, PCA_DIMS)?;
        let (mut sounding, mut silence) = (Vec::new(), Vec::new());
        for (m, labels) in examples {
            for (row, &label) in m.rows().zip(labels) {
                let x = pca.project(row);
                if label {
                    sounding.push(x);
                } else {
                    silence.push(x);
                }
            }
        }
        let fit = |data: &[Vec<f64>]| {
            let k = em.components.min(data.len());
            fit_gmm(data, &EmConfig { components: k, ..*em }).map(|f| f.params)
        };
        Ok(GmmBank { sounding: fit(&sounding)?, silence: fit(&silence)?, pca })
    }

    /// Trains on seeded random sine renderings with a known timeline.
    pub fn synthetic(seed: u64) -> Result<GmmBank, AlignError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut notes = Vec::new();
        let mut t = 0.3;
        while t < 24.0 {
            let dur = rng.random_range(0.12..0.8);
            let voices = rng.random_range(1..=3);
            for _ in 0..voices {
                notes.push(SynthNote {
                    pitch: rng.random_range(36..=96),
                    onset_sec: t,
                    offset_sec: t + dur,
                    amplitude: rng.random_range(0.1..0.5),
                });
            }
            t += dur;
            if rng.random_bool(0.3) {
                t += rng.random_range(0.1..0.5);
            }
        }
        let mut audio = synthesize(&notes, &SynthOptions::default());
        for s in &mut audio.samples {
            *s += rng.random_range(-1e-4..1e-4);
        }
        let config = CqtConfig::default();
        let cqt = compute_cqt(&audio, &config)?;
        let fp = config.frame_period();
        let labels = (0..cqt.frames())
            .map(|f| {
                let time = f as f64 * fp;
                notes.iter().any(|n| n.onset_sec <= time && time < n.offset_sec)
            })
            .collect();
        GmmBank::train(&[(cqt, labels)], &EmConfig { seed, ..EmConfig::default() })
    }

    /// Clamped log-likelihood ratio of sounding over silence.
    pub fn llr(&self, reduced: &[f64], clamp: f64) -> Result<f64, AlignError> {
        let v = self.sounding.log_density(reduced)? - self.silence.log_density(reduced)?;
        Ok(if v.is_nan() { 0.0 } else { v.clamp(-clamp, clamp) })
    }
}

/// Everything the audio aligner reads from a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioObservation {
    /// PCA-reduced CQT frames.
    pub reduced: FrameMatrix,
    pub frames: ActivationMatrix,
    pub onsets: ActivationMatrix,
    pub notes: PerformanceNotes,
}

impl AudioObservation {
    pub fn from_transcription(tr: &Transcription, pca: &PcaModel) -> Result<Self, AlignError> {
        Ok(Self {
            reduced: pca_transform(pca, &tr.cqt)?,
            frames: tr.frames.clone(),
            onsets: tr.onsets.clone(),
            notes: tr.notes.clone(),
        })
    }

    /// Transcribes and projects a 16 kHz recording.
    pub fn analyze(audio: &AudioBuffer, bank: &GmmBank) -> Result<Self, AlignError> {
        Self::from_transcription(&baseline_transcribe(audio)?, &bank.pca)
    }

    pub fn frame_period(&self) -> f64 {
        self.frames.frame_period
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Kind {
    Onset,
    Sustain,
    Silence,
}

fn decode_state(s: usize) -> Option<(usize, Kind)> {
    if s == 0 {
        return None;
    }
    let kind = match (s - 1) % 3 {
        0 => Kind::Onset,
        1 => Kind::Sustain,
        _ => Kind::Silence,
    };
    Some(((s - 1) / 3, kind))
}

fn onset(i: usize) -> usize {
    1 + 3 * i
}
fn sustain(i: usize) -> usize {
    2 + 3 * i
}
fn silence(i: usize) -> usize {
    3 + 3 * i
}

pub fn align_audio(
    observation: &AudioObservation,
    reference: &ReferenceEvents,
    bank: &GmmBank,
    config: &AudioAlignConfig,
) -> Result<AlignmentResult, AlignError> {
    if reference.is_empty() {
        return Err(AlignError::EmptyInput("reference has no events"));
    }
    let t_max = observation.reduced.frames();
    if t_max == 0 {
        return Err(AlignError::EmptyInput("recording has no frames"));
    }
    if observation.frames.frames() != t_max || observation.onsets.frames() != t_max {
        return Err(AlignError::DimensionMismatch("activation and feature frame counts differ".into()));
    }
    let fp = observation.frame_period();
    let n = reference.len();
    let states = 1 + AUDIO_STATES_PER_EVENT * n;
    let hmm = build_hmm(reference, config.transitions);

    // Nominal sounding time and the silence after it, per event.
    let end_sec = reference.beats_to_sec(*reference.measure_starts_beats.last().unwrap_or(&0.0));
    let timing: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let e = &reference.events[i];
            let next = reference.events.get(i + 1).map_or(end_sec.max(e.onset_sec), |f| f.onset_sec);
            let ioi = (next - e.onset_sec).max(0.0);
            let sound = reference.beats_to_sec(e.duration_beats).min(ioi.max(fp));
            (sound.max(fp), (ioi - sound).max(0.0))
        })
        .collect();

    let mut trans = SparseTransitions::new(states);
    let lead_stay = (-fp / config.lead_dwell).exp();
    trans.add(0, 0, lead_stay);
    for (j, &p) in hmm.entry.iter().enumerate() {
        trans.add(0, onset(j), (1.0 - lead_stay) * p);
    }
    for i in 0..n {
        let (sound, gap) = timing[i];
        let last = i + 1 == n;
        trans.add(onset(i), sustain(i), 1.0);
        let stay = (-fp / sound).exp();
        let rest = if last {
            0.9
        } else if gap > 1e-9 {
            0.5
        } else {
            0.05
        };
        trans.add(sustain(i), sustain(i), stay);
        trans.add(sustain(i), silence(i), (1.0 - stay) * rest);
        let quiet_stay = if last { 1.0 - 1e-4 } else { (-fp / gap.max(config.rest_dwell)).exp() };
        trans.add(silence(i), silence(i), quiet_stay);
        for (j, &p) in hmm.transitions[i].iter().enumerate() {
            trans.add(sustain(i), onset(j), (1.0 - stay) * (1.0 - rest) * p);
            trans.add(silence(i), onset(j), (1.0 - quiet_stay) * p);
        }
    }
    trans.finish();
    let mut init = vec![f64::NEG_INFINITY; states];
    init[0] = 0.5f64.ln();
    for (j, &p) in hmm.entry.iter().enumerate() {
        init[onset(j)] = (0.5 * p).ln();
    }

    let llr: Vec<f64> = observation.reduced.rows().map(|x| bank.llr(x, config.llr_clamp)).collect::<Result<_, _>>()?;
    let norms: Vec<f64> = observation.frames.rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let columns: Vec<Vec<usize>> = reference
        .events
        .iter()
        .map(|e| {
            e.pitches
                .iter()
                .filter_map(|&p| (p as usize).checked_sub(LOWEST_PITCH).filter(|&c| c < observation.frames.cols))
                .collect()
        })
        .collect();
    let emit = |t: usize, s: usize| -> f64 {
        let Some((i, kind)) = decode_state(s) else { return -0.5 * llr[t] };
        if kind == Kind::Silence {
            return -0.5 * llr[t];
        }
        let cols = &columns[i];
        let cos = if norms[t] > 0.0 && !cols.is_empty() {
            cols.iter().map(|&c| observation.frames.get(t, c)).sum::<f64>() / ((cols.len() as f64).sqrt() * norms[t])
        } else {
            0.0
        };
        let strike = cols.iter().map(|&c| observation.onsets.get(t, c)).fold(0.0, f64::max);
        let base = 0.5 * llr[t] + config.kappa * (cos - 1.0);
        match kind {
            Kind::Onset => base + config.onset_weight * (strike - 0.5),
            _ => base - config.onset_weight * (strike - 0.5).max(0.0),
        }
    };
    let decoded = viterbi_sparse(t_max, &init, &trans, emit)?;

    let mut path_onsets: Vec<Option<f64>> = vec![None; n];
    for (t, &s) in decoded.path.iter().enumerate() {
        if let Some((i, Kind::Onset)) = decode_state(s) {
            path_onsets[i].get_or_insert(t as f64 * fp);
        }
    }
    let notes = &observation.notes;
    let assignment: Vec<Option<usize>> = notes
        .notes
        .iter()
        .map(|note| {
            let f = (note.onset_sec / fp).round() as usize;
            let lo = f.saturating_sub(config.match_window);
            let hi = (f + config.match_window).min(t_max - 1);
            (lo..=hi.max(lo))
                .filter_map(|t| decoded.path.get(t).and_then(|&s| decode_state(s)))
                .filter(|&(i, kind)| kind != Kind::Silence && reference.events[i].pitches.contains(&note.pitch))
                .map(|(i, _)| i)
                .min_by(|&a, &b| {
                    let da = path_onsets[a].map_or(f64::INFINITY, |o| (o - note.onset_sec).abs());
                    let db = path_onsets[b].map_or(f64::INFINITY, |o| (o - note.onset_sec).abs());
                    da.total_cmp(&db).then(a.cmp(&b))
                })
        })
        .collect();
    let mut result = extract_correspondences(&assignment, notes, reference);
    result.onsets_sec = path_onsets
        .iter()
        .enumerate()
        .filter(|(i, o)| o.is_some() && result.missing.binary_search(i).is_err())
        .map(|(i, o)| (i, o.expect("filtered")))
        .collect();
    result.path = decoded.path;
    result.log_prob = decoded.log_prob;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{render_score, score_to_reference};
    use crate::score::parse_abc;
    use std::sync::OnceLock;

    fn bank() -> &'static GmmBank {
        static BANK: OnceLock<GmmBank> = OnceLock::new();
        BANK.get_or_init(|| GmmBank::synthetic(1).unwrap())
    }

    fn render(notes: &PerformanceNotes, lead: f64) -> AudioBuffer {
        let mut synth = SynthNote::from_performance(notes, 0.4);
        for n in &mut synth {
            n.onset_sec += lead;
            n.offset_sec += lead;
        }
        synthesize(&synth, &SynthOptions::default())
    }

    const TUNE: &str = "X:1\nM:4/4\nL:1/8\nK:G\nG2AB c2BA|G2B2 d4|e2dc B2AG|A2F2 G4|";

    #[test]
    fn synthesized_reference_aligns() {
        let score = parse_abc(TUNE).unwrap();
        let reference = score_to_reference(&score, 100.0);
        let audio = render(&render_score(&score, 100.0), 0.5);
        let obs = AudioObservation::analyze(&audio, bank()).unwrap();
        let a = align_audio(&obs, &reference, bank(), &AudioAlignConfig::default()).unwrap();
        a.check_partition(obs.notes.len(), reference.len()).unwrap();
        assert!(a.missing.is_empty(), "missing {:?}", a.missing);
        for (i, e) in reference.events.iter().enumerate() {
            let got = a.onsets_sec[&i];
            assert!((got - (e.onset_sec + 0.5)).abs() <= 0.064, "event {i}: {got} vs {}", e.onset_sec + 0.5);
        }
    }

    #[test]
    fn silence_leaves_everything_missing() {
        let score = parse_abc(TUNE).unwrap();
        let reference = score_to_reference(&score, 100.0);
        let audio = AudioBuffer::new(vec![0.0; 48_000], 16_000).unwrap();
        let obs = AudioObservation::analyze(&audio, bank()).unwrap();
        let a = align_audio(&obs, &reference, bank(), &AudioAlignConfig::default()).unwrap();
        assert_eq!(a.missing.len(), reference.len());
        assert!(a.path.iter().all(|&s| s == 0 || decode_state(s).is_some_and(|(_, k)| k == Kind::Silence)));
        assert!(a.log_prob.is_finite());
    }

    #[test]
    fn bank_is_sane() {
        let b = bank();
        b.sounding.validate().unwrap();
        b.silence.validate().unwrap();
        assert_eq!(b.pca.dims(), PCA_DIMS);
    }
}
