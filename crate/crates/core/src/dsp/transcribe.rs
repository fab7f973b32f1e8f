//! Deterministic transcriber. It stands in for a learned onsets-and-frames
//! model and fills the same activation contract: two T × 88 matrices in
//! [0, 1], turned into notes by thresholding.

use serde::{Deserialize, Serialize};

use crate::formats::{PerfNote, PerformanceNotes, DEFAULT_VELOCITY};

use super::{cqt_magnitude, ActivationMatrix, AudioBuffer, CqtConfig, DspError, FeatureMatrix};

/// MIDI number of the lowest CQT bin (A0).
pub const LOWEST_PITCH: u8 = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriberConfig {
    pub cqt: CqtConfig,
    pub threshold: f64,
    /// Offset added to the local flux mean before a peak is accepted.
    pub delta: f64,
    /// Width of the local-mean window, seconds.
    pub mean_window: f64,
    /// Minimum spacing between onsets on one pitch, seconds.
    pub min_gap: f64,
    /// Levels more than this far below the loudest bin count as silence.
    pub dynamic_range_db: f64,
    /// A spectral peak this far below its frame's maximum reads 0.5.
    pub peak_range_db: f64,
}

impl Default for TranscriberConfig {
    fn default() -> Self {
        Self {
            cqt: CqtConfig::default(),
            threshold: 0.5,
            delta: 0.05,
            mean_window: 0.5,
            min_gap: 0.05,
            dynamic_range_db: 60.0,
            peak_range_db: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcription {
    /// Log-magnitude CQT the activations were derived from.
    pub cqt: FeatureMatrix,
    pub onsets: ActivationMatrix,
    pub frames: ActivationMatrix,
    pub notes: PerformanceNotes,
}

fn is_onset_peak(onsets: &ActivationMatrix, t: usize, k: usize, threshold: f64) -> bool {
    let v = onsets.get(t, k);
    v >= threshold && (t == 0 || v > onsets.get(t - 1, k)) && (t + 1 >= onsets.frames() || v >= onsets.get(t + 1, k))
}

/// Turns activations into notes. A note starts on each local onset maximum
/// at or above `threshold` and lasts while its frame activation stays there,
/// for at least one frame and never past the next onset on the same pitch.
pub fn activations_to_notes(
    onsets: &ActivationMatrix,
    frames: &ActivationMatrix,
    threshold: f64,
    frame_period: f64,
) -> Result<PerformanceNotes, DspError> {
    if !onsets.same_shape(frames) {
        return Err(DspError::ShapeMismatch(format!(
            "onsets {}x{} vs frames {}x{}",
            onsets.frames(),
            onsets.cols,
            frames.frames(),
            frames.cols
        )));
    }
    let t_max = onsets.frames();
    let mut notes = Vec::new();
    for k in 0..onsets.cols {
        let pitch = u8::try_from(usize::from(LOWEST_PITCH) + k)
            .ok()
            .filter(|p| *p <= 127)
            .ok_or_else(|| DspError::ShapeMismatch(format!("{} pitch columns", onsets.cols)))?;
        let peaks: Vec<usize> = (0..t_max).filter(|&t| is_onset_peak(onsets, t, k, threshold)).collect();
        for (i, &start) in peaks.iter().enumerate() {
            let limit = peaks.get(i + 1).copied().unwrap_or(t_max);
            let mut end = start + 1;
            while end < limit && frames.get(end, k) >= threshold {
                end += 1;
            }
            notes.push(PerfNote {
                pitch,
                onset_sec: start as f64 * frame_period,
                offset_sec: end as f64 * frame_period,
                velocity: DEFAULT_VELOCITY,
            });
        }
    }
    Ok(PerformanceNotes::new(notes))
}

pub fn baseline_transcribe(audio: &AudioBuffer) -> Result<Transcription, DspError> {
    baseline_transcribe_with(audio, &TranscriberConfig::default())
}

/// Frame activations come from spectral peaks of the dB CQT, scaled by their
/// distance to the loudest bin overall and within the frame. Onset
/// activations come from per-bin positive flux, normalized to [0, 1] over the
/// recording and peak-picked against a local mean.
pub fn baseline_transcribe_with(audio: &AudioBuffer, config: &TranscriberConfig) -> Result<Transcription, DspError> {
    let magnitude = cqt_magnitude(audio, &config.cqt)?;
    let (t_max, bins, fp) = (magnitude.frames(), magnitude.cols, magnitude.frame_period);
    let floor_db = 20.0 * config.cqt.floor.log10();
    let db: Vec<f64> = magnitude.data.iter().map(|m| 20.0 * m.max(config.cqt.floor).log10()).collect();
    let mut cqt = magnitude;
    for v in &mut cqt.data {
        *v = v.max(config.cqt.floor).log10();
    }

    let mut frames = ActivationMatrix::zeros(t_max, bins, fp);
    let mut onsets = ActivationMatrix::zeros(t_max, bins, fp);
    let loudest = db.iter().copied().fold(floor_db, f64::max);
    if loudest <= floor_db {
        let notes = PerformanceNotes::default();
        return Ok(Transcription { cqt, onsets, frames, notes });
    }
    let bottom = loudest - config.dynamic_range_db;
    let level = |t: usize, k: usize| db[t * bins + k].max(bottom);

    for t in 0..t_max {
        let row = &db[t * bins..(t + 1) * bins];
        let frame_max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for k in 0..bins {
            let l = row[k];
            let global = 1.0 - (loudest - l) / config.dynamic_range_db;
            let local = 1.0 - (frame_max - l) / (2.0 * config.peak_range_db);
            let value = global.min(local).clamp(0.0, 1.0);
            let peak = (k == 0 || l >= row[k - 1]) && (k + 1 == bins || l >= row[k + 1]);
            // Shoulders of a peak stay below any sensible threshold.
            frames.set(t, k, if peak { value } else { value * 0.45 });
        }
    }

    let mut flux = vec![0.0; t_max * bins];
    for t in 0..t_max {
        for k in 0..bins {
            let prev = if t == 0 { bottom } else { level(t - 1, k) };
            flux[t * bins + k] = (level(t, k) - prev).max(0.0);
        }
    }
    let flux_max = flux.iter().copied().fold(0.0, f64::max);
    if flux_max > 0.0 {
        flux.iter_mut().for_each(|f| *f /= flux_max);
    }
    let half_window = ((config.mean_window / 2.0) / fp).round() as usize;
    let min_gap = (config.min_gap / fp).ceil() as usize;
    for k in 0..bins {
        let f = |t: usize| flux[t * bins + k];
        let mut last: Option<usize> = None;
        for t in 0..t_max {
            let v = f(t);
            let lo = t.saturating_sub(half_window);
            let hi = (t + half_window).min(t_max - 1);
            let mean = (lo..=hi).map(f).sum::<f64>() / (hi - lo + 1) as f64;
            let is_peak = (t == 0 || v > f(t - 1)) && (t + 1 == t_max || v >= f(t + 1));
            // The pitch must sound for two consecutive frames starting here
            // or one frame later; attack transients smear single-frame peaks
            // onto neighbouring bins.
            let active = |s: usize| s < t_max && frames.get(s, k) >= config.threshold;
            let sounding = (active(t) && active(t + 1)) || (active(t + 1) && active(t + 2));
            let spaced = last.is_none_or(|l| t - l >= min_gap);
            let accepted = v > 0.0 && is_peak && v >= mean + config.delta && sounding && spaced;
            if accepted {
                last = Some(t);
                onsets.set(t, k, 0.5 + 0.5 * v);
            } else {
                onsets.set(t, k, v.min(0.49));
            }
        }
    }
    debug_assert!(frames.is_probability() && onsets.is_probability());
    let notes = activations_to_notes(&onsets, &frames, config.threshold, fp)?;
    Ok(Transcription { cqt, onsets, frames, notes })
}
