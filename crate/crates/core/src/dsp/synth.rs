use std::f64::consts::PI;

use crate::formats::PerformanceNotes;

use super::AudioBuffer;

/// One note to synthesize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthNote {
    pub pitch: u8,
    pub onset_sec: f64,
    pub offset_sec: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub sample_rate: u32,
    /// Linear attack and release ramps, seconds.
    pub attack: f64,
    pub release: f64,
    /// Silence appended after the last offset.
    pub tail: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { sample_rate: 16_000, attack: 0.005, release: 0.02, tail: 0.25 }
    }
}

pub fn midi_frequency(pitch: u8) -> f64 {
    440.0 * 2f64.powf((f64::from(pitch) - 69.0) / 12.0)
}

/// Additive sine rendering; the release ramp ends at each note's offset.
pub fn synthesize(notes: &[SynthNote], options: &SynthOptions) -> AudioBuffer {
    let sr = f64::from(options.sample_rate);
    let end = notes.iter().map(|n| n.offset_sec).fold(0.0, f64::max) + options.tail;
    let len = ((end * sr).ceil() as usize).max(1);
    let mut samples = vec![0.0; len];
    for n in notes {
        let f = midi_frequency(n.pitch);
        let start = (n.onset_sec * sr).round() as usize;
        let stop = ((n.offset_sec * sr).round() as usize).min(len);
        let dur = (stop.saturating_sub(start)) as f64 / sr;
        for (i, s) in samples.iter_mut().enumerate().take(stop).skip(start) {
            let t = (i - start) as f64 / sr;
            let env = (t / options.attack).min(1.0).min((dur - t) / options.release).max(0.0);
            *s += n.amplitude * env * (2.0 * PI * f * t).sin();
        }
    }
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 1.0 {
        samples.iter_mut().for_each(|s| *s /= peak);
    }
    AudioBuffer { samples, sample_rate: options.sample_rate }
}

impl SynthNote {
    pub fn from_performance(notes: &PerformanceNotes, amplitude: f64) -> Vec<SynthNote> {
        notes
            .notes
            .iter()
            .map(|n| SynthNote { pitch: n.pitch, onset_sec: n.onset_sec, offset_sec: n.offset_sec, amplitude })
            .collect()
    }
}
