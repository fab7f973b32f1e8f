use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AudioBuffer, DspError, FeatureMatrix, FrameMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CqtConfig {
    pub sample_rate: u32,
    pub hop: usize,
    pub bins: usize,
    pub bins_per_octave: usize,
    pub f_min: f64,
    /// Magnitude floor applied before taking log10.
    pub floor: f64,
}

impl Default for CqtConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000, hop: 512, bins: 88, bins_per_octave: 12, f_min: 27.5, floor: 1e-5 }
    }
}

impl CqtConfig {
    pub fn frame_period(&self) -> f64 {
        self.hop as f64 / f64::from(self.sample_rate)
    }

    pub fn q(&self) -> f64 {
        1.0 / (2f64.powf(1.0 / self.bins_per_octave as f64) - 1.0)
    }

    pub fn center_frequency(&self, k: usize) -> f64 {
        self.f_min * 2f64.powf(k as f64 / self.bins_per_octave as f64)
    }

    pub fn kernel_length(&self, k: usize) -> usize {
        (self.q() * f64::from(self.sample_rate) / self.center_frequency(k)).ceil() as usize
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        samples / self.hop + 1
    }
}

/// Hann-windowed complex exponential, stored as separate real/imag taps.
struct Kernel {
    re: Vec<f64>,
    im: Vec<f64>,
    norm: f64,
}

fn kernels(config: &CqtConfig) -> Vec<Kernel> {
    let sr = f64::from(config.sample_rate);
    (0..config.bins)
        .map(|k| {
            let n = config.kernel_length(k);
            let f = config.center_frequency(k);
            let centre = (n as f64 - 1.0) / 2.0;
            let mut re = Vec::with_capacity(n);
            let mut im = Vec::with_capacity(n);
            let mut norm = 0.0;
            for i in 0..n {
                let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / (n as f64 - 1.0).max(1.0)).cos();
                let phase = 2.0 * PI * f * (i as f64 - centre) / sr;
                re.push(w * phase.cos());
                im.push(-w * phase.sin());
                norm += w;
            }
            Kernel { re, im, norm }
        })
        .collect()
}

/// Magnitudes before log compression, normalized by each kernel's window sum
/// so that a unit-amplitude sine at a bin centre reads about 0.5.
pub fn cqt_magnitude(audio: &AudioBuffer, config: &CqtConfig) -> Result<FrameMatrix, DspError> {
    if audio.sample_rate != config.sample_rate {
        return Err(DspError::SampleRate { expected: config.sample_rate, got: audio.sample_rate });
    }
    if audio.samples.is_empty() {
        return Err(DspError::EmptyAudio);
    }
    assert!(
        config.center_frequency(config.bins - 1) < f64::from(config.sample_rate) / 2.0,
        "highest bin must lie below Nyquist"
    );
    let kernels = kernels(config);
    let longest = kernels.iter().map(|k| k.re.len()).max().unwrap_or(0);
    if audio.samples.len() < longest {
        log::warn!(
            "audio has {} samples, shorter than the longest kernel ({longest}); zero-padding",
            audio.samples.len()
        );
    }
    let x = &audio.samples;
    let frames = config.frame_count(x.len());
    let rows: Vec<Vec<f64>> = (0..frames)
        .into_par_iter()
        .map(|t| {
            let centre = (t * config.hop) as isize;
            kernels
                .iter()
                .map(|k| {
                    let n = k.re.len() as isize;
                    let start = centre - (n - 1) / 2;
                    let lo = (-start).max(0) as usize;
                    let hi = ((x.len() as isize - start).min(n)).max(0) as usize;
                    let (mut re, mut im) = (0.0, 0.0);
                    for i in lo..hi {
                        let s = x[(start + i as isize) as usize];
                        re += s * k.re[i];
                        im += s * k.im[i];
                    }
                    (re * re + im * im).sqrt() / k.norm
                })
                .collect()
        })
        .collect();
    Ok(FrameMatrix::from_rows(rows, config.bins, config.frame_period()))
}

/// Log-magnitude CQT: `log10(max(|X|, floor))` per bin and frame.
pub fn compute_cqt(audio: &AudioBuffer, config: &CqtConfig) -> Result<FeatureMatrix, DspError> {
    let mut m = cqt_magnitude(audio, config)?;
    for v in &mut m.data {
        *v = v.max(config.floor).log10();
    }
    Ok(m)
}
