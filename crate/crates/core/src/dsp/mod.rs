//! Audio front end: WAV ingestion, constant-Q analysis, PCA reduction and a
//! deterministic transcriber that produces onset/frame activations.

mod cqt;
mod pca;
mod synth;
mod transcribe;

use std::io::Cursor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cqt::{compute_cqt, cqt_magnitude, CqtConfig};
pub use pca::{pca_fit, pca_transform, PcaModel};
pub use synth::{synthesize, SynthNote, SynthOptions};
pub use transcribe::{activations_to_notes, baseline_transcribe, TranscriberConfig, Transcription};

/// Sample rate every analysis runs at.
pub const ANALYSIS_RATE: u32 = 16_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("unsupported codec: {0}")]
    UnsupportedCodec(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("matrix shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("PCA needs at least {needed} frames, got {got}")]
    NotEnoughFrames { needed: usize, got: usize },
    #[error("audio must be at {expected} Hz, got {got} Hz")]
    SampleRate { expected: u32, got: u32 },
}

/// Mono audio with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, DspError> {
        if samples.is_empty() {
            return Err(DspError::EmptyAudio);
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Resampled copy at `rate` (identity when already there).
    pub fn resampled(&self, rate: u32) -> AudioBuffer {
        if rate == self.sample_rate {
            return self.clone();
        }
        AudioBuffer { samples: resample(&self.samples, self.sample_rate, rate), sample_rate: rate }
    }

    /// Encodes as 16-bit mono PCM WAV.
    pub fn to_wav_bytes(&self) -> Vec<u8> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut cursor = Cursor::new(Vec::new());
        {
            let mut writer = hound::WavWriter::new(&mut cursor, spec).expect("in-memory writer");
            for &s in &self.samples {
                let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                writer.write_sample(v).expect("in-memory write");
            }
            writer.finalize().expect("in-memory finalize");
        }
        cursor.into_inner()
    }
}

/// Decodes a PCM or float WAV, downmixes to mono and resamples to 16 kHz.
pub fn load_wav(bytes: &[u8]) -> Result<AudioBuffer, DspError> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| DspError::UnsupportedCodec(e.to_string()))?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels.max(1));
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| DspError::UnsupportedCodec(e.to_string()))?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = f64::from(1u32 << (bits - 1));
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| DspError::UnsupportedCodec(e.to_string()))?
        }
        (format, bits) => return Err(DspError::UnsupportedCodec(format!("{format:?} with {bits} bits"))),
    };
    let mono: Vec<f64> =
        interleaved.chunks(channels).map(|frame| frame.iter().sum::<f64>() / channels as f64).collect();
    let audio = AudioBuffer::new(mono, spec.sample_rate)?;
    Ok(audio.resampled(ANALYSIS_RATE))
}

/// Zero crossings of the sinc kernel on each side at full bandwidth.
const SINC_HALF_WIDTH: f64 = 32.0;

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = f64::from(to) / f64::from(from);
    let out_len = (samples.len() as f64 * ratio).round() as usize;
    // Cutoff relative to the input Nyquist frequency.
    let cutoff = ratio.min(1.0);
    let half = SINC_HALF_WIDTH / cutoff;
    let step = 1.0 / ratio;
    (0..out_len)
        .map(|n| {
            let t = n as f64 * step;
            let lo = (t - half).ceil().max(0.0) as usize;
            let hi = ((t + half).floor() as usize).min(samples.len() - 1);
            let mut acc = 0.0;
            for (k, &x) in samples.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                let w = 0.5 + 0.5 * (std::f64::consts::PI * d / half).cos();
                acc += x * cutoff * sinc(cutoff * d) * w;
            }
            acc
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Row-major frames × columns matrix with a fixed frame period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMatrix {
    pub frame_period: f64,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Log-magnitude CQT frames (T × 88).
pub type FeatureMatrix = FrameMatrix;
/// Onset or frame posteriors (T × 88), entries in [0, 1].
pub type ActivationMatrix = FrameMatrix;

impl FrameMatrix {
    pub fn zeros(frames: usize, cols: usize, frame_period: f64) -> Self {
        Self { frame_period, cols, data: vec![0.0; frames * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, cols: usize, frame_period: f64) -> Self {
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self { frame_period, cols, data: rows.concat() }
    }

    pub fn frames(&self) -> usize {
        if self.cols == 0 {
            0
        } else {
            self.data.len() / self.cols
        }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.data[t * self.cols + c]
    }

    pub fn set(&mut self, t: usize, c: usize, v: f64) {
        self.data[t * self.cols + c] = v;
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1))
    }

    pub fn is_probability(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn same_shape(&self, other: &FrameMatrix) -> bool {
        self.cols == other.cols && self.data.len() == other.data.len()
    }

    /// CSV dump with one frame per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}
