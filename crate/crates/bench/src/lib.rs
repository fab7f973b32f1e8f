//! Deterministic inputs shared by the benchmarks.

use cadenza_core::align::SparseTransitions;
use cadenza_core::dsp::{synthesize, AudioBuffer, SynthNote, SynthOptions};
use cadenza_core::formats::PerformanceNotes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEPS: [&str; 7] = ["C", "D", "E", "F", "G", "A", "B"];

/// A 4/4 tune of `measures` bars of quarter notes and occasional triads.
pub fn melody_abc(measures: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut body = String::new();
    for m in 0..measures {
        for _ in 0..4 {
            let step = STEPS[rng.random_range(0..7)];
            let note = if rng.random_bool(0.5) { step.to_string() } else { step.to_lowercase() };
            if rng.random_bool(0.15) {
                body.push_str(&format!(
                    "[{note}{}{}] ",
                    STEPS[(rng.random_range(0..7) + 2) % 7],
                    STEPS[rng.random_range(0..7)].to_lowercase()
                ));
            } else {
                body.push_str(&note);
                body.push(' ');
            }
        }
        body.push('|');
        if m % 4 == 3 {
            body.push('\n');
        }
    }
    format!("X:1\nT:Bench\nM:4/4\nL:1/4\nK:C\n{body}\n")
}

/// Dense log-domain HMM: (observations, initial, transitions).
pub fn dense_hmm(states: usize, frames: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = |n: usize| (0..n).map(|_| rng.random_range(-8.0..0.0)).collect::<Vec<f64>>();
    let init = row(states);
    let trans = (0..states).map(|_| row(states)).collect();
    let obs = (0..frames).map(|_| row(states)).collect();
    (obs, init, trans)
}

/// Left-to-right chain where each state may stay, advance or skip one.
pub fn banded(states: usize) -> SparseTransitions {
    let mut t = SparseTransitions::new(states);
    for i in 0..states {
        t.add(i, i, 0.6);
        if i + 1 < states {
            t.add(i, i + 1, 0.3);
        }
        if i + 2 < states {
            t.add(i, i + 2, 0.1);
        }
    }
    t.finish();
    t
}

/// Sine rendering of performed notes at the analysis rate.
pub fn render(notes: &PerformanceNotes) -> AudioBuffer {
    synthesize(&SynthNote::from_performance(notes, 0.4), &SynthOptions::default())
}

/// Two pseudo-random strings over a small alphabet.
pub fn text_pair(len: usize, seed: u64) -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut word = || (0..len).map(|_| (b'a' + rng.random_range(0..6)) as char).collect::<String>();
    (word(), word())
}
