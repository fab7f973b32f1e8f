use serde::{Deserialize, Serialize};

use crate::formats::ReferenceEvents;

/// Top-layer transition mass between score positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransitionParams {
    pub forward: f64,
    pub self_loop: f64,
    /// Total mass of jumps to `i + d`, `d >= 2`.
    pub skip: f64,
    /// Ratio between successive skip distances.
    pub skip_ratio: f64,
    /// Total mass of jumps to `i - d`, `d >= 1`.
    pub back: f64,
    pub back_ratio: f64,
}

impl Default for TransitionParams {
    fn default() -> Self {
        Self { forward: 0.85, self_loop: 0.05, skip: 0.07, skip_ratio: 0.5, back: 0.03, back_ratio: 0.5 }
    }
}

impl TransitionParams {
    /// Only self-loops and single steps forward.
    pub fn forward_only() -> Self {
        Self { skip: 0.0, back: 0.0, ..Self::default() }
    }

    /// Unnormalized weight of moving from position `from` to `to`. A `from`
    /// of `None` is the virtual position before the first event.
    fn weight(&self, from: Option<usize>, to: usize) -> f64 {
        let from = match from {
            Some(i) => i as i64,
            None => -1,
        };
        let d = to as i64 - from;
        match d {
            0 => self.self_loop,
            1 => self.forward,
            d if d >= 2 => self.skip * (1.0 - self.skip_ratio) * self.skip_ratio.powi((d - 2) as i32),
            d => self.back * (1.0 - self.back_ratio) * self.back_ratio.powi((-d - 1) as i32),
        }
    }

    /// Normalized row of probabilities over `n` positions.
    pub fn row(&self, from: Option<usize>, n: usize) -> Vec<f64> {
        let mut row: Vec<f64> = (0..n).map(|j| self.weight(from, j)).collect();
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|p| *p /= total);
        } else if let Some(i) = from {
            // Nothing reachable: stay put.
            row[i] = 1.0;
        }
        row
    }
}

/// Top layer of the alignment model: a dense transition table over the
/// reference's events plus the entry distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    pub params: TransitionParams,
    pub reference: ReferenceEvents,
    pub entry: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
}

impl HmmModel {
    pub fn positions(&self) -> usize {
        self.transitions.len()
    }

    pub fn log_transitions(&self) -> Vec<Vec<f64>> {
        self.transitions.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect()
    }
}

pub fn build_hmm(reference: &ReferenceEvents, params: TransitionParams) -> HmmModel {
    let n = reference.len();
    HmmModel {
        params,
        reference: reference.clone(),
        entry: params.row(None, n),
        transitions: (0..n).map(|i| params.row(Some(i), n)).collect(),
    }
}
