use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AlignError;

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub components: usize,
    pub max_iterations: usize,
    /// Stop once the relative log-likelihood change drops below this.
    pub tolerance: f64,
    pub variance_floor: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { components: 8, max_iterations: 100, tolerance: 1e-6, variance_floor: VARIANCE_FLOOR, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub params: GmmParams,
    /// Data log-likelihood before each M-step, then after the last one.
    pub log_likelihood: Vec<f64>,
    pub warnings: Vec<String>,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl GmmParams {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dims(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = self.weights[k].ln();
            for ((xd, m), v) in x.iter().zip(&self.means[k]).zip(&self.variances[k]) {
                acc -= 0.5 * ((2.0 * PI * v).ln() + (xd - m) * (xd - m) / v);
            }
            *o = acc;
        }
    }

    /// `log Σ_k w_k Π_d N(x_d; μ_kd, σ²_kd)`, evaluated with log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> Result<f64, AlignError> {
        if x.len() != self.dims() {
            return Err(AlignError::DimensionMismatch(format!("vector has {} dims, model {}", x.len(), self.dims())));
        }
        let mut parts = vec![0.0; self.components()];
        self.component_log_densities(x, &mut parts);
        Ok(log_sum_exp(&parts))
    }

    pub fn validate(&self) -> Result<(), String> {
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.weights.iter().any(|&w| w < 0.0) {
            return Err(format!("weights sum to {total}"));
        }
        if self.variances.iter().flatten().any(|&v| v < VARIANCE_FLOOR) {
            return Err("variance below floor".into());
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centres = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            d2.iter()
                .position(|&d| {
                    target -= d;
                    target < 0.0
                })
                .unwrap_or(data.len() - 1)
        } else {
            rng.random_range(0..data.len())
        };
        centres.push(data[pick].clone());
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(sq_dist(x, centres.last().expect("just pushed")));
        }
    }
    centres
}

fn moments(data: &[Vec<f64>], floor: f64) -> (Vec<f64>, Vec<f64>) {
    let n = data.len() as f64;
    let dims = data[0].len();
    let mut mean = vec![0.0; dims];
    for x in data {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dims];
    for x in data {
        for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    var.iter_mut().for_each(|v| *v = v.max(floor));
    (mean, var)
}

/// Expectation-maximization from a seeded k-means++ start.
pub fn fit_gmm(data: &[Vec<f64>], config: &EmConfig) -> Result<GmmFit, AlignError> {
    let k = config.components;
    if k == 0 || data.len() < k {
        return Err(AlignError::TooFewFrames { needed: k.max(1), got: data.len() });
    }
    let dims = data[0].len();
    if let Some(x) = data.iter().find(|x| x.len() != dims) {
        return Err(AlignError::DimensionMismatch(format!("row of {} dims among rows of {dims}", x.len())));
    }
    let (mean, var) = moments(data, config.variance_floor);
    if data.iter().all(|x| x == &data[0]) {
        let msg = "all frames identical; using a single component".to_string();
        log::warn!("{msg}");
        let params = GmmParams { weights: vec![1.0], means: vec![mean], variances: vec![var] };
        let ll = data.iter().map(|x| params.log_density(x).expect("dims checked")).sum();
        return Ok(GmmFit { params, log_likelihood: vec![ll], warnings: vec![msg] });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params =
        GmmParams { weights: vec![1.0 / k as f64; k], means: kmeans_pp(data, k, &mut rng), variances: vec![var; k] };
    let n = data.len();
    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let mut parts = vec![0.0; k];
    for iteration in 0..=config.max_iterations {
        // E-step.
        let mut ll = 0.0;
        for (i, x) in data.iter().enumerate() {
            params.component_log_densities(x, &mut parts);
            let total = log_sum_exp(&parts);
            ll += total;
            for (r, p) in resp[i * k..(i + 1) * k].iter_mut().zip(&parts) {
                *r = (p - total).exp();
            }
        }
        let converged = trace
            .last()
            .is_some_and(|&prev: &f64| ((ll - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < config.tolerance);
        trace.push(ll);
        if converged || iteration == config.max_iterations {
            break;
        }
        // M-step.
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk <= f64::MIN_POSITIVE {
                params.weights[c] = 0.0;
                continue;
            }
            params.weights[c] = nk / n as f64;
            let mut mu = vec![0.0; dims];
            for (i, x) in data.iter().enumerate() {
                let r = resp[i * k + c];
                for (m, v) in mu.iter_mut().zip(x) {
                    *m += r * v;
                }
            }
            mu.iter_mut().for_each(|m| *m /= nk);
            let mut var = vec![0.0; dims];
            for (i, x) in data.iter().enumerate() {
                let r = resp[i * k + c];
                for ((s, v), m) in var.iter_mut().zip(x).zip(&mu) {
                    *s += r * (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|v| *v = (*v / nk).max(config.variance_floor));
            params.means[c] = mu;
            params.variances[c] = var;
        }
        let total: f64 = params.weights.iter().sum();
        params.weights.iter_mut().for_each(|w| *w /= total);
    }
    Ok(GmmFit { params, log_likelihood: trace, warnings: Vec::new() })
}
