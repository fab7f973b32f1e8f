use super::AlignError;

/// Transition log-probabilities stored by target state: for each `j`, the
/// predecessors `(i, log a_ij)` in ascending `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTransitions {
    pub preds: Vec<Vec<(usize, f64)>>,
}

impl SparseTransitions {
    pub fn new(states: usize) -> Self {
        Self { preds: vec![Vec::new(); states] }
    }

    pub fn states(&self) -> usize {
        self.preds.len()
    }

    /// Adds `from -> to` with probability `p`; zero-probability edges are dropped.
    pub fn add(&mut self, from: usize, to: usize, p: f64) {
        if p > 0.0 {
            self.preds[to].push((from, p.ln()));
        }
    }

    /// Sorts predecessor lists and merges duplicate edges.
    pub fn finish(&mut self) {
        for list in &mut self.preds {
            list.sort_by_key(|&(i, _)| i);
            list.dedup_by(|b, a| {
                if a.0 == b.0 {
                    a.1 = log_add(a.1, b.1);
                    true
                } else {
                    false
                }
            });
        }
    }

    pub fn from_dense(log_trans: &[Vec<f64>]) -> Self {
        let s = log_trans.len();
        let mut preds = vec![Vec::new(); s];
        for (i, row) in log_trans.iter().enumerate() {
            for (j, &lp) in row.iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    preds[j].push((i, lp));
                }
            }
        }
        Self { preds }
    }
}

pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub path: Vec<usize>,
    pub log_prob: f64,
}

/// Most probable state sequence for a dense model. Among equally good
/// predecessors or final states the smallest index wins.
pub fn viterbi(log_obs: &[Vec<f64>], log_init: &[f64], log_trans: &[Vec<f64>]) -> Result<Decoded, AlignError> {
    let s = log_init.len();
    if log_trans.len() != s || log_trans.iter().any(|r| r.len() != s) {
        return Err(AlignError::DimensionMismatch(format!("transition table is not {s}x{s}")));
    }
    if let Some(row) = log_obs.iter().find(|r| r.len() != s) {
        return Err(AlignError::DimensionMismatch(format!("observation row has {} states, expected {s}", row.len())));
    }
    let trans = SparseTransitions::from_dense(log_trans);
    viterbi_sparse(log_obs.len(), log_init, &trans, |t, j| log_obs[t][j])
}

/// Viterbi over a sparse transition structure with emissions supplied by
/// `emit(t, state)`.
pub fn viterbi_sparse<F>(
    frames: usize,
    log_init: &[f64],
    trans: &SparseTransitions,
    emit: F,
) -> Result<Decoded, AlignError>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    viterbi_switched(frames, log_init, std::slice::from_ref(trans), |_| 0, emit)
}

/// Viterbi where the step into observation `t` uses `tables[select(t)]`.
pub fn viterbi_switched<F, G>(
    frames: usize,
    log_init: &[f64],
    tables: &[SparseTransitions],
    select: G,
    emit: F,
) -> Result<Decoded, AlignError>
where
    F: Fn(usize, usize) -> f64 + Sync,
    G: Fn(usize) -> usize,
{
    let s = log_init.len();
    if let Some(bad) = tables.iter().find(|t| t.states() != s) {
        return Err(AlignError::DimensionMismatch(format!("{} transition states vs {s} initial", bad.states())));
    }
    if frames == 0 || s == 0 {
        return Err(AlignError::NoFeasiblePath);
    }
    let mut delta: Vec<f64> = (0..s).map(|j| log_init[j] + emit(0, j)).collect();
    let mut next = vec![f64::NEG_INFINITY; s];
    let mut back: Vec<u32> = vec![0; frames.saturating_sub(1) * s];
    for t in 1..frames {
        let trans = tables
            .get(select(t))
            .ok_or_else(|| AlignError::DimensionMismatch(format!("no transition table for step {t}")))?;
        let row = &mut back[(t - 1) * s..t * s];
        for j in 0..s {
            let mut best = f64::NEG_INFINITY;
            let mut arg = u32::MAX;
            for &(i, lp) in &trans.preds[j] {
                let v = delta[i] + lp;
                if v > best {
                    best = v;
                    arg = i as u32;
                }
            }
            row[j] = arg;
            next[j] = if arg == u32::MAX { f64::NEG_INFINITY } else { best + emit(t, j) };
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let (mut state, log_prob) =
        delta
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    if log_prob == f64::NEG_INFINITY || log_prob.is_nan() {
        return Err(AlignError::NoFeasiblePath);
    }
    let mut path = vec![0; frames];
    path[frames - 1] = state;
    for t in (1..frames).rev() {
        state = back[(t - 1) * s + state] as usize;
        path[t - 1] = state;
    }
    Ok(Decoded { path, log_prob })
}

/// Log-probability of one explicit path.
pub fn path_log_prob(path: &[usize], log_obs: &[Vec<f64>], log_init: &[f64], log_trans: &[Vec<f64>]) -> f64 {
    let mut total = log_init[path[0]] + log_obs[0][path[0]];
    for t in 1..path.len() {
        total += log_trans[path[t - 1]][path[t]] + log_obs[t][path[t]];
    }
    total
}
