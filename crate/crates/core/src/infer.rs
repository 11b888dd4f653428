//! Ranking inference: greedy decoding, beam search, exhaustive search.
//!
//! All three read the same unrolled score table and accumulate per-step
//! selection log-probabilities in the same order, so beam search at width `T!`
//! reproduces the exhaustive optimum bit for bit.

use std::cmp::Ordering;
use std::sync::Arc;

use crate::embed::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::model::{self, AttRNParams, AttentionState};

pub const DEFAULT_BEAM_WIDTH: usize = 3;
pub const MAX_EXHAUSTIVE_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamPath {
    pub prefix: Vec<usize>,
    pub log_likelihood: f64,
    pub step_log_probs: Vec<f64>,
    /// State after the last chosen step; `None` before the first step.
    pub state: Option<Arc<AttentionState>>,
}

/// Higher log-likelihood first, then lexicographically smaller prefix.
fn beam_order(a: &BeamPath, b: &BeamPath) -> Ordering {
    b.log_likelihood.total_cmp(&a.log_likelihood).then_with(|| a.prefix.cmp(&b.prefix))
}

/// Greedy argmax decoding (ties to the lowest candidate index).
pub fn rank_greedy(p: &AttRNParams, b: &EmbeddingBundle) -> Result<Ranking> {
    let trace = model::forward_episode(p, b, None)?;
    Ok(Ranking {
        log_likelihood: trace.log_likelihood(),
        order: trace.order,
    })
}

/// Final beam of complete paths, best first.
pub fn beam_paths(p: &AttRNParams, b: &EmbeddingBundle, width: usize) -> Result<Vec<BeamPath>> {
    if width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    let un = model::unroll(p, b)?;
    let t_len = un.len();
    let states: Vec<Arc<AttentionState>> = (0..t_len).map(|t| Arc::new(un.state(t).clone())).collect();
    let mut beam = vec![BeamPath {
        prefix: Vec::new(),
        log_likelihood: 0.0,
        step_log_probs: Vec::new(),
        state: None,
    }];
    for (t, row) in un.score_rows().enumerate() {
        let mut expanded = Vec::with_capacity(beam.len() * (t_len - t));
        for path in &beam {
            let remaining: Vec<usize> = (0..t_len).filter(|i| !path.prefix.contains(i)).collect();
            let (_, lps) = model::selection_log_probs(row, &remaining);
            for (&cand, &lp) in remaining.iter().zip(&lps) {
                let mut prefix = path.prefix.clone();
                prefix.push(cand);
                let mut step_log_probs = path.step_log_probs.clone();
                step_log_probs.push(lp);
                expanded.push(BeamPath {
                    prefix,
                    log_likelihood: path.log_likelihood + lp,
                    step_log_probs,
                    state: Some(Arc::clone(&states[t])),
                });
            }
        }
        expanded.sort_by(beam_order);
        expanded.truncate(width);
        beam = expanded;
    }
    Ok(beam)
}

pub fn rank_beam(p: &AttRNParams, b: &EmbeddingBundle, width: usize) -> Result<Ranking> {
    let best = beam_paths(p, b, width)?.swap_remove(0);
    Ok(Ranking {
        order: best.prefix,
        log_likelihood: best.log_likelihood,
    })
}

/// Maximum-likelihood order over all `T!` permutations (`T ≤ 8`).
pub fn rank_exhaustive(p: &AttRNParams, b: &EmbeddingBundle) -> Result<Ranking> {
    if b.len() > MAX_EXHAUSTIVE_LEN {
        return Err(Error::TooLarge(format!(
            "exhaustive search over {} candidates exceeds the limit of {MAX_EXHAUSTIVE_LEN}",
            b.len()
        )));
    }
    let un = model::unroll(p, b)?;
    let rows: Vec<&[f64]> = un.score_rows().collect();
    let mut best = Ranking {
        order: Vec::new(),
        log_likelihood: f64::NEG_INFINITY,
    };
    let mut prefix = Vec::with_capacity(rows.len());
    let mut remaining: Vec<usize> = (0..rows.len()).collect();
    search(&rows, &mut prefix, &mut remaining, 0.0, &mut best);
    Ok(best)
}

// Depth-first in lexicographic order; strict improvement keeps the earliest maximizer.
fn search(rows: &[&[f64]], prefix: &mut Vec<usize>, remaining: &mut Vec<usize>, ll: f64, best: &mut Ranking) {
    if remaining.is_empty() {
        if ll > best.log_likelihood || best.order.is_empty() {
            best.order = prefix.clone();
            best.log_likelihood = ll;
        }
        return;
    }
    let (_, lps) = model::selection_log_probs(rows[prefix.len()], remaining);
    for pos in 0..remaining.len() {
        let cand = remaining.remove(pos);
        prefix.push(cand);
        search(rows, prefix, remaining, ll + lps[pos], best);
        prefix.pop();
        remaining.insert(pos, cand);
    }
}
