//! Adaptive prefix extraction: draw `N` flow chunks, score all `N × H`
//! prefixes with the ensemble-minimum critic and execute the best one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::PrefixCritic;
use crate::error::{Error, Result};
use crate::flow::FlowPolicy;
use crate::ndgrad::Real;

/// How the executed prefix is chosen from the score matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    /// Joint argmax over candidate and prefix length.
    Joint,
    /// Argmax over candidates at one fixed prefix length.
    FixedLength(usize),
}

/// Candidates and scores at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet<T> {
    pub num_candidates: usize,
    pub horizon: usize,
    pub action_dim: usize,
    /// `N × H × d`
    pub chunks: Vec<T>,
    /// `scores[n * H + (h - 1)]`: ensemble-minimum value of candidate `n`'s length-`h` prefix.
    pub scores: Vec<f64>,
    /// Zero-based index of the selected candidate.
    pub n_star: usize,
    /// Length of the selected prefix, in `1..=H`.
    pub h_star: usize,
}

impl<T: Real> ProposalSet<T> {
    pub fn value(&self) -> f64 {
        self.score(self.n_star, self.h_star)
    }

    pub fn score(&self, n: usize, h: usize) -> f64 {
        self.scores[n * self.horizon + h - 1]
    }

    pub fn candidate(&self, n: usize) -> &[T] {
        let w = self.horizon * self.action_dim;
        &self.chunks[n * w..(n + 1) * w]
    }

    /// The `h★ × d` actions to execute.
    pub fn prefix(&self) -> &[T] {
        &self.candidate(self.n_star)[..self.h_star * self.action_dim]
    }
}

/// `(n★, h★)` maximizing an `N × H` score matrix; ties go to the smallest `n`,
/// then the smallest `h`. `n★` is zero-based, `h★` is a length.
pub fn joint_argmax(scores: &[f64], num_candidates: usize, horizon: usize) -> (usize, usize) {
    assert_eq!(scores.len(), num_candidates * horizon);
    let mut best = (0, 1);
    let mut best_v = f64::NEG_INFINITY;
    for n in 0..num_candidates {
        for h in 1..=horizon {
            let v = scores[n * horizon + h - 1];
            if v > best_v {
                best_v = v;
                best = (n, h);
            }
        }
    }
    best
}

/// Best candidate at prefix length `h`, ties to the smallest index.
pub fn column_argmax(scores: &[f64], num_candidates: usize, horizon: usize, h: usize) -> Result<usize> {
    if h == 0 || h > horizon {
        return Err(Error::InvalidArgument(format!(
            "prefix length {h} outside 1..={horizon}"
        )));
    }
    assert_eq!(scores.len(), num_candidates * horizon);
    let mut best = 0;
    for n in 1..num_candidates {
        if scores[n * horizon + h - 1] > scores[best * horizon + h - 1] {
            best = n;
        }
    }
    Ok(best)
}

fn check_pair<T: Real>(critic: &PrefixCritic<T>, flow: &FlowPolicy<T>) -> Result<()> {
    let (c, f) = (&critic.config, &flow.config);
    if c.horizon != f.horizon || c.action_dim != f.action_dim || c.obs_dim != f.obs_dim {
        return Err(Error::Config(format!(
            "critic (H={}, d={}) and flow (H={}, d={}) disagree",
            c.horizon, c.action_dim, f.horizon, f.action_dim
        )));
    }
    Ok(())
}

/// Extraction at every row of `obs` with one batched flow pass and one batched
/// critic pass (every candidate is scored once for all `H` lengths).
pub fn extract_batch<T: Real>(
    critic: &PrefixCritic<T>,
    flow: &FlowPolicy<T>,
    obs: &[T],
    num_candidates: usize,
    selection: Selection,
    rng: &mut impl Rng,
) -> Result<Vec<ProposalSet<T>>> {
    check_pair(critic, flow)?;
    if num_candidates == 0 {
        return Err(Error::InvalidArgument("need at least one candidate".into()));
    }
    let (od, hz, ad) = (critic.config.obs_dim, critic.config.horizon, critic.config.action_dim);
    if let Selection::FixedLength(h) = selection {
        if h == 0 || h > hz {
            return Err(Error::InvalidArgument(format!("prefix length {h} outside 1..={hz}")));
        }
    }
    let rows = obs.len() / od;
    let chunks = flow.sample_many(obs, num_candidates, rng)?;
    let mut rep = Vec::with_capacity(rows * num_candidates * od);
    for r in 0..rows {
        for _ in 0..num_candidates {
            rep.extend_from_slice(&obs[r * od..(r + 1) * od]);
        }
    }
    let q = critic.min_q(&rep, &chunks)?;
    let block = num_candidates * hz;
    let width = num_candidates * hz * ad;
    (0..rows)
        .map(|r| {
            let scores: Vec<f64> = q[r * block..(r + 1) * block].iter().map(|v| v.as_f64()).collect();
            if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "critic score for candidate {} at length {}",
                    i / hz,
                    i % hz + 1
                )));
            }
            let (n_star, h_star) = match selection {
                Selection::Joint => joint_argmax(&scores, num_candidates, hz),
                Selection::FixedLength(h) => (column_argmax(&scores, num_candidates, hz, h)?, h),
            };
            Ok(ProposalSet {
                num_candidates,
                horizon: hz,
                action_dim: ad,
                chunks: chunks[r * width..(r + 1) * width].to_vec(),
                scores,
                n_star,
                h_star,
            })
        })
        .collect()
}

pub fn extract<T: Real>(
    critic: &PrefixCritic<T>,
    flow: &FlowPolicy<T>,
    obs: &[T],
    num_candidates: usize,
    rng: &mut impl Rng,
) -> Result<ProposalSet<T>> {
    let mut v = extract_batch(critic, flow, obs, num_candidates, Selection::Joint, rng)?;
    single(&mut v)
}

pub fn extract_fixed_h<T: Real>(
    critic: &PrefixCritic<T>,
    flow: &FlowPolicy<T>,
    obs: &[T],
    num_candidates: usize,
    h: usize,
    rng: &mut impl Rng,
) -> Result<ProposalSet<T>> {
    let mut v = extract_batch(critic, flow, obs, num_candidates, Selection::FixedLength(h), rng)?;
    single(&mut v)
}

fn single<T>(v: &mut Vec<ProposalSet<T>>) -> Result<ProposalSet<T>> {
    if v.len() != 1 {
        return Err(Error::shape("extract", format!("expected one state, got {}", v.len())));
    }
    Ok(v.pop().expect("length checked"))
}
