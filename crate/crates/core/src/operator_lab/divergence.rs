//! Total-variation and best-of-N KL checks on finite chunk distributions.

use super::tables::{check_distribution, pow};
use crate::error::{Error, Result};

/// `½ Σ |p − q|`
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Law of the first `h` actions of a distribution over `A^H`.
pub fn prefix_marginal(dist: &[f64], num_actions: usize, horizon: usize, h: usize) -> Vec<f64> {
    let block = pow(num_actions, horizon - h);
    dist.chunks(block).map(|c| c.iter().sum()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TvComparison {
    pub full: f64,
    /// `marginals[h - 1]` is the TV between the length-`h` prefix laws.
    pub marginals: Vec<f64>,
}

impl TvComparison {
    /// Largest `TV(μ_h, ν_h) − TV(μ, ν)`; non-positive when no prefix is further apart than the full chunks.
    pub fn worst_excess(&self) -> f64 {
        self.marginals
            .iter()
            .fold(f64::NEG_INFINITY, |m, &t| m.max(t - self.full))
    }
}

pub fn tv_checks(mu: &[f64], nu: &[f64], num_actions: usize, horizon: usize) -> Result<TvComparison> {
    let width = pow(num_actions, horizon);
    if mu.len() != width || nu.len() != width {
        return Err(Error::Lab(format!(
            "distributions over A^H need {width} atoms, got {} and {}",
            mu.len(),
            nu.len()
        )));
    }
    check_distribution(mu, "mu")?;
    check_distribution(nu, "nu")?;
    let marginals = (1..=horizon)
        .map(|h| {
            tv_distance(
                &prefix_marginal(mu, num_actions, horizon, h),
                &prefix_marginal(nu, num_actions, horizon, h),
            )
        })
        .collect();
    Ok(TvComparison {
        full: tv_distance(mu, nu),
        marginals,
    })
}

/// Exact law of the highest-valued of `N` i.i.d. draws from `proposal`.
///
/// Tied values are ordered by atom index, so the later atom ranks higher.
pub fn best_of_n_distribution(proposal: &[f64], values: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(proposal.len(), values.len());
    let mut order: Vec<usize> = (0..proposal.len()).filter(|&i| proposal[i] > 0.0).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let mut out = vec![0.0; proposal.len()];
    let mut cdf = 0.0f64;
    let mut prev = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        cdf += proposal[i];
        let f = if rank + 1 == order.len() { 1.0 } else { cdf.min(1.0) };
        let fn_ = f.powi(n as i32);
        out[i] = fn_ - prev;
        prev = fn_;
    }
    out
}

/// `(KL(best-of-N ‖ proposal), log N − (N−1)/N)`
pub fn kl_best_of_n(proposal: &[f64], values: &[f64], n: usize) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::Lab("N must be at least 1".into()));
    }
    check_distribution(proposal, "proposal")?;
    let selected = best_of_n_distribution(proposal, values, n);
    let kl = selected
        .iter()
        .zip(proposal)
        .filter(|(&s, _)| s > 0.0)
        .map(|(&s, &p)| s * (s / p).ln())
        .sum::<f64>();
    let nf = n as f64;
    Ok((kl, nf.ln() - (nf - 1.0) / nf))
}

/// Variance bound for the average of `H` gradients with per-term variance
/// `σ²` and pairwise correlation at most `ρ`: `σ²[ρ + (1 − ρ)/H]`.
pub fn variance_bound(sigma2: f64, rho: f64, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("σ² must be non-negative, got {sigma2}")));
    }
    let lo = if horizon > 1 {
        -1.0 / (horizon as f64 - 1.0)
    } else {
        f64::NEG_INFINITY
    };
    if !(rho <= 1.0 && rho >= lo) {
        return Err(Error::InvalidArgument(format!(
            "ρ = {rho} outside [{lo}, 1] for H = {horizon}"
        )));
    }
    Ok(sigma2 * (rho + (1.0 - rho) / horizon as f64))
}
