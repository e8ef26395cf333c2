//! Post-hoc analyses of evaluation logs and the critic's gradients.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{td_loss, CriticMode};
use crate::error::{Error, Result};
use crate::ndgrad::Tape;
use crate::train::{EvalReport, RunState};

/// Mean selected `h★` at one decision timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkRow {
    pub timestep: usize,
    pub mean_h: f64,
    pub count: usize,
}

/// Every executed prefix contributes its `h★` at the env step where it was chosen.
pub fn chunk_distribution(report: &EvalReport) -> Vec<ChunkRow> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for d in report.episodes.iter().flat_map(|e| &e.decisions) {
        let slot = acc.entry(d.t).or_default();
        slot.0 += d.h as f64;
        slot.1 += 1;
    }
    acc.into_iter()
        .map(|(timestep, (sum, count))| ChunkRow {
            timestep,
            mean_h: sum / count as f64,
            count,
        })
        .collect()
}

pub fn chunk_csv(rows: &[ChunkRow]) -> String {
    let mut out = String::from("timestep,mean_h,count\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.timestep, r.mean_h, r.count).expect("string write");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub mean_g: f64,
    pub mean_q: f64,
    pub count: usize,
}

/// Equal-frequency bins over the realized return `Ĝ` of every decision, with
/// the per-bin means of `Ĝ` and the predicted `Q̂`. Fewer decisions than bins
/// reduces the bin count.
pub fn calibration(report: &EvalReport, num_bins: usize) -> Result<Vec<CalibrationBin>> {
    if num_bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let mut pairs: Vec<(f64, f64)> = report
        .episodes
        .iter()
        .flat_map(|e| &e.decisions)
        .map(|d| (d.g, d.q))
        .collect();
    let n = pairs.len();
    let bins = if n < num_bins {
        if n > 0 {
            log::warn!("{n} decisions for {num_bins} bins; using {n} bins");
        }
        n
    } else {
        num_bins
    };
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok((0..bins)
        .map(|i| {
            let slice = &pairs[i * n / bins..(i + 1) * n / bins];
            let c = slice.len() as f64;
            CalibrationBin {
                bin_low: slice[0].0,
                bin_high: slice[slice.len() - 1].0,
                mean_g: slice.iter().map(|p| p.0).sum::<f64>() / c,
                mean_q: slice.iter().map(|p| p.1).sum::<f64>() / c,
                count: slice.len(),
            }
        })
        .collect())
}

pub fn calibration_csv(bins: &[CalibrationBin]) -> String {
    let mut out = String::from("bin_low,bin_high,mean_G,mean_Q,count\n");
    for b in bins {
        writeln!(out, "{},{},{},{},{}", b.bin_low, b.bin_high, b.mean_g, b.mean_q, b.count)
            .expect("string write");
    }
    out
}

/// Average ranks (ties share the mean of their positions), starting at 1.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation; `NaN` when either input is constant or shorter than 2.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return f64::NAN;
    }
    pearson(&ranks(x), &ranks(y))
}

/// Per-bin Spearman correlation between mean `Q̂` and mean `Ĝ`.
pub fn calibration_spearman(bins: &[CalibrationBin]) -> f64 {
    let g: Vec<f64> = bins.iter().map(|b| b.mean_g).collect();
    let q: Vec<f64> = bins.iter().map(|b| b.mean_q).collect();
    spearman(&q, &g)
}

/// Turn-region versus straight-region comparison of selected `h★`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionTest {
    pub turn_mean: f64,
    pub straight_mean: f64,
    pub turn_count: usize,
    pub straight_count: usize,
    pub permutations: usize,
    /// Two-sided permutation p-value of the difference in means.
    pub p_value: f64,
}

/// Two-sided permutation test of `mean(a) − mean(b)`, with the `+1` correction
/// so the p-value is never zero.
pub fn permutation_test(a: &[f64], b: &[f64], permutations: usize, seed: u64) -> f64 {
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let observed = (mean(a) - mean(b)).abs();
    let mut pool: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    // Relative slack so permutations equal to the observed split count as extreme.
    let tol = 1e-12 * observed.max(1.0);
    for _ in 0..permutations {
        pool.shuffle(&mut rng);
        let (pa, pb) = pool.split_at(a.len());
        if (mean(pa) - mean(pb)).abs() >= observed - tol {
            extreme += 1;
        }
    }
    (extreme + 1) as f64 / (permutations + 1) as f64
}

pub fn region_test(report: &EvalReport, permutations: usize, seed: u64) -> Result<RegionTest> {
    let (mut turn, mut straight) = (Vec::new(), Vec::new());
    for d in report.episodes.iter().flat_map(|e| &e.decisions) {
        if d.turn_region {
            turn.push(d.h as f64);
        } else {
            straight.push(d.h as f64);
        }
    }
    if turn.is_empty() || straight.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "region test needs decisions in both regions, got {} turn and {} straight",
            turn.len(),
            straight.len()
        )));
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok(RegionTest {
        turn_mean: mean(&turn),
        straight_mean: mean(&straight),
        turn_count: turn.len(),
        straight_count: straight.len(),
        permutations,
        p_value: permutation_test(&turn, &straight, permutations, seed),
    })
}

/// Sample moments of per-horizon gradients across minibatches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub horizon: usize,
    pub num_batches: usize,
    /// Total (trace) variance of each `g_h`.
    pub per_h_variance: Vec<f64>,
    /// Total variance of `ḡ = (1/H) Σ_h g_h`.
    pub mean_gradient_variance: f64,
    /// Mean of `per_h_variance`.
    pub sigma2: f64,
    /// Mean pairwise covariance over `sigma2`; absent for `H = 1`.
    pub rho: Option<f64>,
    /// `σ̂² [ρ̂ + (1 − ρ̂)/H]`
    pub bound: f64,
    /// `Var(ḡ) ≤ max_h Var(g_h)`
    pub holds: bool,
}

/// Moments from `samples[batch][h]`, each a flattened gradient.
pub fn variance_stats(samples: &[Vec<Vec<f64>>]) -> Result<VarianceReport> {
    let nb = samples.len();
    if nb < 2 {
        return Err(Error::InvalidArgument("need at least two gradient samples".into()));
    }
    let hz = samples[0].len();
    let dim = samples[0].first().map_or(0, Vec::len);
    if hz == 0 || samples.iter().any(|s| s.len() != hz || s.iter().any(|g| g.len() != dim)) {
        return Err(Error::shape("variance_stats", "ragged gradient samples"));
    }
    let mean_of = |f: &dyn Fn(&Vec<Vec<f64>>, usize) -> f64, j: usize| {
        samples.iter().map(|s| f(s, j)).sum::<f64>() / nb as f64
    };
    let avg = |s: &Vec<Vec<f64>>, j: usize| s.iter().map(|g| g[j]).sum::<f64>() / hz as f64;
    let mut cov = vec![vec![0.0; hz]; hz];
    let mut var_mean = 0.0;
    for j in 0..dim {
        let mu: Vec<f64> = (0..hz)
            .map(|h| samples.iter().map(|s| s[h][j]).sum::<f64>() / nb as f64)
            .collect();
        for a in 0..hz {
            for b in a..hz {
                let c = samples
                    .iter()
                    .map(|s| (s[a][j] - mu[a]) * (s[b][j] - mu[b]))
                    .sum::<f64>()
                    / (nb - 1) as f64;
                cov[a][b] += c;
                if a != b {
                    cov[b][a] += c;
                }
            }
        }
        let m = mean_of(&avg, j);
        var_mean += samples.iter().map(|s| (avg(s, j) - m).powi(2)).sum::<f64>() / (nb - 1) as f64;
    }
    let per_h: Vec<f64> = (0..hz).map(|h| cov[h][h]).collect();
    let sigma2 = per_h.iter().sum::<f64>() / hz as f64;
    let rho = (hz > 1).then(|| {
        let off: f64 = (0..hz)
            .flat_map(|a| (0..hz).filter(move |&b| b != a).map(move |b| (a, b)))
            .map(|(a, b)| cov[a][b])
            .sum();
        off / ((hz * (hz - 1)) as f64 * sigma2)
    });
    let r = rho.unwrap_or(1.0);
    let bound = sigma2 * (r + (1.0 - r) / hz as f64);
    let max_h = per_h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(VarianceReport {
        horizon: hz,
        num_batches: nb,
        holds: var_mean <= max_h,
        per_h_variance: per_h,
        mean_gradient_variance: var_mean,
        sigma2,
        rho,
        bound,
    })
}

/// Per-horizon critic gradients over `num_batches` minibatches drawn from a
/// fixed seed, each with the current critic's regression targets.
pub fn gradient_variance(run: &RunState, num_batches: usize, seed: u64) -> Result<VarianceReport> {
    if num_batches < 32 {
        return Err(Error::InvalidArgument(format!(
            "gradient variance needs at least 32 batches, got {num_batches}"
        )));
    }
    let hz = run.config.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(num_batches);
    for _ in 0..num_batches {
        let batch = run.sample_critic_batch(&mut rng)?;
        let mut per_h = Vec::with_capacity(hz);
        for h in 1..=hz {
            let bundles: Vec<_> = batch
                .bundles
                .iter()
                .map(|b| {
                    let mut b = b.clone();
                    for (k, w) in b.weights.iter_mut().enumerate() {
                        if k + 1 != h {
                            *w = 0.0;
                        }
                    }
                    b
                })
                .collect();
            let mut tape = Tape::new();
            let p = run.critic.params.bind(&mut tape, true);
            let loss = td_loss(
                &run.critic,
                &mut tape,
                &p,
                &batch.obs,
                &batch.chunks,
                &bundles,
                CriticMode::FixedChunk(h),
            )?;
            let mut g = tape.backward(loss)?;
            let flat: Vec<f64> = run
                .critic
                .params
                .collect_grads(&p, &mut g)
                .iter()
                .flat_map(|t| t.data().iter().map(|&v| f64::from(v)))
                .collect();
            per_h.push(flat);
        }
        samples.push(per_h);
    }
    variance_stats(&samples)
}
