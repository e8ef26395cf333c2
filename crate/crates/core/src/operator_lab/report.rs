//! The full exact-theory suite, collected into a serializable report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backup::{chunk_return, expected_max, LabInstance};
use super::divergence::{kl_best_of_n, tv_checks, variance_bound};
use super::tables::{pow, random_distribution, ProposalTable};
use crate::envs::TabularMdp;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheck {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    /// The check passes when `measured ≤ bound + tolerance`.
    pub bound: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub checks: Vec<TheoryCheck>,
}

impl TheoryReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&TheoryCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TheoryCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, name: &str, measured: f64, bound: f64, tolerance: f64, detail: String) {
        assert!(self.get(name).is_none(), "duplicate check {name}");
        self.checks.push(TheoryCheck {
            name: name.to_string(),
            passed: measured <= bound + tolerance,
            measured,
            bound,
            tolerance,
            detail,
        });
    }
}

/// Names of every check, in report order.
pub const CHECK_NAMES: [&str; 14] = [
    "chunk_return",
    "expected_max_order_statistic",
    "contraction",
    "fixed_point_contraction_trace",
    "fixed_point_bounded",
    "fixed_point_identity",
    "difference_identity",
    "chain_fixed_point",
    "chain_policy_value",
    "monte_carlo_target",
    "tv_marginal",
    "tv_point_masses",
    "kl_best_of_n",
    "variance_bound",
];

/// Size of the random lab instance.
#[derive(Clone, Copy, Debug)]
pub struct LabShape {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub n: usize,
    pub gamma: f64,
}

impl Default for LabShape {
    fn default() -> Self {
        LabShape {
            num_states: 6,
            num_actions: 2,
            horizon: 3,
            n: 3,
            gamma: 0.9,
        }
    }
}

pub fn random_lab(rng: &mut impl Rng, shape: LabShape) -> Result<LabInstance> {
    let mdp = TabularMdp::random(rng, shape.num_states, shape.num_actions, 1, shape.gamma, 1.0)?;
    let props = ProposalTable::random(rng, shape.num_states, shape.num_actions, shape.horizon, 0.3);
    LabInstance::new(mdp, props, shape.n)
}

const MC_DRAWS: usize = 100_000;

/// Run every check with randomness drawn from `seed`.
pub fn verify_theory(seed: u64) -> Result<TheoryReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TheoryReport {
        seed,
        checks: Vec::new(),
    };
    let shape = LabShape::default();
    let lab = random_lab(&mut rng, shape)?;
    let gamma = lab.mdp.gamma;
    let q_bound = lab.mdp.r_max() / (1.0 - gamma);

    let unit_chain = TabularMdp::chain(5, 2, 0.99)?;
    let (r3, _) = chunk_return(&unit_chain, 0, &[0, 0, 0]);
    report.push(
        "chunk_return",
        (r3 - -2.9701).abs(),
        0.0,
        1e-12,
        format!("three unit costs at γ = 0.99 sum to {r3}"),
    );

    let em = expected_max(&mut [(0.0, 0.5), (1.0, 0.5)], 2)?;
    report.push(
        "expected_max_order_statistic",
        (em - 0.75).abs(),
        0.0,
        1e-15,
        format!("best of two fair draws from {{0, 1}} averages {em}"),
    );

    let mut worst_ratio = 0.0f64;
    for _ in 0..200 {
        let scale = q_bound * rng.random_range(0.01..2.0);
        let q1 = lab.zeros().random_like(&mut rng, scale);
        let q2 = lab.zeros().random_like(&mut rng, scale);
        let before = q1.sup_distance(&q2);
        let after = lab.apply_bnh(&q1)?.sup_distance(&lab.apply_bnh(&q2)?);
        worst_ratio = worst_ratio.max(after / before);
    }
    report.push(
        "contraction",
        worst_ratio,
        gamma,
        1e-9,
        "largest sup-norm ratio over 200 random table pairs".into(),
    );

    let fp = lab.fixed_point(1e-10)?;
    let trace_max = fp
        .contraction_ratios(1e-4)
        .into_iter()
        .fold(0.0f64, f64::max);
    report.push(
        "fixed_point_contraction_trace",
        trace_max,
        gamma,
        1e-9,
        format!("{} iterations from Q = 0 to change below 1e-10", fp.iterations),
    );
    report.push(
        "fixed_point_bounded",
        fp.q.sup_norm(),
        q_bound,
        0.0,
        "largest |Q| at the fixed point against R_max/(1 − γ)".into(),
    );

    let pv = lab.evaluate_extraction(&fp.q)?;
    report.push(
        "fixed_point_identity",
        pv.q.sup_distance(&fp.q),
        0.0,
        1e-8,
        "sup distance between the fixed point and the exact value of its extraction policy".into(),
    );
    report.push(
        "difference_identity",
        lab.difference_identity_error(&pv),
        0.0,
        1e-12,
        "cross-horizon difference identity over all states, chunks and length pairs".into(),
    );

    let chain = TabularMdp::chain(2, 2, 0.99)?;
    let states = chain.num_states;
    let chain_lab = LabInstance::new(chain, ProposalTable::uniform(states, 2, 3), 2)?;
    let chain_fp = chain_lab.fixed_point(1e-13)?;
    let q_opt = chain_fp.q.get(0, 2, 0);
    report.push(
        "chain_fixed_point",
        (q_opt - -1.99).abs(),
        0.0,
        1e-10,
        format!("two-step chain to the goal: Q(s0, advance-advance) = {q_opt}"),
    );
    let chain_pv = chain_lab.evaluate_extraction(&chain_fp.q)?;
    report.push(
        "chain_policy_value",
        chain_pv.q.sup_distance(&chain_fp.q),
        0.0,
        1e-10,
        "chain fixed point against the exact extraction-policy value".into(),
    );

    let q_probe = lab.zeros().random_like(&mut rng, q_bound);
    let s0 = 0;
    let probe_code = rng.random_range(0..pow(shape.num_actions, shape.horizon));
    let probe = lab.index(s0, shape.horizon, probe_code);
    let exact = lab.apply_bnh(&q_probe)?.values()[probe];
    let (_, land) = lab.rollout(probe);
    let sampler = lab.proposal_sampler(land)?;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..MC_DRAWS {
        let g = lab.sampled_target(&q_probe, probe, &sampler, &mut rng);
        sum += g;
        sq += g * g;
    }
    let mean = sum / MC_DRAWS as f64;
    let var = (sq / MC_DRAWS as f64 - mean * mean).max(0.0) * MC_DRAWS as f64 / (MC_DRAWS - 1) as f64;
    let se = (var / MC_DRAWS as f64).sqrt();
    report.push(
        "monte_carlo_target",
        (mean - exact).abs(),
        3.0 * se,
        1e-12,
        format!("{MC_DRAWS} sampled targets average {mean}, exact backup {exact}"),
    );

    let mut worst_tv = f64::NEG_INFINITY;
    for s in 0..shape.num_states {
        let tv = tv_checks(
            lab.proposals.proposal_row(s),
            lab.proposals.behavior_row(s),
            shape.num_actions,
            shape.horizon,
        )?;
        worst_tv = worst_tv.max(tv.worst_excess());
    }
    for _ in 0..1000 {
        let (a, h) = [(2, 3), (3, 2), (2, 4), (4, 2)][rng.random_range(0..4)];
        let drop = rng.random_range(0.0..0.7);
        let mu = random_distribution(&mut rng, pow(a, h), drop);
        let nu = random_distribution(&mut rng, pow(a, h), drop);
        worst_tv = worst_tv.max(tv_checks(&mu, &nu, a, h)?.worst_excess());
    }
    report.push(
        "tv_marginal",
        worst_tv,
        0.0,
        1e-12,
        "largest TV(prefix marginals) − TV(full chunks) over the lab rows and 1000 random pairs"
            .into(),
    );

    let pm = tv_checks(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], 2, 2)?;
    report.push(
        "tv_point_masses",
        (pm.full - 1.0).abs() + pm.marginals[0].abs(),
        0.0,
        0.0,
        format!("full TV {}, first-action TV {}", pm.full, pm.marginals[0]),
    );

    let mut worst_kl = f64::NEG_INFINITY;
    for _ in 0..100 {
        let atoms = rng.random_range(2..=16);
        let p = random_distribution(&mut rng, atoms, 0.0);
        let values: Vec<f64> = (0..atoms).map(|_| rng.random_range(-1.0..1.0)).collect();
        for n in [2, 4, 8] {
            let (kl, bound) = kl_best_of_n(&p, &values, n)?;
            worst_kl = worst_kl.max(kl - bound);
        }
    }
    report.push(
        "kl_best_of_n",
        worst_kl,
        0.0,
        1e-9,
        "largest KL − (log N − (N−1)/N) over 100 proposals and N ∈ {2, 4, 8}".into(),
    );

    let vb = variance_bound(1.0, 0.0, 2)?;
    let vb_full = variance_bound(1.0, 1.0, 5)?;
    report.push(
        "variance_bound",
        (vb - 0.5).abs() + (vb_full - 1.0).abs(),
        0.0,
        1e-15,
        format!("uncorrelated pair gives {vb}, fully correlated gives {vb_full}"),
    );

    debug_assert_eq!(
        report.checks.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(),
        CHECK_NAMES
    );
    if report.checks.iter().any(|c| !c.measured.is_finite()) {
        return Err(Error::Lab("a theory check produced a non-finite measurement".into()));
    }
    Ok(report)
}
