//! Variable-horizon Bellman backups on a deterministic tabular MDP.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::tables::{decode, pow, prefix_code, PrefixQTable, ProposalTable};
use crate::envs::TabularMdp;
use crate::error::{Error, Result};

/// Discounted open-loop return of `prefix` from `s`, and the landing state.
pub fn chunk_return(mdp: &TabularMdp, s: usize, prefix: &[usize]) -> (f64, usize) {
    let mut state = s;
    let mut acc = 0.0;
    let mut disc = 1.0;
    for &a in prefix {
        let (next, r) = mdp.step(state, a);
        acc += disc * r;
        disc *= mdp.gamma;
        state = next;
    }
    (acc, state)
}

/// `E[max of N i.i.d. draws]` for a finite distribution given as `(value, prob)`.
///
/// Distinct values `v_1 < … < v_m` with CDF `F` contribute
/// `v_i (F(v_i)^N − F(v_{i−1})^N)`.
pub fn expected_max(atoms: &mut [(f64, f64)], n: usize) -> Result<f64> {
    if atoms.is_empty() {
        return Err(Error::Lab("empty proposal support".into()));
    }
    if n == 0 {
        return Err(Error::Lab("N must be at least 1".into()));
    }
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = n as i32;
    let mut acc = 0.0;
    let mut cdf = 0.0f64;
    let mut prev = 0.0f64;
    let mut i = 0;
    while i < atoms.len() {
        let v = atoms[i].0;
        while i < atoms.len() && atoms[i].0 == v {
            cdf += atoms[i].1;
            i += 1;
        }
        let f = if i == atoms.len() { 1.0 } else { cdf.min(1.0) };
        let fn_ = f.powi(n);
        acc += v * (fn_ - prev);
        prev = fn_;
    }
    Ok(acc)
}

/// An MDP, proposal table and candidate count, with every prefix rollout cached.
#[derive(Clone, Debug)]
pub struct LabInstance {
    pub mdp: TabularMdp,
    pub proposals: ProposalTable,
    pub n: usize,
    returns: Vec<f64>,
    landings: Vec<usize>,
    discounts: Vec<f64>,
    layout: PrefixQTable,
}

#[derive(Clone, Debug)]
pub struct FixedPoint {
    pub q: PrefixQTable,
    pub iterations: usize,
    /// Sup-norm change of each iteration.
    pub changes: Vec<f64>,
}

impl FixedPoint {
    /// `‖Q_{k+1} − Q_k‖ / ‖Q_k − Q_{k−1}‖` for consecutive iterations whose
    /// earlier change exceeds `floor` (below it round-off dominates).
    pub fn contraction_ratios(&self, floor: f64) -> Vec<f64> {
        self.changes
            .windows(2)
            .filter(|w| w[0] > floor)
            .map(|w| w[1] / w[0])
            .collect()
    }
}

/// Exact value of the extraction policy induced by a fixed table.
#[derive(Clone, Debug)]
pub struct PolicyValue {
    pub v: Vec<f64>,
    pub q: PrefixQTable,
}

const MAX_ITERATIONS: usize = 1_000_000;
const MAX_TUPLES: usize = 1_000_000;

impl LabInstance {
    pub fn new(mdp: TabularMdp, proposals: ProposalTable, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Lab("N must be at least 1".into()));
        }
        if proposals.num_states != mdp.num_states || proposals.num_actions != mdp.num_actions {
            return Err(Error::Lab(format!(
                "proposal table is {}×{} but the MDP has {} states and {} actions",
                proposals.num_states, proposals.num_actions, mdp.num_states, mdp.num_actions
            )));
        }
        let layout = PrefixQTable::zeros(mdp.num_states, mdp.num_actions, proposals.horizon);
        let mut returns = Vec::with_capacity(layout.values().len());
        let mut landings = Vec::with_capacity(layout.values().len());
        let mut discounts = Vec::with_capacity(layout.values().len());
        for (s, h, c) in layout.keys() {
            let (r, land) = chunk_return(&mdp, s, &decode(c, mdp.num_actions, h));
            returns.push(r);
            landings.push(land);
            discounts.push(mdp.gamma.powi(h as i32));
        }
        Ok(LabInstance {
            mdp,
            proposals,
            n,
            returns,
            landings,
            discounts,
            layout,
        })
    }

    pub fn horizon(&self) -> usize {
        self.proposals.horizon
    }

    pub fn zeros(&self) -> PrefixQTable {
        self.layout.clone()
    }

    /// `r^{(h)}` and the landing state of the entry at `index`.
    pub fn rollout(&self, index: usize) -> (f64, usize) {
        (self.returns[index], self.landings[index])
    }

    /// `max_k Q(s, c_{1:k})` for a full chunk code `c`.
    pub fn chunk_score(&self, q: &PrefixQTable, s: usize, code: usize) -> f64 {
        let (a, hz) = (self.mdp.num_actions, self.horizon());
        (1..=hz).fold(f64::NEG_INFINITY, |m, k| m.max(q.get(s, k, prefix_code(code, a, hz, k))))
    }

    /// Inner expectation of the backup at every state.
    pub fn expected_prefix_max(&self, q: &PrefixQTable) -> Result<Vec<f64>> {
        (0..self.mdp.num_states)
            .map(|s| {
                let mut atoms: Vec<(f64, f64)> = self
                    .proposals
                    .support(s)
                    .into_iter()
                    .map(|(c, p)| (self.chunk_score(q, s, c), p))
                    .collect();
                expected_max(&mut atoms, self.n)
                    .map_err(|e| Error::Lab(format!("state {s}: {e}")))
            })
            .collect()
    }

    /// Expected-prefix-max backup, with the expectation computed exactly.
    pub fn apply_bnh(&self, q: &PrefixQTable) -> Result<PrefixQTable> {
        let w = self.expected_prefix_max(q)?;
        let mut out = self.zeros();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            *v = self.returns[i] + self.discounts[i] * w[self.landings[i]];
        }
        Ok(out)
    }

    /// Iterate the backup from `Q ≡ 0` until the sup-norm change drops below `tol`.
    pub fn fixed_point(&self, tol: f64) -> Result<FixedPoint> {
        if !(tol > 0.0) {
            return Err(Error::Lab(format!("tolerance must be positive, got {tol}")));
        }
        let mut q = self.zeros();
        let mut changes = Vec::new();
        for it in 1..=MAX_ITERATIONS {
            let next = self.apply_bnh(&q)?;
            let change = next.sup_distance(&q);
            changes.push(change);
            q = next;
            if change < tol {
                return Ok(FixedPoint {
                    q,
                    iterations: it,
                    changes,
                });
            }
        }
        Err(Error::Lab(format!(
            "backup did not converge within {MAX_ITERATIONS} iterations"
        )))
    }

    /// Joint argmax over `N` candidate chunks and `H` prefix lengths.
    /// Ties go to the smallest candidate index, then the shortest prefix.
    pub fn select(&self, q: &PrefixQTable, s: usize, candidates: &[usize]) -> (usize, usize) {
        let (a, hz) = (self.mdp.num_actions, self.horizon());
        let mut best = (0, 1);
        let mut best_v = f64::NEG_INFINITY;
        for (n, &c) in candidates.iter().enumerate() {
            for h in 1..=hz {
                let v = q.get(s, h, prefix_code(c, a, hz, h));
                if v > best_v {
                    best_v = v;
                    best = (n, h);
                }
            }
        }
        best
    }

    /// Distribution of the executed prefix at `s` under the extraction policy
    /// induced by `q`, as `(table index, probability)`. Enumerates every N-tuple.
    pub fn selection_kernel(&self, q: &PrefixQTable, s: usize) -> Result<Vec<(usize, f64)>> {
        let support = self.proposals.support(s);
        if support.is_empty() {
            return Err(Error::Lab(format!("state {s}: empty proposal support")));
        }
        let tuples = support
            .len()
            .checked_pow(self.n as u32)
            .filter(|&t| t <= MAX_TUPLES)
            .ok_or_else(|| {
                Error::Lab(format!(
                    "state {s}: {}^{} candidate tuples exceed {MAX_TUPLES}; use a smaller lab instance",
                    support.len(),
                    self.n
                ))
            })?;
        let (a, hz) = (self.mdp.num_actions, self.horizon());
        let mut mass = vec![0.0; q.prefixes_per_state()];
        let mut digits = vec![0usize; self.n];
        let mut codes = vec![0usize; self.n];
        for _ in 0..tuples {
            let mut p = 1.0;
            for (slot, &d) in digits.iter().enumerate() {
                codes[slot] = support[d].0;
                p *= support[d].1;
            }
            let (n, h) = self.select(q, s, &codes);
            let idx = q.index(s, h, prefix_code(codes[n], a, hz, h)) - s * q.prefixes_per_state();
            mass[idx] += p;
            for d in digits.iter_mut() {
                *d += 1;
                if *d < support.len() {
                    break;
                }
                *d = 0;
            }
        }
        let base = s * q.prefixes_per_state();
        Ok(mass
            .into_iter()
            .enumerate()
            .filter(|(_, p)| *p > 0.0)
            .map(|(i, p)| (base + i, p))
            .collect())
    }

    /// Exact value of the semi-Markov policy that runs `select` with `q` and
    /// executes the chosen prefix open-loop. Solves the linear Bellman system directly.
    pub fn evaluate_extraction(&self, q: &PrefixQTable) -> Result<PolicyValue> {
        let ns = self.mdp.num_states;
        // (I − P) V = b
        let mut m = vec![0.0; ns * ns];
        let mut b = vec![0.0; ns];
        for s in 0..ns {
            m[s * ns + s] += 1.0;
            for (idx, p) in self.selection_kernel(q, s)? {
                b[s] += p * self.returns[idx];
                m[s * ns + self.landings[idx]] -= p * self.discounts[idx];
            }
        }
        let v = solve_dense(ns, &mut m, &mut b)?;
        let mut qpi = self.zeros();
        for (i, out) in qpi.values_mut().iter_mut().enumerate() {
            *out = self.returns[i] + self.discounts[i] * v[self.landings[i]];
        }
        Ok(PolicyValue { v, q: qpi })
    }

    /// One Monte-Carlo sample of the bootstrap target at table entry `index`:
    /// `r^{(h)} + γ^h max_{n,k} Q(s', c̃_n[1:k])` with fresh proposal draws at `s'`.
    pub fn sampled_target(
        &self,
        q: &PrefixQTable,
        index: usize,
        sampler: &WeightedIndex<f64>,
        rng: &mut impl Rng,
    ) -> f64 {
        let land = self.landings[index];
        let best = (0..self.n)
            .map(|_| self.chunk_score(q, land, sampler.sample(rng)))
            .fold(f64::NEG_INFINITY, f64::max);
        self.returns[index] + self.discounts[index] * best
    }

    /// Categorical sampler over full chunks at `s`.
    pub fn proposal_sampler(&self, s: usize) -> Result<WeightedIndex<f64>> {
        WeightedIndex::new(self.proposals.proposal_row(s).iter().copied())
            .map_err(|e| Error::Lab(format!("state {s}: {e}")))
    }

    /// Table index of `(state, length, code)`.
    pub fn index(&self, s: usize, h: usize, code: usize) -> usize {
        self.layout.index(s, h, code)
    }

    /// Largest violation of the cross-horizon difference identity over every
    /// state, full chunk and pair `h₁ < h₂`.
    pub fn difference_identity_error(&self, value: &PolicyValue) -> f64 {
        let (a, hz) = (self.mdp.num_actions, self.horizon());
        let gamma = self.mdp.gamma;
        let mut worst = 0.0f64;
        for s in 0..self.mdp.num_states {
            for c in 0..pow(a, hz) {
                let actions = decode(c, a, hz);
                for h1 in 1..hz {
                    let (_, s1) = chunk_return(&self.mdp, s, &actions[..h1]);
                    for h2 in h1 + 1..=hz {
                        let lhs = value.q.get(s, h2, prefix_code(c, a, hz, h2))
                            - value.q.get(s, h1, prefix_code(c, a, hz, h1));
                        let (seg, s2) = chunk_return(&self.mdp, s1, &actions[h1..h2]);
                        let rhs = gamma.powi(h1 as i32)
                            * (seg + gamma.powi((h2 - h1) as i32) * value.v[s2] - value.v[s1]);
                        worst = worst.max((lhs - rhs).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Gaussian elimination with partial pivoting; `m` is row-major `n × n`.
fn solve_dense(n: usize, m: &mut [f64], b: &mut [f64]) -> Result<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .expect("non-empty range");
        if m[pivot * n + col].abs() < 1e-300 {
            return Err(Error::Lab("singular policy-evaluation system".into()));
        }
        if pivot != col {
            for k in 0..n {
                m.swap(pivot * n + k, col * n + k);
            }
            b.swap(pivot, col);
        }
        for row in col + 1..n {
            let f = m[row * n + col] / m[col * n + col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= f * m[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= m[row * n + k] * x[k];
        }
        x[row] = acc / m[row * n + row];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain_lab(k: usize, gamma: f64, horizon: usize, n: usize) -> LabInstance {
        let mdp = TabularMdp::chain(k, 2, gamma).unwrap();
        let props = ProposalTable::uniform(mdp.num_states, 2, horizon);
        LabInstance::new(mdp, props, n).unwrap()
    }

    #[test]
    fn chunk_return_of_unit_costs() {
        let mdp = TabularMdp::chain(5, 2, 0.99).unwrap();
        let (r, land) = chunk_return(&mdp, 0, &[0, 0, 0]);
        assert!((r - -2.9701).abs() < 1e-12);
        assert_eq!(land, 3);
        assert_eq!(chunk_return(&mdp, 1, &[1]), (-1.0, 1));
    }

    #[test]
    fn order_statistic_expected_max() {
        let mut atoms = [(1.0, 0.5), (0.0, 0.5)];
        assert!((expected_max(&mut atoms, 2).unwrap() - 0.75).abs() < 1e-15);
        let mut atoms = [(3.0, 0.25), (-1.0, 0.75)];
        assert!((expected_max(&mut atoms, 1).unwrap() - 0.0).abs() < 1e-15);
        assert!(expected_max(&mut [], 2).is_err());
    }

    #[test]
    fn zero_mdp_keeps_zero_table() {
        let mdp = TabularMdp::new(1, 2, vec![0, 0], vec![0.0, 0.0], 0.9, vec![true]).unwrap();
        let lab = LabInstance::new(mdp, ProposalTable::uniform(1, 2, 2), 2).unwrap();
        let q = lab.apply_bnh(&lab.zeros()).unwrap();
        assert_eq!(q.sup_norm(), 0.0);
        let pv = lab.evaluate_extraction(&q).unwrap();
        assert_eq!(pv.q.sup_norm(), 0.0);
    }

    #[test]
    fn chain_fixed_point_is_geometric_series() {
        let lab = chain_lab(2, 0.99, 3, 2);
        let fp = lab.fixed_point(1e-13).unwrap();
        let q = fp.q.get(0, 2, 0b00);
        assert!((q - -1.99).abs() < 1e-10, "{q}");
        let pv = lab.evaluate_extraction(&fp.q).unwrap();
        assert!(pv.q.sup_distance(&fp.q) < 1e-10);
    }

    #[test]
    fn selection_tie_break_is_lexicographic() {
        let lab = chain_lab(1, 0.9, 2, 2);
        let q = lab.zeros();
        assert_eq!(lab.select(&q, 0, &[3, 1]), (0, 1));
    }

    #[test]
    fn single_candidate_backup_is_plain_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = TabularMdp::random(&mut rng, 4, 2, 1, 0.9, 1.0).unwrap();
        let props = ProposalTable::random(&mut rng, 4, 2, 2, 0.3);
        let lab = LabInstance::new(mdp, props, 1).unwrap();
        let q = lab.zeros().random_like(&mut rng, 5.0);
        let w = lab.expected_prefix_max(&q).unwrap();
        for s in 0..4 {
            let plain: f64 = lab
                .proposals
                .support(s)
                .iter()
                .map(|&(c, p)| p * lab.chunk_score(&q, s, c))
                .sum();
            assert!((w[s] - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_solver_matches_known_system() {
        let mut m = vec![2.0, 1.0, 1.0, 3.0];
        let mut b = vec![3.0, 5.0];
        let x = solve_dense(2, &mut m, &mut b).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-15 && (x[1] - 1.4).abs() < 1e-15);
    }
}
