//! Finite tables over action prefixes.
//!
//! A prefix of length `h` over `A` actions is encoded base-`A` with the first
//! action as the most significant digit, so the length-`k` prefix of a full
//! chunk code `c` is `c / A^(H-k)`.

use rand::Rng;

use crate::error::{Error, Result};

pub fn pow(base: usize, exp: usize) -> usize {
    base.checked_pow(exp as u32).expect("prefix table size overflows usize")
}

/// Length-`k` prefix of a length-`len` code.
pub fn prefix_code(code: usize, num_actions: usize, len: usize, k: usize) -> usize {
    code / pow(num_actions, len - k)
}

pub fn decode(code: usize, num_actions: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    let mut c = code;
    for slot in out.iter_mut().rev() {
        *slot = c % num_actions;
        c /= num_actions;
    }
    out
}

/// Values for every state and every prefix of length `1..=H`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixQTable {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    /// `offsets[h - 1]` is the first slot of length-`h` prefixes within a state block.
    offsets: Vec<usize>,
    per_state: usize,
    values: Vec<f64>,
}

impl PrefixQTable {
    pub fn filled(num_states: usize, num_actions: usize, horizon: usize, value: f64) -> Self {
        assert!(num_states > 0 && num_actions > 0 && horizon > 0);
        let mut offsets = Vec::with_capacity(horizon);
        let mut acc = 0;
        for h in 1..=horizon {
            offsets.push(acc);
            acc += pow(num_actions, h);
        }
        PrefixQTable {
            num_states,
            num_actions,
            horizon,
            offsets,
            per_state: acc,
            values: vec![value; num_states * acc],
        }
    }

    pub fn zeros(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self::filled(num_states, num_actions, horizon, 0.0)
    }

    /// Same layout with values drawn uniformly from `[-bound, bound]`.
    pub fn random_like(&self, rng: &mut impl Rng, bound: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v = rng.random_range(-bound..=bound);
        }
        out
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of prefixes per state, `Σ_h A^h`.
    pub fn prefixes_per_state(&self) -> usize {
        self.per_state
    }

    pub fn index(&self, s: usize, h: usize, code: usize) -> usize {
        debug_assert!(h >= 1 && h <= self.horizon && code < pow(self.num_actions, h));
        s * self.per_state + self.offsets[h - 1] + code
    }

    pub fn get(&self, s: usize, h: usize, code: usize) -> f64 {
        self.values[self.index(s, h, code)]
    }

    pub fn set(&mut self, s: usize, h: usize, code: usize, value: f64) {
        let i = self.index(s, h, code);
        self.values[i] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Every `(state, length, code)` in storage order.
    pub fn keys(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.num_states).flat_map(move |s| {
            (1..=self.horizon).flat_map(move |h| (0..pow(self.num_actions, h)).map(move |c| (s, h, c)))
        })
    }

    pub fn sup_distance(&self, other: &Self) -> f64 {
        assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Per-state chunk distributions: the proposal (flow surrogate) and the behavior law.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalTable {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// `num_states × A^H`
    pub proposal: Vec<f64>,
    /// `num_states × A^H`
    pub behavior: Vec<f64>,
}

pub(crate) fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Lab(format!("{what}: probabilities must be finite and non-negative")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Lab(format!("{what}: probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// Random distribution over `len` atoms; each atom is dropped with `drop_prob`.
pub fn random_distribution(rng: &mut impl Rng, len: usize, drop_prob: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..len)
        .map(|_| {
            if rng.random_bool(drop_prob) {
                0.0
            } else {
                rng.random_range(0.05..1.0)
            }
        })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        w[rng.random_range(0..len)] = 1.0;
    }
    normalize(&mut w);
    w
}

/// Rescale to sum 1, folding the rounding residue into the largest entry.
pub(crate) fn normalize(w: &mut [f64]) {
    let total: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= total;
    }
    let residue = 1.0 - w.iter().sum::<f64>();
    let (imax, _) = w
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
    w[imax] += residue;
}

impl ProposalTable {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        proposal: Vec<f64>,
        behavior: Vec<f64>,
    ) -> Result<Self> {
        let width = pow(num_actions, horizon);
        for (name, table) in [("proposal", &proposal), ("behavior", &behavior)] {
            if table.len() != num_states * width {
                return Err(Error::Lab(format!(
                    "{name} table has {} entries, expected {}",
                    table.len(),
                    num_states * width
                )));
            }
            for (s, row) in table.chunks(width).enumerate() {
                check_distribution(row, &format!("{name} row for state {s}"))?;
            }
        }
        Ok(ProposalTable {
            num_states,
            num_actions,
            horizon,
            proposal,
            behavior,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        let width = pow(num_actions, horizon);
        let row = vec![1.0 / width as f64; num_states * width];
        ProposalTable {
            num_states,
            num_actions,
            horizon,
            proposal: row.clone(),
            behavior: row,
        }
    }

    pub fn random(
        rng: &mut impl Rng,
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        drop_prob: f64,
    ) -> Self {
        let width = pow(num_actions, horizon);
        let mut proposal = Vec::with_capacity(num_states * width);
        let mut behavior = Vec::with_capacity(num_states * width);
        for _ in 0..num_states {
            proposal.extend(random_distribution(rng, width, drop_prob));
            behavior.extend(random_distribution(rng, width, drop_prob));
        }
        ProposalTable {
            num_states,
            num_actions,
            horizon,
            proposal,
            behavior,
        }
    }

    pub fn chunks_per_state(&self) -> usize {
        pow(self.num_actions, self.horizon)
    }

    pub fn proposal_row(&self, s: usize) -> &[f64] {
        let w = self.chunks_per_state();
        &self.proposal[s * w..(s + 1) * w]
    }

    pub fn behavior_row(&self, s: usize) -> &[f64] {
        let w = self.chunks_per_state();
        &self.behavior[s * w..(s + 1) * w]
    }

    /// `(chunk code, probability)` for every proposal atom with positive mass.
    pub fn support(&self, s: usize) -> Vec<(usize, f64)> {
        self.proposal_row(s)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(c, &p)| (c, p))
            .collect()
    }
}
