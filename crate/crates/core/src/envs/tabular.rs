use rand::Rng;

use crate::error::{Error, Result};

/// Finite deterministic MDP. Terminal states are absorbing with reward 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub num_states: usize,
    pub num_actions: usize,
    /// `next[s * num_actions + a]`
    pub next: Vec<usize>,
    /// `reward[s * num_actions + a]`
    pub reward: Vec<f64>,
    pub gamma: f64,
    pub terminal: Vec<bool>,
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        next: Vec<usize>,
        reward: Vec<f64>,
        gamma: f64,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let mdp = TabularMdp {
            num_states,
            num_actions,
            next,
            reward,
            gamma,
            terminal,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_states * self.num_actions;
        if self.num_states == 0 || self.num_actions == 0 {
            return Err(Error::Lab("MDP needs at least one state and action".into()));
        }
        if self.next.len() != n || self.reward.len() != n || self.terminal.len() != self.num_states
        {
            return Err(Error::Lab("transition/reward tables have the wrong size".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Lab(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.next.iter().any(|&s| s >= self.num_states) {
            return Err(Error::Lab("transition to an unknown state".into()));
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Lab("non-finite reward".into()));
        }
        for s in 0..self.num_states {
            if self.terminal[s] {
                for a in 0..self.num_actions {
                    let i = s * self.num_actions + a;
                    if self.next[i] != s || self.reward[i] != 0.0 {
                        return Err(Error::Lab(format!("terminal state {s} is not absorbing")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn step(&self, s: usize, a: usize) -> (usize, f64) {
        let i = s * self.num_actions + a;
        (self.next[i], self.reward[i])
    }

    pub fn r_max(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// States `0..=k`; action 0 advances one state, other actions stay put.
    /// Every non-terminal step costs −1 and state `k` is an absorbing goal.
    pub fn chain(k: usize, num_actions: usize, gamma: f64) -> Result<Self> {
        let ns = k + 1;
        let mut next = Vec::with_capacity(ns * num_actions);
        let mut reward = Vec::with_capacity(ns * num_actions);
        for s in 0..ns {
            for a in 0..num_actions {
                if s == k {
                    next.push(s);
                    reward.push(0.0);
                } else {
                    next.push(if a == 0 { s + 1 } else { s });
                    reward.push(-1.0);
                }
            }
        }
        let mut terminal = vec![false; ns];
        terminal[k] = true;
        Self::new(ns, num_actions, next, reward, gamma, terminal)
    }

    /// Random deterministic MDP with rewards in `[-r_max, r_max]`; the last
    /// `num_terminal` states are absorbing.
    pub fn random(
        rng: &mut impl Rng,
        num_states: usize,
        num_actions: usize,
        num_terminal: usize,
        gamma: f64,
        r_max: f64,
    ) -> Result<Self> {
        let mut next = Vec::new();
        let mut reward = Vec::new();
        let mut terminal = vec![false; num_states];
        for s in 0..num_states {
            let is_term = s + num_terminal >= num_states;
            terminal[s] = is_term;
            for _ in 0..num_actions {
                if is_term {
                    next.push(s);
                    reward.push(0.0);
                } else {
                    next.push(rng.random_range(0..num_states));
                    reward.push(rng.random_range(-r_max..=r_max));
                }
            }
        }
        Self::new(num_states, num_actions, next, reward, gamma, terminal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chain_is_absorbing_at_goal() {
        let m = TabularMdp::chain(3, 2, 0.9).unwrap();
        assert_eq!(m.step(3, 0), (3, 0.0));
        assert_eq!(m.step(0, 0), (1, -1.0));
        assert_eq!(m.step(0, 1), (0, -1.0));
        assert_eq!(m.r_max(), 1.0);
    }

    #[test]
    fn random_mdp_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = TabularMdp::random(&mut rng, 7, 3, 2, 0.9, 0.5).unwrap();
        assert!(m.r_max() <= 0.5);
        assert!(m.terminal[5] && m.terminal[6] && !m.terminal[4]);
    }

    #[test]
    fn non_absorbing_terminal_is_rejected() {
        let err = TabularMdp::new(2, 1, vec![1, 0], vec![0.0, 0.0], 0.9, vec![true, false]);
        assert!(err.is_err());
    }
}
