//! Episode storage and chunked-window sampling with absorbing padding.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env_id: String,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub num_episodes: usize,
    pub generator_seed: u64,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

/// One trajectory: `len + 1` states, `len` actions, rewards and done flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
}

impl Episode {
    pub fn new(initial_state: &[f32]) -> Self {
        Episode {
            states: initial_state.to_vec(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Ended by reaching a terminal state (as opposed to truncation or still running).
    pub fn terminated(&self) -> bool {
        self.dones.last().copied().unwrap_or(false)
    }

    pub fn push(&mut self, action: &[f32], reward: f32, next_state: &[f32], done: bool) {
        self.actions.extend_from_slice(action);
        self.rewards.push(reward);
        self.dones.push(done);
        self.states.extend_from_slice(next_state);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub episodes: Vec<Episode>,
}

/// Length-`H` training window starting at `(episode, t)`.
///
/// Offsets past a terminal transition are padded with zero reward, zero action
/// and the terminal state. Offsets past a non-terminal end (truncated or
/// still-running episode) are marked invalid and carry no training signal.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedWindow {
    pub episode: usize,
    pub t: usize,
    pub horizon: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    /// `(H + 1) × obs_dim`
    pub states: Vec<f32>,
    /// `H × action_dim`
    pub actions: Vec<f32>,
    pub rewards: Vec<f64>,
    /// `bootstrap_mask[h - 1]`: the `γ^h` continuation at `s_{t+h}` is used.
    pub bootstrap_mask: Vec<bool>,
    /// `valid[h - 1]`: the length-`h` prefix has a well-defined target.
    pub valid: Vec<bool>,
    /// Number of real (unpadded) transitions.
    pub real: usize,
}

impl ChunkedWindow {
    pub fn state(&self, i: usize) -> &[f32] {
        &self.states[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    /// `Σ_{τ<h} γ^τ r_{t+τ}`
    pub fn chunk_return(&self, h: usize, gamma: f64) -> f64 {
        let mut acc = 0.0;
        let mut disc = 1.0;
        for &r in &self.rewards[..h] {
            acc += disc * r;
            disc *= gamma;
        }
        acc
    }

    pub fn is_fully_real(&self) -> bool {
        self.real == self.horizon
    }
}

impl Dataset {
    pub fn empty(meta: DatasetMeta) -> Self {
        Dataset {
            meta,
            episodes: Vec::new(),
        }
    }

    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn push_episode(&mut self, ep: Episode) {
        self.episodes.push(ep);
        self.meta.num_episodes = self.episodes.len();
    }

    /// Window at a given start index. Panics if `t` is not a transition index.
    pub fn window(&self, episode: usize, t: usize, horizon: usize) -> ChunkedWindow {
        let ep = &self.episodes[episode];
        let (od, ad) = (self.meta.obs_dim, self.meta.action_dim);
        let len = ep.len();
        assert!(t < len, "window start {t} outside episode of length {len}");
        let real = horizon.min(len - t);
        let terminated = ep.terminated();

        let mut states = Vec::with_capacity((horizon + 1) * od);
        for i in 0..=horizon {
            let idx = (t + i).min(len);
            states.extend_from_slice(&ep.states[idx * od..(idx + 1) * od]);
        }
        let mut actions = vec![0.0; horizon * ad];
        actions[..real * ad].copy_from_slice(&ep.actions[t * ad..(t + real) * ad]);
        let mut rewards = vec![0.0; horizon];
        for (i, r) in rewards.iter_mut().enumerate().take(real) {
            *r = f64::from(ep.rewards[t + i]);
        }
        let mut bootstrap_mask = vec![false; horizon];
        let mut valid = vec![false; horizon];
        for h in 1..=horizon {
            let landing = t + h;
            if landing < len || (landing == len && !terminated) {
                bootstrap_mask[h - 1] = true;
                valid[h - 1] = true;
            } else if terminated {
                valid[h - 1] = true;
            }
        }
        ChunkedWindow {
            episode,
            t,
            horizon,
            obs_dim: od,
            action_dim: ad,
            states,
            actions,
            rewards,
            bootstrap_mask,
            valid,
            real,
        }
    }

    fn pick_episode(&self, rng: &mut impl Rng, min_len: usize) -> Option<usize> {
        if self.episodes.is_empty() {
            return None;
        }
        for _ in 0..64 {
            let e = rng.random_range(0..self.episodes.len());
            if self.episodes[e].len() >= min_len {
                return Some(e);
            }
        }
        let eligible: Vec<usize> = (0..self.episodes.len())
            .filter(|&e| self.episodes[e].len() >= min_len)
            .collect();
        (!eligible.is_empty()).then(|| eligible[rng.random_range(0..eligible.len())])
    }

    /// Uniform episode, then uniform start index; windows may run past the end.
    /// Episodes without transitions are skipped. `None` if nothing is sampleable.
    pub fn sample_window(&self, horizon: usize, rng: &mut impl Rng) -> Option<ChunkedWindow> {
        let e = self.pick_episode(rng, 1)?;
        let t = rng.random_range(0..self.episodes[e].len());
        Some(self.window(e, t, horizon))
    }

    /// Window made entirely of recorded transitions, for behavior cloning.
    pub fn sample_real_window(&self, horizon: usize, rng: &mut impl Rng) -> Option<ChunkedWindow> {
        let e = self.pick_episode(rng, horizon)?;
        let t = rng.random_range(0..=self.episodes[e].len() - horizon);
        Some(self.window(e, t, horizon))
    }
}
