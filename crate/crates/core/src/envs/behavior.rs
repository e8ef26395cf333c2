//! Scripted, noisy waypoint controller used to collect the offline dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetMeta, Episode};
use super::maze::{MazeSpec, Point};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorConfig {
    pub noise_std: f64,
    pub detour_prob: f64,
    /// Inclusive range of detour lengths in steps.
    pub detour_len: (usize, usize),
    /// Latest step at which a detour may begin.
    pub detour_start_max: usize,
    /// Distance at which the controller advances to the next waypoint.
    pub switch_radius: f64,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig {
            noise_std: 0.2,
            detour_prob: 0.3,
            detour_len: (3, 8),
            detour_start_max: 12,
            switch_radius: 0.5,
        }
    }
}

fn toward(spec: &MazeSpec, from: Point, to: Point) -> Point {
    spec.clip_action([to[0] - from[0], to[1] - from[1]]).0
}

fn random_free_point(spec: &MazeSpec, rng: &mut impl Rng) -> Point {
    loop {
        let p = [
            rng.random_range(spec.workspace.min[0]..=spec.workspace.max[0]),
            rng.random_range(spec.workspace.min[1]..=spec.workspace.max[1]),
        ];
        if spec.is_free(p) {
            return p;
        }
    }
}

fn to_f32(p: Point) -> [f32; 2] {
    [p[0] as f32, p[1] as f32]
}

/// One episode of the scripted controller; runs until the goal or the step cap.
pub fn scripted_episode(spec: &MazeSpec, cfg: &BehaviorConfig, rng: &mut impl Rng) -> Episode {
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("valid std");
    let detour = if cfg.detour_prob > 0.0 && rng.random_bool(cfg.detour_prob.min(1.0)) {
        let start = rng.random_range(0..=cfg.detour_start_max);
        let len = rng.random_range(cfg.detour_len.0..=cfg.detour_len.1);
        Some((start, start + len, random_free_point(spec, rng)))
    } else {
        None
    };

    let mut s = spec.start;
    let mut ep = Episode::new(&to_f32(s));
    let mut wp = 0;
    for step in 0..spec.max_steps {
        while wp + 1 < spec.waypoints.len() {
            let w = spec.waypoints[wp];
            if ((s[0] - w[0]).powi(2) + (s[1] - w[1]).powi(2)).sqrt() <= cfg.switch_radius {
                wp += 1;
            } else {
                break;
            }
        }
        let target = match detour {
            Some((a, b, p)) if step >= a && step < b => p,
            _ => spec.waypoints[wp],
        };
        let mut a = toward(spec, s, target);
        if cfg.noise_std > 0.0 {
            a[0] += noise.sample(rng);
            a[1] += noise.sample(rng);
        }
        let (a, _) = spec.clip_action(a);
        let a = [a[0] as f32 as f64, a[1] as f32 as f64];
        let out = spec.step(s, a);
        ep.push(&to_f32(a), out.reward as f32, &to_f32(out.next), out.done);
        s = out.next;
        if out.done {
            break;
        }
    }
    ep
}

/// Per-dimension mean and standard deviation of all recorded actions.
pub fn action_stats(episodes: &[Episode], action_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; action_dim];
    let mut sq = vec![0.0; action_dim];
    let mut n = 0usize;
    for ep in episodes {
        for a in ep.actions.chunks(action_dim) {
            for k in 0..action_dim {
                sum[k] += f64::from(a[k]);
                sq[k] += f64::from(a[k]) * f64::from(a[k]);
            }
            n += 1;
        }
    }
    if n == 0 {
        return (vec![0.0; action_dim], vec![1.0; action_dim]);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt())
        .collect();
    (mean, std)
}

/// Offline dataset from the scripted controller, deterministic in `seed`.
pub fn generate_offline_data(
    spec: &MazeSpec,
    cfg: &BehaviorConfig,
    seed: u64,
    num_episodes: usize,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episodes: Vec<Episode> = (0..num_episodes)
        .map(|_| scripted_episode(spec, cfg, &mut rng))
        .collect();
    let (action_mean, action_std) = action_stats(&episodes, MazeSpec::ACTION_DIM);
    Dataset {
        meta: DatasetMeta {
            env_id: spec.id.clone(),
            obs_dim: MazeSpec::OBS_DIM,
            action_dim: MazeSpec::ACTION_DIM,
            num_episodes: episodes.len(),
            generator_seed: seed,
            action_mean,
            action_std,
        },
        episodes,
    }
}
