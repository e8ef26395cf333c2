use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::run::{stream, RunState, EVAL_STREAM};
use crate::envs::{MazeSpec, Point};
use crate::error::{Error, Result};
use crate::extraction::extract_batch;

/// One extract call during evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Env step at which the prefix was selected.
    pub t: usize,
    pub h: usize,
    /// Actions executed before the episode ended or the prefix ran out.
    pub executed: usize,
    /// Critic score of the selected prefix.
    pub q: f64,
    /// Realized discounted return from `t` to the end of the episode.
    pub g: f64,
    pub state: Point,
    pub turn_region: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub success: bool,
    pub length: usize,
    pub discounted_return: f64,
    pub decisions: Vec<Decision>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub config_hash: String,
    pub gamma: f64,
    pub success_rate: f64,
    pub mean_return: f64,
    /// Mean selected `h★` over all decisions.
    pub mean_h: f64,
    pub episodes: Vec<EpisodeLog>,
}

struct Live {
    state: Point,
    pending: VecDeque<Point>,
    rewards: Vec<f64>,
    log: EpisodeLog,
    alive: bool,
}

/// Roll out `episodes` episodes from the start state with the evaluation RNG
/// stream. Episodes advance in lockstep so that each extract call is batched
/// over every episode that needs a new prefix, in episode order.
pub fn evaluate(run: &RunState, episodes: usize) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let cfg = &run.config;
    let maze: &MazeSpec = &run.maze;
    let mut rng = stream(cfg.seed, EVAL_STREAM);
    let mut live: Vec<Live> = (0..episodes)
        .map(|_| Live {
            state: maze.start,
            pending: VecDeque::new(),
            rewards: Vec::new(),
            log: EpisodeLog {
                success: false,
                length: 0,
                discounted_return: 0.0,
                decisions: Vec::new(),
            },
            alive: true,
        })
        .collect();

    while live.iter().any(|l| l.alive) {
        let needs: Vec<usize> = (0..episodes)
            .filter(|&i| live[i].alive && live[i].pending.is_empty())
            .collect();
        if !needs.is_empty() {
            let obs: Vec<f32> = needs
                .iter()
                .flat_map(|&i| [live[i].state[0] as f32, live[i].state[1] as f32])
                .collect();
            let sets = extract_batch(
                &run.critic,
                &run.flow,
                &obs,
                cfg.num_candidates,
                cfg.selection(),
                &mut rng,
            )?;
            for (&i, set) in needs.iter().zip(&sets) {
                let l = &mut live[i];
                for a in set.prefix().chunks_exact(MazeSpec::ACTION_DIM) {
                    l.pending.push_back([f64::from(a[0]), f64::from(a[1])]);
                }
                l.log.decisions.push(Decision {
                    t: l.log.length,
                    h: set.h_star,
                    executed: 0,
                    q: set.value(),
                    g: 0.0,
                    state: l.state,
                    turn_region: maze.in_turn_region(l.state),
                });
            }
        }
        for l in live.iter_mut().filter(|l| l.alive) {
            let a = l.pending.pop_front().expect("prefix refilled");
            let out = maze.step(l.state, a);
            l.state = out.next;
            l.rewards.push(out.reward);
            l.log.length += 1;
            l.log.decisions.last_mut().expect("decision made").executed += 1;
            if out.done || l.log.length >= maze.max_steps {
                l.log.success = out.done;
                l.alive = false;
            }
        }
    }

    let mut logs = Vec::with_capacity(episodes);
    for l in live {
        let mut log = l.log;
        let mut to_go = vec![0.0; l.rewards.len() + 1];
        for t in (0..l.rewards.len()).rev() {
            to_go[t] = l.rewards[t] + cfg.gamma * to_go[t + 1];
        }
        log.discounted_return = to_go[0];
        for d in &mut log.decisions {
            d.g = to_go[d.t];
        }
        logs.push(log);
    }
    let n = episodes as f64;
    let decisions: Vec<&Decision> = logs.iter().flat_map(|l| &l.decisions).collect();
    Ok(EvalReport {
        step: run.total_steps(),
        config_hash: cfg.hash(),
        gamma: cfg.gamma,
        success_rate: logs.iter().filter(|l| l.success).count() as f64 / n,
        mean_return: logs.iter().map(|l| l.discounted_return).sum::<f64>() / n,
        mean_h: decisions.iter().map(|d| d.h as f64).sum::<f64>() / decisions.len().max(1) as f64,
        episodes: logs,
    })
}
