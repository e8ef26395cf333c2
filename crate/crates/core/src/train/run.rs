use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{evaluate, EvalReport};
use crate::critic::{h_step_targets, td_loss, CriticMode, PrefixCritic, TargetBundle};
use crate::envs::{ChunkedWindow, Dataset, Episode, MazeSpec, Point};
use crate::error::{Error, Result};
use crate::extraction::extract_batch;
use crate::flow::FlowPolicy;
use crate::ndgrad::{Adam, Tape};
use crate::scaling::Standardizer;

/// RNG stream ids derived from the run seed.
pub(crate) const TRAIN_STREAM: u64 = 1;
pub(crate) const EVAL_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Standardizer for maze positions from the workspace bounds (uniform-box moments).
pub fn workspace_scaler(maze: &MazeSpec) -> Result<Standardizer> {
    let (lo, hi) = (maze.workspace.min, maze.workspace.max);
    let mean = (0..2).map(|k| 0.5 * (lo[k] + hi[k])).collect();
    let std = (0..2).map(|k| (hi[k] - lo[k]) / 12f64.sqrt()).collect();
    Standardizer::new(mean, std)
}

/// One row of the JSON-lines metrics stream, written at every evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub phase: String,
    /// Mean losses since the previous record (`None` before any update).
    pub loss_flow: Option<f64>,
    pub loss_critic: Option<f64>,
    pub success: f64,
    pub mean_return: f64,
    pub mean_h: f64,
}

/// Prefix bookkeeping of one online episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OnlineEpisode {
    /// `h★` of every extract call, in order.
    pub selected: Vec<usize>,
    /// Actions actually executed from each selected prefix.
    pub executed: Vec<usize>,
    pub length: usize,
    pub success: bool,
}

/// Online acting state: the pending prefix is consumed action by action and
/// refilled only once empty.
#[derive(Clone, Debug)]
pub struct Actor {
    pub state: Point,
    pub pending: VecDeque<[f32; 2]>,
    pub steps: usize,
    pub open: bool,
}

#[derive(Clone, Debug, Default)]
struct LossWindow {
    flow: f64,
    critic: f64,
    count: u64,
}

impl LossWindow {
    fn take(&mut self) -> (Option<f64>, Option<f64>) {
        let out = if self.count == 0 {
            (None, None)
        } else {
            let n = self.count as f64;
            (Some(self.flow / n), Some(self.critic / n))
        };
        *self = LossWindow::default();
        out
    }
}

/// Losses of one update step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub flow: f64,
    pub critic: f64,
}

/// A critic minibatch with its regression targets.
#[derive(Clone, Debug)]
pub struct CriticBatch {
    pub windows: Vec<ChunkedWindow>,
    pub obs: Vec<f32>,
    pub chunks: Vec<f32>,
    pub bundles: Vec<TargetBundle>,
}

pub struct RunState {
    pub config: RunConfig,
    pub maze: MazeSpec,
    pub flow: FlowPolicy<f32>,
    pub critic: PrefixCritic<f32>,
    /// Polyak-averaged critic of the baselines; ACSAC bootstraps from `critic`.
    pub target: Option<PrefixCritic<f32>>,
    pub flow_opt: Adam<f32>,
    pub critic_opt: Adam<f32>,
    /// Offline data; online transitions are appended to it.
    pub dataset: Dataset,
    pub offline_steps: u64,
    pub env_steps: u64,
    pub train_rng: ChaCha8Rng,
    pub actor: Actor,
    pub metrics: Vec<MetricRecord>,
    pub online_episodes: Vec<OnlineEpisode>,
    losses: LossWindow,
}

impl RunState {
    /// Fresh networks for `config`, scaled to `dataset`.
    pub fn new(config: RunConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        let maze = config.maze()?;
        let meta = &dataset.meta;
        if meta.obs_dim != MazeSpec::OBS_DIM || meta.action_dim != MazeSpec::ACTION_DIM {
            return Err(Error::Config(format!(
                "dataset dims ({}, {}) do not match the maze",
                meta.obs_dim, meta.action_dim
            )));
        }
        if dataset.num_transitions() == 0 {
            return Err(Error::InvalidArgument("dataset has no transitions".into()));
        }
        let obs_scaler = workspace_scaler(&maze)?;
        let action_scaler = Standardizer::new(meta.action_mean.clone(), meta.action_std.clone())?;
        let mut init = stream(config.seed, INIT_STREAM);
        let flow = FlowPolicy::new(config.flow_config(), obs_scaler.clone(), action_scaler, &mut init)?;
        let critic = PrefixCritic::new(config.critic_config(), obs_scaler, &mut init)?;
        Self::assemble(config, maze, dataset, flow, critic)
    }

    /// State around existing networks, with fresh optimizers.
    pub fn from_parts(
        config: RunConfig,
        dataset: Dataset,
        flow: FlowPolicy<f32>,
        critic: PrefixCritic<f32>,
        target: Option<PrefixCritic<f32>>,
    ) -> Result<Self> {
        config.validate()?;
        let maze = config.maze()?;
        if flow.config != config.flow_config() || critic.config != config.critic_config() {
            return Err(Error::Config("network shapes differ from the config".into()));
        }
        let mut s = Self::assemble(config, maze, dataset, flow, critic)?;
        if let (Some(t), Some(slot)) = (target, s.target.as_mut()) {
            if t.config != slot.config {
                return Err(Error::Config("target critic shape differs from the config".into()));
            }
            *slot = t;
        }
        Ok(s)
    }

    fn assemble(
        config: RunConfig,
        maze: MazeSpec,
        dataset: Dataset,
        flow: FlowPolicy<f32>,
        critic: PrefixCritic<f32>,
    ) -> Result<Self> {
        let flow_opt = Adam::new(&flow.params, config.lr)?;
        let critic_opt = Adam::new(&critic.params, config.lr)?;
        let target = config.uses_target().then(|| critic.clone());
        Ok(RunState {
            train_rng: stream(config.seed, TRAIN_STREAM),
            actor: Actor {
                state: maze.start,
                pending: VecDeque::new(),
                steps: 0,
                open: false,
            },
            config,
            maze,
            flow,
            critic,
            target,
            flow_opt,
            critic_opt,
            dataset,
            offline_steps: 0,
            env_steps: 0,
            metrics: Vec::new(),
            online_episodes: Vec::new(),
            losses: LossWindow::default(),
        })
    }

    /// Gradient steps taken so far (offline plus online).
    pub fn total_steps(&self) -> u64 {
        self.offline_steps + self.env_steps
    }

    /// Continuation values `V(s_{t+h})` for every window offset that needs one.
    pub fn bootstrap_values(
        &self,
        windows: &[ChunkedWindow],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<f64>>> {
        let hz = self.config.horizon;
        let mode = self.config.critic_mode();
        let mut obs = Vec::new();
        let mut slots = Vec::new();
        for (i, w) in windows.iter().enumerate() {
            for h in 1..=hz {
                let used = match mode {
                    CriticMode::FixedChunk(len) => h == len,
                    CriticMode::MultiHorizon | CriticMode::SingleStep => true,
                };
                if used && w.bootstrap_mask[h - 1] {
                    obs.extend_from_slice(w.state(h));
                    slots.push((i, h));
                }
            }
        }
        let mut values = vec![vec![0.0; hz]; windows.len()];
        if slots.is_empty() {
            return Ok(values);
        }
        let evaluator = self.target.as_ref().unwrap_or(&self.critic);
        let sets = extract_batch(
            evaluator,
            &self.flow,
            &obs,
            self.config.num_candidates,
            self.config.selection(),
            rng,
        )?;
        for ((i, h), set) in slots.into_iter().zip(sets) {
            values[i][h - 1] = set.value();
        }
        Ok(values)
    }

    /// Sample `batch` windows and attach their targets.
    pub fn sample_critic_batch(&self, rng: &mut ChaCha8Rng) -> Result<CriticBatch> {
        let hz = self.config.horizon;
        let windows: Vec<ChunkedWindow> = (0..self.config.batch)
            .map(|_| {
                self.dataset
                    .sample_window(hz, rng)
                    .ok_or_else(|| Error::InvalidArgument("no sampleable window".into()))
            })
            .collect::<Result<_>>()?;
        let boot = self.bootstrap_values(&windows, rng)?;
        let mode = self.config.critic_mode();
        let bundles = windows
            .iter()
            .zip(&boot)
            .map(|(w, b)| h_step_targets(w, self.config.gamma, b, mode))
            .collect::<Result<_>>()?;
        let obs = windows.iter().flat_map(|w| w.state(0).to_vec()).collect();
        let chunks = windows.iter().flat_map(|w| w.actions.clone()).collect();
        Ok(CriticBatch {
            windows,
            obs,
            chunks,
            bundles,
        })
    }

    /// One flow update, then one critic update (and a target update for the baselines).
    pub fn train_step(&mut self) -> Result<StepLosses> {
        let step = self.total_steps() + 1;
        let hz = self.config.horizon;
        let mut rng = std::mem::replace(&mut self.train_rng, stream(0, 0));
        let result = self.train_step_with(step, hz, &mut rng);
        self.train_rng = rng;
        let losses = result?;
        self.losses.flow += losses.flow;
        self.losses.critic += losses.critic;
        self.losses.count += 1;
        Ok(losses)
    }

    fn train_step_with(&mut self, step: u64, hz: usize, rng: &mut ChaCha8Rng) -> Result<StepLosses> {
        let mut obs = Vec::with_capacity(self.config.batch * MazeSpec::OBS_DIM);
        let mut chunks = Vec::with_capacity(self.config.batch * self.flow.config.chunk_dim());
        for _ in 0..self.config.batch {
            let w = self.dataset.sample_real_window(hz, rng).ok_or_else(|| {
                Error::InvalidArgument(format!("no episode with at least {hz} transitions"))
            })?;
            obs.extend_from_slice(w.state(0));
            chunks.extend_from_slice(&w.actions);
        }
        let mut tape = Tape::new();
        let p = self.flow.params.bind(&mut tape, true);
        let loss = self.flow.bc_loss(&mut tape, &p, &obs, &chunks, rng)?;
        let flow_loss = f64::from(tape.value(loss).item());
        if !flow_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "flow loss".into(),
            });
        }
        let mut g = tape.backward(loss)?;
        let grads = self.flow.params.collect_grads(&p, &mut g);
        self.flow_opt.step(&mut self.flow.params, &grads)?;

        let batch = self.sample_critic_batch(rng)?;
        let mut tape = Tape::new();
        let p = self.critic.params.bind(&mut tape, true);
        let loss = td_loss(
            &self.critic,
            &mut tape,
            &p,
            &batch.obs,
            &batch.chunks,
            &batch.bundles,
            self.config.critic_mode(),
        )?;
        let critic_loss = f64::from(tape.value(loss).item());
        if !critic_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "critic loss".into(),
            });
        }
        let mut g = tape.backward(loss)?;
        let grads = self.critic.params.collect_grads(&p, &mut g);
        self.critic_opt.step(&mut self.critic.params, &grads)?;
        if let Some(t) = self.target.as_mut() {
            t.params.polyak_from(&self.critic.params, self.config.tau as f32)?;
        }
        Ok(StepLosses {
            flow: flow_loss,
            critic: critic_loss,
        })
    }

    fn begin_episode(&mut self) {
        let start = self.maze.start;
        self.actor = Actor {
            state: start,
            pending: VecDeque::new(),
            steps: 0,
            open: true,
        };
        self.dataset
            .push_episode(Episode::new(&[start[0] as f32, start[1] as f32]));
        self.online_episodes.push(OnlineEpisode::default());
    }

    /// Act for one env step (replanning when the prefix is used up), store the
    /// transition, then take one training step.
    pub fn online_step(&mut self) -> Result<StepLosses> {
        if !self.actor.open {
            self.begin_episode();
        }
        if self.actor.pending.is_empty() {
            let s = self.actor.state;
            let obs = [s[0] as f32, s[1] as f32];
            let mut sets = extract_batch(
                &self.critic,
                &self.flow,
                &obs,
                self.config.num_candidates,
                self.config.selection(),
                &mut self.train_rng,
            )?;
            let set = sets.pop().expect("one state");
            for a in set.prefix().chunks_exact(MazeSpec::ACTION_DIM) {
                self.actor.pending.push_back([a[0], a[1]]);
            }
            let log = self.online_episodes.last_mut().expect("episode open");
            log.selected.push(set.h_star);
            log.executed.push(0);
        }
        let action = self.actor.pending.pop_front().expect("prefix refilled");
        let out = self
            .maze
            .step(self.actor.state, [f64::from(action[0]), f64::from(action[1])]);
        let next = [out.next[0] as f32, out.next[1] as f32];
        self.dataset
            .episodes
            .last_mut()
            .expect("episode open")
            .push(&action, out.reward as f32, &next, out.done);
        self.env_steps += 1;
        self.actor.state = out.next;
        self.actor.steps += 1;
        let log = self.online_episodes.last_mut().expect("episode open");
        *log.executed.last_mut().expect("prefix recorded") += 1;
        log.length = self.actor.steps;
        if out.done || self.actor.steps >= self.maze.max_steps {
            log.success = out.done;
            self.actor.open = false;
            self.actor.pending.clear();
        }
        self.train_step()
    }

    pub fn evaluate(&self, episodes: usize) -> Result<EvalReport> {
        evaluate(self, episodes)
    }

    fn record_eval(&mut self, phase: &str) -> Result<()> {
        let report = self.evaluate(self.config.eval_episodes)?;
        let (loss_flow, loss_critic) = self.losses.take();
        let rec = MetricRecord {
            step: self.total_steps(),
            phase: phase.into(),
            loss_flow,
            loss_critic,
            success: report.success_rate,
            mean_return: report.mean_return,
            mean_h: report.mean_h,
        };
        log::info!(
            "{phase} step {}: success {:.2}, return {:.2}, mean h {:.2}, losses {:?}/{:?}",
            rec.step,
            rec.success,
            rec.mean_return,
            rec.mean_h,
            rec.loss_flow,
            rec.loss_critic
        );
        self.metrics.push(rec);
        Ok(())
    }

    fn maybe_eval(&mut self, phase: &str) -> Result<()> {
        if self.total_steps().is_multiple_of(self.config.eval_every) {
            self.record_eval(phase)?;
        }
        Ok(())
    }

    fn finish_phase(&mut self, phase: &str) -> Result<()> {
        let done = self.metrics.last().is_some_and(|m| m.step == self.total_steps());
        if !done {
            self.record_eval(phase)?;
        }
        Ok(())
    }

    /// `steps` offline updates with periodic evaluation.
    pub fn run_offline(&mut self, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.train_step()?;
            self.offline_steps += 1;
            self.maybe_eval("offline")?;
        }
        self.finish_phase("offline")
    }

    /// `env_steps` online steps with periodic evaluation.
    pub fn run_online(&mut self, env_steps: u64) -> Result<()> {
        for _ in 0..env_steps {
            self.online_step()?;
            self.maybe_eval("online")?;
        }
        self.finish_phase("online")
    }

    /// Metrics as JSON lines.
    pub fn metrics_jsonl(&self) -> String {
        self.metrics
            .iter()
            .map(|m| serde_json::to_string(m).expect("metric serializes") + "\n")
            .collect()
    }
}

/// Offline pretraining for `config.offline_steps` steps.
pub fn train_offline(config: RunConfig, dataset: Dataset) -> Result<RunState> {
    let steps = config.offline_steps;
    let mut state = RunState::new(config, dataset)?;
    state.run_offline(steps)?;
    Ok(state)
}

/// Online fine-tuning for `env_steps` environment steps.
pub fn train_online(mut state: RunState, env_steps: u64) -> Result<RunState> {
    state.run_online(env_steps)?;
    Ok(state)
}
