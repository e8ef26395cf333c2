use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::critic::{CriticConfig, CriticMode};
use crate::envs::{BehaviorConfig, MazeSpec, Point};
use crate::error::{Error, Result};
use crate::extraction::Selection;
use crate::flow::FlowConfig;

/// Which agent is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Multi-horizon critic, joint candidate-and-length extraction, no target network.
    Acsac,
    /// Critic and extraction at one fixed chunk length, Polyak target.
    FixedChunk(usize),
    /// Horizon-1 actor-critic with a Polyak target.
    SingleStep,
}

/// Optional edits applied on top of a named maze.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvOverrides {
    pub start: Option<Point>,
    pub goal: Option<Point>,
    pub goal_radius: Option<f64>,
    pub max_steps: Option<usize>,
    pub turn_radius: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticDims {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub q_scale: f64,
}

impl Default for CriticDims {
    fn default() -> Self {
        CriticDims {
            n_layer: 2,
            n_head: 4,
            d_head: 8,
            d_ff: 64,
            q_scale: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env_id: String,
    pub env_overrides: EnvOverrides,
    pub mode: Mode,
    pub horizon: usize,
    pub num_candidates: usize,
    pub flow_steps: usize,
    pub gamma: f64,
    pub lr: f64,
    pub batch: usize,
    pub ensemble: usize,
    pub critic: CriticDims,
    pub flow_hidden: Vec<usize>,
    /// Polyak rate of the baselines' target critic.
    pub tau: f64,
    pub offline_steps: u64,
    pub online_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub seed: u64,
    /// Seed of the offline data generator; defaults to `seed`.
    pub data_seed: Option<u64>,
    pub dataset_episodes: usize,
    pub behavior: BehaviorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env_id: "l-maze".into(),
            env_overrides: EnvOverrides::default(),
            mode: Mode::Acsac,
            horizon: 5,
            num_candidates: 4,
            flow_steps: 10,
            gamma: 0.99,
            lr: 3e-4,
            batch: 8,
            ensemble: 2,
            critic: CriticDims::default(),
            flow_hidden: vec![64, 64, 64],
            tau: 5e-3,
            offline_steps: 50_000,
            online_steps: 20_000,
            eval_every: 5_000,
            eval_episodes: 50,
            seed: 0,
            data_seed: None,
            dataset_episodes: 200,
            behavior: BehaviorConfig::default(),
        }
    }
}

impl RunConfig {
    /// Default config for `mode`, with the horizon forced to 1 for single-step.
    pub fn for_mode(mode: Mode) -> Self {
        let mut c = RunConfig {
            mode,
            ..RunConfig::default()
        };
        if mode == Mode::SingleStep {
            c.horizon = 1;
        }
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.horizon == 0 || self.num_candidates == 0 || self.flow_steps == 0 {
            return fail("horizon, num_candidates and flow_steps must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau {} outside (0, 1]", self.tau));
        }
        if self.batch == 0 || self.ensemble == 0 {
            return fail("batch and ensemble must be at least 1".into());
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return fail("eval_every and eval_episodes must be at least 1".into());
        }
        match self.mode {
            Mode::FixedChunk(h) if h == 0 || h > self.horizon => {
                return fail(format!("fixed_chunk length {h} outside 1..={}", self.horizon));
            }
            Mode::SingleStep if self.horizon != 1 => {
                return fail(format!("single_step needs horizon 1, got {}", self.horizon));
            }
            _ => {}
        }
        self.maze()?;
        self.flow_config().validate()?;
        self.critic_config().validate()
    }

    pub fn maze(&self) -> Result<MazeSpec> {
        let mut m = match self.env_id.as_str() {
            "l-maze" => MazeSpec::l_maze(),
            "open" => MazeSpec::open(8.0),
            other => return Err(Error::Config(format!("unknown env id {other:?}"))),
        };
        let o = &self.env_overrides;
        if let Some(p) = o.start {
            m.start = p;
        }
        if let Some(p) = o.goal {
            m.goal = p;
        }
        if let Some(r) = o.goal_radius {
            m.goal_radius = r;
        }
        if let Some(s) = o.max_steps {
            m.max_steps = s;
        }
        if let Some(r) = o.turn_radius {
            m.turn_radius = r;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            obs_dim: MazeSpec::OBS_DIM,
            action_dim: MazeSpec::ACTION_DIM,
            horizon: self.horizon,
            hidden: self.flow_hidden.clone(),
            flow_steps: self.flow_steps,
            action_bound: 1.0,
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig {
            obs_dim: MazeSpec::OBS_DIM,
            action_dim: MazeSpec::ACTION_DIM,
            horizon: self.horizon,
            n_layer: self.critic.n_layer,
            n_head: self.critic.n_head,
            d_head: self.critic.d_head,
            d_ff: self.critic.d_ff,
            ensemble: self.ensemble,
            q_scale: self.critic.q_scale,
        }
    }

    pub fn critic_mode(&self) -> CriticMode {
        match self.mode {
            Mode::Acsac => CriticMode::MultiHorizon,
            Mode::FixedChunk(h) => CriticMode::FixedChunk(h),
            Mode::SingleStep => CriticMode::SingleStep,
        }
    }

    pub fn selection(&self) -> Selection {
        match self.mode {
            Mode::FixedChunk(h) => Selection::FixedLength(h),
            Mode::Acsac | Mode::SingleStep => Selection::Joint,
        }
    }

    pub fn uses_target(&self) -> bool {
        self.mode != Mode::Acsac
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
