//! Causal transformer critic over `(state, a_1, …, a_H)` token sequences.
//!
//! Head `h` reads the final hidden state at action position `h`, which under
//! the causal mask depends only on the state and the first `h` actions, so a
//! single forward pass scores every prefix of a chunk.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::ChunkedWindow;
use crate::error::{Error, Result};
use crate::ndgrad::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::scaling::Standardizer;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub d_head: usize,
    pub d_ff: usize,
    /// Number of independent ensemble members.
    pub ensemble: usize,
    /// Head outputs are multiplied by this before being read as values.
    pub q_scale: f64,
}

impl CriticConfig {
    pub fn d_model(&self) -> usize {
        self.n_head * self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.obs_dim,
            self.action_dim,
            self.horizon,
            self.n_layer,
            self.n_head,
            self.d_head,
            self.d_ff,
            self.ensemble,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("critic dimensions must be positive".into()));
        }
        if !(self.q_scale > 0.0) {
            return Err(Error::Config("critic q_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct MemberIds {
    state_in: (ParamId, ParamId),
    action_in: (ParamId, ParamId),
    pos: ParamId,
    blocks: Vec<BlockIds>,
    ln_f: (ParamId, ParamId),
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct PrefixCritic<T> {
    pub config: CriticConfig,
    pub params: ParamStore<T>,
    members: Vec<MemberIds>,
    pub obs_scaler: Standardizer,
}

fn linear_ids<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> (ParamId, ParamId) {
    let w = store.add_glorot(format!("{name}.w"), fan_in, fan_out, rng);
    let b = store.add_filled(format!("{name}.b"), &[fan_out], 0.0);
    (w, b)
}

fn norm_ids<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> (ParamId, ParamId) {
    let g = store.add_filled(format!("{name}.g"), &[d], 1.0);
    let b = store.add_filled(format!("{name}.b"), &[d], 0.0);
    (g, b)
}

impl<T: Real> PrefixCritic<T> {
    pub fn new(config: CriticConfig, obs_scaler: Standardizer, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if obs_scaler.dim() != config.obs_dim {
            return Err(Error::Config("critic observation scaler has the wrong width".into()));
        }
        let d = config.d_model();
        let mut ps = ParamStore::new();
        let mut members = Vec::with_capacity(config.ensemble);
        for m in 0..config.ensemble {
            let pre = format!("critic.m{m}");
            let state_in = linear_ids(&mut ps, &format!("{pre}.state_in"), config.obs_dim, d, rng);
            let action_in =
                linear_ids(&mut ps, &format!("{pre}.action_in"), config.action_dim, d, rng);
            let pos_scale = 0.1;
            let pos = ps.add(
                format!("{pre}.pos"),
                Tensor::from_fn(&[config.horizon + 1, d], |_| {
                    T::of(rng.random_range(-pos_scale..pos_scale))
                }),
            );
            let blocks = (0..config.n_layer)
                .map(|l| {
                    let bp = format!("{pre}.block{l}");
                    BlockIds {
                        ln1: norm_ids(&mut ps, &format!("{bp}.ln1"), d),
                        qkv: linear_ids(&mut ps, &format!("{bp}.qkv"), d, 3 * d, rng),
                        proj: linear_ids(&mut ps, &format!("{bp}.proj"), d, d, rng),
                        ln2: norm_ids(&mut ps, &format!("{bp}.ln2"), d),
                        ff1: linear_ids(&mut ps, &format!("{bp}.ff1"), d, config.d_ff, rng),
                        ff2: linear_ids(&mut ps, &format!("{bp}.ff2"), config.d_ff, d, rng),
                    }
                })
                .collect();
            let ln_f = norm_ids(&mut ps, &format!("{pre}.ln_f"), d);
            let limit = (3.0 / d as f64).sqrt();
            let head_w = ps.add(
                format!("{pre}.head.w"),
                Tensor::from_fn(&[config.horizon, d], |_| T::of(rng.random_range(-limit..limit))),
            );
            let head_b = ps.add_filled(format!("{pre}.head.b"), &[config.horizon], 0.0);
            members.push(MemberIds {
                state_in,
                action_in,
                pos,
                blocks,
                ln_f,
                head_w,
                head_b,
            });
        }
        Ok(PrefixCritic {
            config,
            params: ps,
            members,
            obs_scaler,
        })
    }

    pub fn cast<U: Real>(&self) -> PrefixCritic<U> {
        PrefixCritic {
            config: self.config.clone(),
            params: self.params.cast(),
            members: self.members.clone(),
            obs_scaler: self.obs_scaler.clone(),
        }
    }

    pub fn chunk_dim(&self) -> usize {
        self.config.horizon * self.config.action_dim
    }

    fn attention(&self, tape: &mut Tape<T>, p: &Bound, blk: &BlockIds, h: Var) -> Result<Var> {
        let c = &self.config;
        let shape = tape.shape(h).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let qkv = tape.linear(h, p[blk.qkv.0], p[blk.qkv.1])?;
        let split = |tape: &mut Tape<T>, i: usize| -> Result<Var> {
            let x = tape.slice(qkv, 2, i * d, d)?;
            let x = tape.reshape(x, &[b, t, c.n_head, c.d_head])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(x, &[b * c.n_head, t, c.d_head])
        };
        let q = split(tape, 0)?;
        let k = split(tape, 1)?;
        let v = split(tape, 2)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, T::of(1.0 / (c.d_head as f64).sqrt()));
        let causal: Vec<bool> = (0..t * t).map(|ij| ij % t <= ij / t).collect();
        let att = tape.masked_softmax(scores, &causal)?;
        let out = tape.batch_matmul(att, v, false)?;
        let out = tape.reshape(out, &[b, c.n_head, t, c.d_head])?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let out = tape.reshape(out, &[b, t, d])?;
        tape.linear(out, p[blk.proj.0], p[blk.proj.1])
    }

    /// Prefix values of one member: `obs` is standardized `[B, obs_dim]`,
    /// `actions` is `[B, H, action_dim]`; returns `[B, H]`.
    fn member_forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        m: &MemberIds,
        obs: Var,
        actions: Var,
    ) -> Result<Var> {
        let c = &self.config;
        let (b, hz, d) = (tape.shape(obs)[0], c.horizon, c.d_model());
        let s_tok = tape.linear(obs, p[m.state_in.0], p[m.state_in.1])?;
        let s_tok = tape.reshape(s_tok, &[b, 1, d])?;
        let a_tok = tape.linear(actions, p[m.action_in.0], p[m.action_in.1])?;
        let x = tape.concat(&[s_tok, a_tok], 1)?;
        let mut x = tape.add(x, p[m.pos])?;
        for blk in &m.blocks {
            let h = tape.layer_norm(x, p[blk.ln1.0], p[blk.ln1.1], T::of(LN_EPS))?;
            let att = self.attention(tape, p, blk, h)?;
            x = tape.add(x, att)?;
            let h = tape.layer_norm(x, p[blk.ln2.0], p[blk.ln2.1], T::of(LN_EPS))?;
            let f = tape.linear(h, p[blk.ff1.0], p[blk.ff1.1])?;
            let f = tape.gelu(f);
            let f = tape.linear(f, p[blk.ff2.0], p[blk.ff2.1])?;
            x = tape.add(x, f)?;
        }
        let x = tape.layer_norm(x, p[m.ln_f.0], p[m.ln_f.1], T::of(LN_EPS))?;
        let a_pos = tape.slice(x, 1, 1, hz)?;
        let q = tape.mul(a_pos, p[m.head_w])?;
        let q = tape.sum_last_axis(q);
        let q = tape.add(q, p[m.head_b])?;
        Ok(tape.scale(q, T::of(c.q_scale)))
    }

    /// Record raw observations and chunks as constants in the layout the
    /// members expect.
    pub fn inputs(&self, tape: &mut Tape<T>, obs: &[T], chunks: &[T]) -> Result<(Var, Var)> {
        let c = &self.config;
        let rows = obs.len() / c.obs_dim;
        if obs.is_empty() || !obs.len().is_multiple_of(c.obs_dim) || chunks.len() != rows * self.chunk_dim() {
            return Err(Error::shape(
                "critic",
                format!(
                    "{} observation values and {} chunk values (obs dim {}, chunk {}×{})",
                    obs.len(),
                    chunks.len(),
                    c.obs_dim,
                    c.horizon,
                    c.action_dim
                ),
            ));
        }
        let o = tape.constant(Tensor::new(vec![rows, c.obs_dim], self.obs_scaler.applied(obs))?);
        let a = tape.constant(Tensor::new(
            vec![rows, c.horizon, c.action_dim],
            chunks.to_vec(),
        )?);
        Ok((o, a))
    }

    /// `[B, H]` prefix values for every ensemble member.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, obs: Var, actions: Var) -> Result<Vec<Var>> {
        self.members
            .iter()
            .map(|m| self.member_forward(tape, p, m, obs, actions))
            .collect()
    }

    /// Gradient-free prefix values, one `rows × H` block per member.
    pub fn q_values(&self, obs: &[T], chunks: &[T]) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let (o, a) = self.inputs(&mut tape, obs, chunks)?;
        let outs = self.forward(&mut tape, &p, o, a)?;
        Ok(outs.into_iter().map(|v| tape.value(v).data().to_vec()).collect())
    }

    /// Ensemble minimum of the prefix values, `rows × H`.
    pub fn min_q(&self, obs: &[T], chunks: &[T]) -> Result<Vec<T>> {
        let mut members = self.q_values(obs, chunks)?.into_iter();
        let mut out = members.next().expect("ensemble is non-empty");
        for m in members {
            for (o, v) in out.iter_mut().zip(m) {
                *o = o.min(v);
            }
        }
        Ok(out)
    }
}

/// How the regression targets of a window are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticMode {
    /// Every prefix length regresses onto its own `h`-step target.
    MultiHorizon,
    /// Only prefixes of the given length are trained.
    FixedChunk(usize),
    /// One-step TD on a horizon-1 critic.
    SingleStep,
}

fn check_mode(mode: CriticMode, horizon: usize) -> Result<()> {
    match mode {
        CriticMode::SingleStep if horizon != 1 => Err(Error::Config(format!(
            "single-step mode needs horizon 1, got {horizon}"
        ))),
        CriticMode::FixedChunk(h) if h == 0 || h > horizon => Err(Error::Config(format!(
            "fixed chunk length {h} outside 1..={horizon}"
        ))),
        _ => Ok(()),
    }
}

/// Per-offset regression targets for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBundle {
    /// `targets[h - 1] = G_h`
    pub targets: Vec<f64>,
    pub bootstrap_mask: Vec<bool>,
    /// Loss weight of each offset (zero where the target is undefined or unused).
    pub weights: Vec<f64>,
}

/// `G_h = Σ_{τ<h} γ^τ r_{t+τ} + mask_h · γ^h · bootstrap[h − 1]`.
///
/// `bootstrap[h − 1]` is the continuation value at `s_{t+h}`; it is ignored
/// where the mask is off.
pub fn h_step_targets(
    window: &ChunkedWindow,
    gamma: f64,
    bootstrap: &[f64],
    mode: CriticMode,
) -> Result<TargetBundle> {
    let hz = window.horizon;
    if bootstrap.len() != hz {
        return Err(Error::shape(
            "h_step_targets",
            format!("{} bootstrap values for horizon {hz}", bootstrap.len()),
        ));
    }
    check_mode(mode, hz)?;
    let mut targets = vec![0.0; hz];
    let mut weights = vec![0.0; hz];
    for h in 1..=hz {
        let mut g = window.chunk_return(h, gamma);
        if window.bootstrap_mask[h - 1] {
            g += gamma.powi(h as i32) * bootstrap[h - 1];
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("target at offset h = {h}")));
        }
        targets[h - 1] = g;
        let used = match mode {
            CriticMode::FixedChunk(len) => h == len,
            CriticMode::MultiHorizon | CriticMode::SingleStep => true,
        };
        if used && window.valid[h - 1] {
            weights[h - 1] = 1.0;
        }
    }
    Ok(TargetBundle {
        targets,
        bootstrap_mask: window.bootstrap_mask.clone(),
        weights,
    })
}

/// Squared TD error against fixed targets, summed over ensemble members.
///
/// Each member contributes `(1/(B·L)) Σ_b Σ_h w_{b,h} (Q_h − G_h)²`, where `L`
/// is the number of trained lengths per window (`H` for multi-horizon and
/// single-step, `1` for fixed-chunk).
pub fn td_loss<T: Real>(
    critic: &PrefixCritic<T>,
    tape: &mut Tape<T>,
    p: &Bound,
    obs: &[T],
    chunks: &[T],
    bundles: &[TargetBundle],
    mode: CriticMode,
) -> Result<Var> {
    let hz = critic.config.horizon;
    check_mode(mode, hz)?;
    if bundles.iter().any(|b| b.targets.len() != hz) {
        return Err(Error::shape("td_loss", "target bundle horizon differs from the critic"));
    }
    let targets: Vec<T> = bundles.iter().flat_map(|b| b.targets.iter().map(|&g| T::of(g))).collect();
    let weights: Vec<T> = bundles.iter().flat_map(|b| b.weights.iter().map(|&w| T::of(w))).collect();
    let lengths = match mode {
        CriticMode::FixedChunk(_) => 1,
        CriticMode::MultiHorizon | CriticMode::SingleStep => hz,
    };
    let scale = T::one() / T::of((bundles.len() * lengths) as f64);
    let (o, a) = critic.inputs(tape, obs, chunks)?;
    let preds = critic.forward(tape, p, o, a)?;
    let mut total: Option<Var> = None;
    for q in preds {
        let l = tape.squared_error(q, &targets, Some(&weights), scale)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(total.expect("ensemble is non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Dataset, DatasetMeta, Episode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_config(horizon: usize) -> CriticConfig {
        CriticConfig {
            obs_dim: 2,
            action_dim: 2,
            horizon,
            n_layer: 2,
            n_head: 2,
            d_head: 4,
            d_ff: 16,
            ensemble: 2,
            q_scale: 1.0,
        }
    }

    fn window(rewards: &[f32], terminal: bool, horizon: usize) -> ChunkedWindow {
        let mut ep = Episode::new(&[0.0]);
        for (i, &r) in rewards.iter().enumerate() {
            ep.push(&[0.0], r, &[i as f32 + 1.0], terminal && i + 1 == rewards.len());
        }
        let mut d = Dataset::empty(DatasetMeta {
            env_id: "t".into(),
            obs_dim: 1,
            action_dim: 1,
            num_episodes: 0,
            generator_seed: 0,
            action_mean: vec![0.0],
            action_std: vec![1.0],
        });
        d.push_episode(ep);
        d.window(0, 0, horizon)
    }

    #[test]
    fn two_step_target_by_hand() {
        let w = window(&[-1.0, -1.0, -1.0], false, 2);
        let b = h_step_targets(&w, 0.99, &[0.0, -5.0], CriticMode::MultiHorizon).unwrap();
        assert!((b.targets[1] - -6.8905).abs() < 1e-12);
    }

    #[test]
    fn terminal_masks_bootstrap() {
        let w = window(&[0.0], true, 2);
        let b = h_step_targets(&w, 0.99, &[-100.0, -100.0], CriticMode::MultiHorizon).unwrap();
        assert_eq!(b.targets, vec![0.0, 0.0]);
        assert_eq!(b.weights, vec![1.0, 1.0]);
    }

    #[test]
    fn single_step_target_by_hand() {
        let w = window(&[-1.0, -1.0], false, 1);
        let b = h_step_targets(&w, 0.99, &[-10.0], CriticMode::SingleStep).unwrap();
        assert!((b.targets[0] - -10.9).abs() < 1e-12);
        assert!(h_step_targets(&window(&[-1.0; 3], false, 2), 0.99, &[0.0; 2], CriticMode::SingleStep).is_err());
    }

    #[test]
    fn fixed_chunk_trains_only_the_last_head() {
        let w = window(&[0.0; 4], false, 3);
        let b = h_step_targets(&w, 0.99, &[0.0; 3], CriticMode::FixedChunk(3)).unwrap();
        assert_eq!(b.targets, vec![0.0; 3]);
        assert_eq!(b.weights, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn nan_target_names_offset() {
        let w = window(&[-1.0; 3], false, 2);
        let err = h_step_targets(&w, 0.99, &[0.0, f64::NAN], CriticMode::MultiHorizon).unwrap_err();
        assert!(err.to_string().contains("h = 2"), "{err}");
    }

    #[test]
    fn perfect_critic_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = PrefixCritic::<f64>::new(small_config(3), Standardizer::identity(2), &mut rng).unwrap();
        let obs = [0.3, -0.2];
        let chunk = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let q = c.q_values(&obs, &chunk).unwrap();
        // members disagree, so score each against its own outputs
        for m in 0..2 {
            let bundle = TargetBundle {
                targets: q[m].clone(),
                bootstrap_mask: vec![true; 3],
                weights: vec![1.0; 3],
            };
            let mut tape = Tape::new();
            let p = c.params.bind(&mut tape, false);
            let (o, a) = c.inputs(&mut tape, &obs, &chunk).unwrap();
            let pred = c.forward(&mut tape, &p, o, a).unwrap()[m];
            let l = tape.squared_error(pred, &bundle.targets, None, 1.0).unwrap();
            assert_eq!(tape.value(l).item(), 0.0);
        }
    }

    #[test]
    fn suffix_rows_do_not_move_earlier_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = PrefixCritic::<f32>::new(small_config(4), Standardizer::identity(2), &mut rng).unwrap();
        let obs = [0.5f32, 0.5];
        let mut chunk: Vec<f32> = (0..8).map(|i| i as f32 * 0.1 - 0.4).collect();
        let before = c.q_values(&obs, &chunk).unwrap();
        chunk[6] = 3.0;
        chunk[7] = -2.0;
        let after = c.q_values(&obs, &chunk).unwrap();
        for m in 0..2 {
            assert_eq!(before[m][..3], after[m][..3]);
            assert_ne!(before[m][3], after[m][3]);
        }
        chunk[0] = 0.9;
        let first = c.q_values(&obs, &chunk).unwrap();
        assert_ne!(first[0][0], after[0][0]);
    }

    #[test]
    fn rejects_wrong_chunk_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = PrefixCritic::<f32>::new(small_config(2), Standardizer::identity(2), &mut rng).unwrap();
        assert!(c.q_values(&[0.0, 0.0], &[0.0; 3]).is_err());
    }
}
