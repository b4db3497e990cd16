//! Multi-agent PPO with a parameter-shared recurrent actor and a centralised
//! recurrent critic.
//!
//! The actor sees only its own observation. With `share_critic` the critic
//! input is every agent's observation, a one-hot agent id and the agent's
//! normalised distances to the others; without it the critic sees the
//! agent's own observation only.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvConfig, EnvError, Environment, Observation};
use crate::harness::{run_episode, Controller};
use crate::nn::{clip_grad_norm, masked_softmax, CellKind, NetConfig, Network, RmsProp};
use crate::rules::{Action, ActionMask};
use crate::scenario::Scenario;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    /// Length of the recurrent chunks that minibatches are built from.
    pub chunk_len: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Joint environment steps over the whole run.
    pub total_steps: usize,
    pub episodes_per_update: usize,
    pub hidden: usize,
    pub layers: usize,
    pub cell: CellKind,
    /// Critic sees all agents (MAPPO) or only its own agent (PPO).
    pub share_critic: bool,
    /// Greedy evaluation on the training suite every this many updates.
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            rms_alpha: 0.99,
            rms_eps: 1e-5,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.1,
            epochs: 4,
            minibatches: 2,
            chunk_len: 10,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 10.0,
            total_steps: 100_000,
            episodes_per_update: 8,
            hidden: 128,
            layers: 2,
            cell: CellKind::Gru,
            share_critic: true,
            eval_interval: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training suite")]
    EmptySuite,
    #[error("training suite mixes agent counts ({0} and {1})")]
    AgentCount(usize, usize),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("non-finite loss at update {update} ({what}); last good checkpoint kept")]
    Diverged {
        update: usize,
        what: String,
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("checkpoint version {0} is not supported")]
    Version(u32),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("lr", self.lr),
            ("rms_eps", self.rms_eps),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let unit = [
            ("rms_alpha", self.rms_alpha),
            ("gamma", self.gamma),
            ("gae_lambda", self.gae_lambda),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainError::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(TrainError::Config(format!("clip must be in (0, 1), got {}", self.clip)));
        }
        let counts = [
            ("epochs", self.epochs),
            ("minibatches", self.minibatches),
            ("chunk_len", self.chunk_len),
            ("episodes_per_update", self.episodes_per_update),
            ("hidden", self.hidden),
            ("eval_interval", self.eval_interval),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

pub fn critic_dim(agents: usize, obs_dim: usize, share: bool) -> usize {
    if share {
        agents * obs_dim + agents + agents.saturating_sub(1)
    } else {
        obs_dim
    }
}

/// Critic input for `agent`. `features` are every agent's actor features.
pub fn critic_input(
    features: &[Vec<f64>],
    observations: &[Observation],
    agent: usize,
    share: bool,
) -> Vec<f64> {
    if !share {
        return features[agent].clone();
    }
    let n = features.len();
    let mut v: Vec<f64> = features.iter().flatten().copied().collect();
    v.extend((0..n).map(|i| if i == agent { 1.0 } else { 0.0 }));
    let o = &observations[agent];
    v.extend(o.agent_distances.iter().map(|d| d / o.distance_scale));
    v
}

/// Actor and critic networks plus the dimensions they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub agents: usize,
    pub obs_dim: usize,
    pub share_critic: bool,
    pub actor: Network,
    pub critic: Network,
}

impl ActorCritic {
    pub fn new(agents: usize, obs_dim: usize, cfg: &TrainConfig, rng: &mut impl Rng) -> Self {
        let actor = Network::new(
            NetConfig {
                input: obs_dim,
                hidden: cfg.hidden,
                layers: cfg.layers,
                cell: cfg.cell,
                output: Action::COUNT,
            },
            0.01,
            rng,
        );
        let critic = Network::new(
            NetConfig {
                input: critic_dim(agents, obs_dim, cfg.share_critic),
                hidden: cfg.hidden,
                layers: cfg.layers,
                cell: cfg.cell,
                output: 1,
            },
            1.0,
            rng,
        );
        Self {
            agents,
            obs_dim,
            share_critic: cfg.share_critic,
            actor,
            critic,
        }
    }

    /// Batched actor step over all agents; returns per-agent action
    /// probabilities and the new hidden state.
    pub fn actor_forward(
        &self,
        features: &[Vec<f64>],
        masks: &[ActionMask],
        hidden: &Array2<f64>,
    ) -> (Vec<Vec<f64>>, Array2<f64>) {
        let x = rows(features, self.obs_dim);
        let (logits, h) = self.actor.step(x.view(), hidden.view());
        let probs = (0..features.len())
            .map(|i| masked_softmax(logits.row(i).as_slice().expect("row-major"), &masks[i].allowed))
            .collect();
        (probs, h)
    }

    pub fn critic_forward(&self, inputs: &[Vec<f64>], hidden: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
        let x = rows(inputs, self.critic.config.input);
        let (v, h) = self.critic.step(x.view(), hidden.view());
        (v.column(0).to_vec(), h)
    }
}

fn rows(data: &[Vec<f64>], width: usize) -> Array2<f64> {
    let mut x = Array2::zeros((data.len(), width));
    for (i, row) in data.iter().enumerate() {
        assert_eq!(row.len(), width, "input dimension mismatch");
        x.row_mut(i).assign(&ndarray::ArrayView1::from(row.as_slice()));
    }
    x
}

fn sample(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// One agent's side of one episode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub obs: Vec<Vec<f64>>,
    pub critic_obs: Vec<Vec<f64>>,
    pub masks: Vec<ActionMask>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Recurrent states entering each step.
    pub actor_hidden: Vec<Vec<f64>>,
    pub critic_hidden: Vec<Vec<f64>>,
    /// Value of the state after the last step when the episode was cut
    /// short rather than terminated; zero otherwise.
    pub bootstrap: f64,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRollout {
    pub trajectories: Vec<Trajectory>,
    /// Undiscounted sum of the shared reward.
    pub total_reward: f64,
    pub success: bool,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub episodes: Vec<EpisodeRollout>,
}

impl RolloutBuffer {
    pub fn steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps).sum()
    }
}

/// GAE with `λ`, resetting at the episode end; returns = advantages + values.
pub fn compute_advantages(traj: &mut Trajectory, gamma: f64, lambda: f64) {
    let n = traj.len();
    traj.advantages = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n {
            traj.values[t + 1]
        } else {
            traj.bootstrap
        };
        let delta = traj.rewards[t] + gamma * next - traj.values[t];
        gae = delta + gamma * lambda * gae;
        traj.advantages[t] = gae;
    }
    traj.returns = traj
        .advantages
        .iter()
        .zip(&traj.values)
        .map(|(a, v)| a + v)
        .collect();
}

/// Runs one sampled episode and records everything PPO needs.
pub fn collect_episode(
    env: &mut Environment,
    model: &ActorCritic,
    rng: &mut impl Rng,
    step_cap: usize,
) -> Result<EpisodeRollout, EnvError> {
    let n = env.num_agents();
    let mut observations = env.reset();
    let mut masks = env.masks();
    let mut ha = model.actor.initial_hidden(n);
    let mut hc = model.critic.initial_hidden(n);
    let mut trajs = vec![Trajectory::default(); n];
    let mut total_reward = 0.0;
    let mut steps = 0;
    let mut open = !env.is_finished();
    while open && steps < step_cap {
        let features: Vec<Vec<f64>> = observations.iter().map(Observation::features).collect();
        let critic_in: Vec<Vec<f64>> = (0..n)
            .map(|i| critic_input(&features, &observations, i, model.share_critic))
            .collect();
        let (probs, ha_next) = model.actor_forward(&features, &masks, &ha);
        let (values, hc_next) = model.critic_forward(&critic_in, &hc);
        let mut actions = Vec::with_capacity(n);
        for i in 0..n {
            let a = sample(&probs[i], rng);
            let tr = &mut trajs[i];
            tr.obs.push(features[i].clone());
            tr.critic_obs.push(critic_in[i].clone());
            tr.masks.push(masks[i]);
            tr.actions.push(a);
            tr.log_probs.push(probs[i][a].ln());
            tr.values.push(values[i]);
            tr.actor_hidden.push(ha.row(i).to_vec());
            tr.critic_hidden.push(hc.row(i).to_vec());
            actions.push(Action::from_index(a).expect("four actions"));
        }
        let out = env.step(&actions)?;
        steps += 1;
        total_reward += out.shared_reward;
        for tr in &mut trajs {
            tr.rewards.push(out.shared_reward);
        }
        ha = ha_next;
        hc = hc_next;
        observations = out.observations;
        masks = out.masks;
        open = !out.terminated;
        if !out.terminated && (out.truncated || steps == step_cap) {
            let features: Vec<Vec<f64>> = observations.iter().map(Observation::features).collect();
            let critic_in: Vec<Vec<f64>> = (0..n)
                .map(|i| critic_input(&features, &observations, i, model.share_critic))
                .collect();
            let (values, _) = model.critic_forward(&critic_in, &hc);
            for (tr, v) in trajs.iter_mut().zip(values) {
                tr.bootstrap = v;
            }
            open = false;
        }
    }
    Ok(EpisodeRollout {
        trajectories: trajs,
        total_reward,
        success: env.success(),
        steps,
    })
}

/// A padded `T × B` minibatch for the actor.
#[derive(Debug, Clone)]
pub struct ActorBatch {
    pub steps: usize,
    pub x: Array2<f64>,
    pub h0: Array2<f64>,
    pub masks: Vec<ActionMask>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    /// 1 for real steps where the agent had a choice, else 0.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CriticBatch {
    pub steps: usize,
    pub x: Array2<f64>,
    pub h0: Array2<f64>,
    pub old_values: Vec<f64>,
    pub returns: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ActorLoss {
    pub total: f64,
    pub policy: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Clipped surrogate minus entropy bonus, averaged over weighted samples,
/// with gradients for every actor parameter.
pub fn actor_loss(
    net: &Network,
    batch: &ActorBatch,
    clip: f64,
    entropy_coef: f64,
) -> (ActorLoss, Vec<Array2<f64>>) {
    let (logits, cache) = net.forward_seq(&batch.x, &batch.h0, batch.steps);
    let count: f64 = batch.weights.iter().sum();
    let mut d_logits = Array2::zeros(logits.raw_dim());
    let mut loss = ActorLoss::default();
    if count == 0.0 {
        return (loss, net.zero_grads());
    }
    let mut clipped = 0.0;
    for row in 0..logits.nrows() {
        let w = batch.weights[row];
        if w == 0.0 {
            continue;
        }
        let allowed = &batch.masks[row].allowed;
        let probs = masked_softmax(logits.row(row).as_slice().expect("row-major"), allowed);
        let a = batch.actions[row];
        let logp = probs[a].ln();
        let ratio = (logp - batch.old_log_probs[row]).exp();
        let adv = batch.advantages[row];
        let unclipped = ratio * adv;
        let clipped_ratio = ratio.clamp(1.0 - clip, 1.0 + clip);
        let surrogate = unclipped.min(clipped_ratio * adv);
        if (ratio - 1.0).abs() > clip {
            clipped += w;
        }
        let entropy: f64 = probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        loss.policy -= w * surrogate / count;
        loss.entropy += w * entropy / count;
        // d(-surrogate)/d logp
        let d_logp = if unclipped <= clipped_ratio * adv {
            -adv * ratio
        } else {
            0.0
        };
        for j in 0..Action::COUNT {
            if !allowed[j] {
                continue;
            }
            let indicator = if j == a { 1.0 } else { 0.0 };
            let d_policy = d_logp * (indicator - probs[j]);
            let d_entropy = probs[j] * (probs[j].ln() + entropy);
            d_logits[[row, j]] = w / count * (d_policy + entropy_coef * d_entropy);
        }
    }
    loss.total = loss.policy - entropy_coef * loss.entropy;
    loss.clip_fraction = clipped / count;
    let (grads, _) = net.backward(&cache, &d_logits);
    (loss, grads)
}

/// Clipped value loss `value_coef · ½ · max((v−R)², (v_clip−R)²)`.
pub fn critic_loss(
    net: &Network,
    batch: &CriticBatch,
    clip: f64,
    value_coef: f64,
) -> (f64, Vec<Array2<f64>>) {
    let (values, cache) = net.forward_seq(&batch.x, &batch.h0, batch.steps);
    let count: f64 = batch.weights.iter().sum();
    let mut d_values = Array2::zeros(values.raw_dim());
    if count == 0.0 {
        return (0.0, net.zero_grads());
    }
    let mut loss = 0.0;
    for row in 0..values.nrows() {
        let w = batch.weights[row];
        if w == 0.0 {
            continue;
        }
        let v = values[[row, 0]];
        let (old, ret) = (batch.old_values[row], batch.returns[row]);
        let delta = v - old;
        let v_clip = old + delta.clamp(-clip, clip);
        let (e1, e2) = (v - ret, v_clip - ret);
        let scale = value_coef * w / count;
        if e1 * e1 >= e2 * e2 {
            loss += scale * 0.5 * e1 * e1;
            d_values[[row, 0]] = scale * e1;
        } else {
            loss += scale * 0.5 * e2 * e2;
            if delta.abs() < clip {
                d_values[[row, 0]] = scale * e2;
            }
        }
    }
    let (grads, _) = net.backward(&cache, &d_values);
    (loss, grads)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
}

/// `(episode, agent, start, len)`
type Chunk = (usize, usize, usize, usize);

fn build_batches(
    buffer: &RolloutBuffer,
    chunks: &[Chunk],
    chunk_len: usize,
    adv_mean: f64,
    adv_std: f64,
) -> (ActorBatch, CriticBatch) {
    let b = chunks.len();
    let first = &buffer.episodes[chunks[0].0].trajectories[chunks[0].1];
    let (od, cd, hd) = (first.obs[0].len(), first.critic_obs[0].len(), first.actor_hidden[0].len());
    let chd = first.critic_hidden[0].len();
    let rows = chunk_len * b;
    let mut ax = Array2::zeros((rows, od));
    let mut cx = Array2::zeros((rows, cd));
    let mut ah = Array2::zeros((b, hd));
    let mut ch = Array2::zeros((b, chd));
    let mut masks = vec![ActionMask::ALL; rows];
    let mut actions = vec![0; rows];
    let mut old_lp = vec![0.0; rows];
    let mut adv = vec![0.0; rows];
    let mut aw = vec![0.0; rows];
    let mut old_v = vec![0.0; rows];
    let mut ret = vec![0.0; rows];
    let mut cw = vec![0.0; rows];
    for (k, &(e, agent, start, len)) in chunks.iter().enumerate() {
        let tr = &buffer.episodes[e].trajectories[agent];
        ah.row_mut(k).assign(&ndarray::ArrayView1::from(tr.actor_hidden[start].as_slice()));
        ch.row_mut(k).assign(&ndarray::ArrayView1::from(tr.critic_hidden[start].as_slice()));
        for t in 0..len {
            let (row, i) = (t * b + k, start + t);
            ax.row_mut(row).assign(&ndarray::ArrayView1::from(tr.obs[i].as_slice()));
            cx.row_mut(row).assign(&ndarray::ArrayView1::from(tr.critic_obs[i].as_slice()));
            masks[row] = tr.masks[i];
            actions[row] = tr.actions[i];
            old_lp[row] = tr.log_probs[i];
            adv[row] = (tr.advantages[i] - adv_mean) / adv_std;
            aw[row] = if tr.masks[i].count() > 1 { 1.0 } else { 0.0 };
            old_v[row] = tr.values[i];
            ret[row] = tr.returns[i];
            cw[row] = 1.0;
        }
    }
    (
        ActorBatch {
            steps: chunk_len,
            x: ax,
            h0: ah,
            masks,
            actions,
            old_log_probs: old_lp,
            advantages: adv,
            weights: aw,
        },
        CriticBatch {
            steps: chunk_len,
            x: cx,
            h0: ch,
            old_values: old_v,
            returns: ret,
            weights: cw,
        },
    )
}

/// Optimiser state for both networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimisers {
    pub actor: RmsProp,
    pub critic: RmsProp,
}

impl Optimisers {
    pub fn new(model: &ActorCritic, cfg: &TrainConfig) -> Self {
        Self {
            actor: RmsProp::new(&model.actor, cfg.lr, cfg.rms_alpha, cfg.rms_eps),
            critic: RmsProp::new(&model.critic, cfg.lr, cfg.rms_alpha, cfg.rms_eps),
        }
    }
}

/// PPO epochs over recurrent chunks. Advantages must already be computed.
pub fn ppo_update(
    model: &mut ActorCritic,
    opt: &mut Optimisers,
    buffer: &RolloutBuffer,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<UpdateStats, String> {
    let mut chunks: Vec<Chunk> = Vec::new();
    let mut adv_all = Vec::new();
    for (e, ep) in buffer.episodes.iter().enumerate() {
        for (a, tr) in ep.trajectories.iter().enumerate() {
            assert_eq!(tr.advantages.len(), tr.len(), "advantages not computed");
            let mut start = 0;
            while start < tr.len() {
                let len = cfg.chunk_len.min(tr.len() - start);
                chunks.push((e, a, start, len));
                start += len;
            }
            adv_all.extend(
                (0..tr.len())
                    .filter(|&i| tr.masks[i].count() > 1)
                    .map(|i| tr.advantages[i]),
            );
        }
    }
    let mut stats = UpdateStats::default();
    if chunks.is_empty() {
        return Ok(stats);
    }
    let (mean, std) = if adv_all.len() > 1 {
        let m = adv_all.iter().sum::<f64>() / adv_all.len() as f64;
        let var = adv_all.iter().map(|a| (a - m).powi(2)).sum::<f64>() / adv_all.len() as f64;
        (m, var.sqrt() + 1e-8)
    } else {
        (0.0, 1.0)
    };
    let mut batches = 0.0;
    for _ in 0..cfg.epochs {
        for i in (1..chunks.len()).rev() {
            let j = rng.random_range(0..=i);
            chunks.swap(i, j);
        }
        let per = chunks.len().div_ceil(cfg.minibatches);
        for mb in chunks.chunks(per) {
            let (ab, cb) = build_batches(buffer, mb, cfg.chunk_len, mean, std);
            let (al, mut ag) = actor_loss(&model.actor, &ab, cfg.clip, cfg.entropy_coef);
            let (vl, mut cg) = critic_loss(&model.critic, &cb, cfg.clip, cfg.value_coef);
            if !al.total.is_finite() || !vl.is_finite() {
                return Err(format!(
                    "actor loss {} / critic loss {} on a minibatch of {} chunks",
                    al.total,
                    vl,
                    mb.len()
                ));
            }
            stats.actor_grad_norm += clip_grad_norm(&mut ag, cfg.max_grad_norm);
            stats.critic_grad_norm += clip_grad_norm(&mut cg, cfg.max_grad_norm);
            opt.actor.step(&mut model.actor, &ag);
            opt.critic.step(&mut model.critic, &cg);
            stats.policy_loss += al.policy;
            stats.value_loss += vl;
            stats.entropy += al.entropy;
            stats.clip_fraction += al.clip_fraction;
            batches += 1.0;
        }
    }
    stats.policy_loss /= batches;
    stats.value_loss /= batches;
    stats.entropy /= batches;
    stats.clip_fraction /= batches;
    stats.actor_grad_norm /= batches;
    stats.critic_grad_norm /= batches;
    Ok(stats)
}

/// Runs the actor alone (decentralised execution). Greedy picks the most
/// probable allowed action; otherwise actions are sampled.
#[derive(Debug, Clone)]
pub struct LearnedController {
    pub model: ActorCritic,
    pub greedy: bool,
    hidden: Array2<f64>,
}

impl LearnedController {
    pub fn new(model: ActorCritic, greedy: bool) -> Self {
        let hidden = model.actor.initial_hidden(model.agents);
        Self {
            model,
            greedy,
            hidden,
        }
    }
}

impl Controller for LearnedController {
    fn name(&self) -> &str {
        "learned"
    }

    fn reset(&mut self, agents: usize) {
        self.hidden = self.model.actor.initial_hidden(agents);
    }

    fn act(
        &mut self,
        _env: &Environment,
        observations: &[Observation],
        masks: &[ActionMask],
        rng: &mut ChaCha8Rng,
    ) -> Vec<Action> {
        let features: Vec<Vec<f64>> = observations.iter().map(Observation::features).collect();
        let (probs, h) = self.model.actor_forward(&features, masks, &self.hidden);
        self.hidden = h;
        probs
            .iter()
            .map(|p| {
                let i = if self.greedy { argmax(p) } else { sample(p, rng) };
                Action::from_index(i).expect("four actions")
            })
            .collect()
    }
}

/// Everything needed to resume evaluation of a trained policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub train: TrainConfig,
    pub env: EnvConfig,
    pub model: ActorCritic,
    pub updates: usize,
    pub env_steps: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let cp: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(TrainError::Version(cp.version));
        }
        Ok(cp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub update_index: usize,
    pub env_steps: usize,
    pub mean_episode_reward: f64,
    pub success_rate: f64,
}

pub fn write_curve(points: &[CurvePoint], path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Mean of the last `window` curve rewards.
pub fn final_reward(points: &[CurvePoint], window: usize) -> f64 {
    let tail = &points[points.len().saturating_sub(window)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().map(|p| p.mean_episode_reward).sum::<f64>() / tail.len() as f64
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best checkpoint by greedy evaluation on the training suite.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub curve: Vec<CurvePoint>,
}

fn evaluate(model: &ActorCritic, envs: &mut [Environment], seed: u64) -> Result<(f64, f64), EnvError> {
    let mut controller = LearnedController::new(model.clone(), true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut successes, mut reward) = (0.0, 0.0);
    for env in envs.iter_mut() {
        let result = run_episode(env, &mut controller, &mut rng)?;
        successes += f64::from(u8::from(result.metrics.success));
        reward += result.total_reward;
    }
    let n = envs.len() as f64;
    Ok((successes / n, reward / n))
}

/// The rollout/update loop. `progress` sees every curve point as it is made.
pub fn train(
    suite: &[Scenario],
    env_config: &EnvConfig,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&CurvePoint, &UpdateStats),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let first = suite.first().ok_or(TrainError::EmptySuite)?;
    let agents = first.agents.len();
    if let Some(s) = suite.iter().find(|s| s.agents.len() != agents) {
        return Err(TrainError::AgentCount(agents, s.agents.len()));
    }
    let mut envs: Vec<Environment> = suite
        .iter()
        .map(|s| Environment::new(s.clone(), env_config.clone()))
        .collect::<Result<_, _>>()?;
    let obs_dim = envs[0].observation_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ActorCritic::new(agents, obs_dim, cfg, &mut rng);
    let mut opt = Optimisers::new(&model, cfg);
    let checkpoint = |model: &ActorCritic, updates: usize, env_steps: usize| Checkpoint {
        version: CHECKPOINT_VERSION,
        train: cfg.clone(),
        env: env_config.clone(),
        model: model.clone(),
        updates,
        env_steps,
    };
    let mut curve = Vec::new();
    let mut steps = 0;
    let mut update = 0;
    let mut best = checkpoint(&model, 0, 0);
    let mut best_score = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    while steps < cfg.total_steps {
        let mut buffer = RolloutBuffer::default();
        for _ in 0..cfg.episodes_per_update {
            if steps >= cfg.total_steps {
                break;
            }
            let idx = rng.random_range(0..envs.len());
            let cap = cfg.total_steps - steps;
            let mut episode_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let mut ep = collect_episode(&mut envs[idx], &model, &mut episode_rng, cap)?;
            for tr in &mut ep.trajectories {
                compute_advantages(tr, cfg.gamma, cfg.gae_lambda);
            }
            steps += ep.steps;
            buffer.episodes.push(ep);
        }
        if buffer.episodes.is_empty() {
            break;
        }
        let last_good = checkpoint(&model, update, steps);
        let stats = ppo_update(&mut model, &mut opt, &buffer, cfg, &mut rng).map_err(|what| {
            TrainError::Diverged {
                update,
                what,
                last_good: Box::new(last_good.clone()),
            }
        })?;
        if model
            .actor
            .params
            .iter()
            .chain(&model.critic.params)
            .any(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(TrainError::Diverged {
                update,
                what: "non-finite parameters".into(),
                last_good: Box::new(last_good),
            });
        }
        let episodes = buffer.episodes.len() as f64;
        let point = CurvePoint {
            update_index: update,
            env_steps: steps,
            mean_episode_reward: buffer.episodes.iter().map(|e| e.total_reward).sum::<f64>() / episodes,
            success_rate: buffer.episodes.iter().filter(|e| e.success).count() as f64 / episodes,
        };
        progress(&point, &stats);
        curve.push(point);
        update += 1;
        if update % cfg.eval_interval == 0 || steps >= cfg.total_steps {
            let score = evaluate(&model, &mut envs, cfg.seed)?;
            if score > best_score {
                best_score = score;
                best = checkpoint(&model, update, steps);
            }
        }
    }
    Ok(TrainOutcome {
        best,
        last: checkpoint(&model, update, steps),
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(rewards: &[f64], values: &[f64], bootstrap: f64) -> Trajectory {
        Trajectory {
            rewards: rewards.to_vec(),
            values: values.to_vec(),
            bootstrap,
            ..Trajectory::default()
        }
    }

    #[test]
    fn single_terminal_step_advantage() {
        let mut t = traj(&[5.0], &[2.0], 0.0);
        compute_advantages(&mut t, 0.99, 0.95);
        assert_eq!(t.advantages, vec![3.0]);
        assert_eq!(t.returns, vec![5.0]);
    }

    #[test]
    fn three_step_recursion() {
        let mut t = traj(&[1.0, -1.0, 2.0], &[0.5, 0.2, -0.3], 0.0);
        compute_advantages(&mut t, 0.99, 0.95);
        let d2: f64 = 2.0 - (-0.3);
        let d1: f64 = -1.0 + 0.99 * -0.3 - 0.2;
        let d0: f64 = 1.0 + 0.99 * 0.2 - 0.5;
        let a2 = d2;
        let a1 = d1 + 0.99 * 0.95 * a2;
        let a0 = d0 + 0.99 * 0.95 * a1;
        assert_eq!(t.advantages, vec![a0, a1, a2]);
    }

    #[test]
    fn lambda_one_gives_monte_carlo() {
        let mut t = traj(&[1.0, 2.0, 3.0], &[0.1, 0.2, 0.3], 0.0);
        compute_advantages(&mut t, 0.9, 1.0);
        let g0 = 1.0 + 0.9 * 2.0 + 0.81 * 3.0;
        assert!((t.advantages[0] - (g0 - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn critic_dimensions() {
        assert_eq!(critic_dim(2, 71, true), 145);
        assert_eq!(critic_dim(3, 71, true), 3 * 71 + 3 + 2);
        assert_eq!(critic_dim(2, 71, false), 71);
    }

    #[test]
    fn sampling_respects_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample(&[0.0, 0.0, 1.0, 0.0], &mut rng), 2);
        }
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }
}
