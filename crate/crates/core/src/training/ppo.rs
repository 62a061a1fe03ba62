//! On-policy rollouts over parallel simulated episodes and the clipped
//! PPO update with GAE.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::demos::episode_seed;
use super::losses::{ppo_actor_loss_grad, value_loss_grad, PpoBatch, SeqChunk};
use super::{clip_grad_norm, compute_gae, Adam};
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, ChainModel};
use crate::policy::{
    actor_forward, critic_forward, gaussian_log_prob, low_level_gains, privileged_observation,
    sample_action, ObservationBuilder, PolicyParams, RecurrentState,
};
use crate::rewards::{
    reward_energy, reward_smoothness, reward_tracking, total_reward, DerivativeBuffer, RewardTerms,
    RewardWeights,
};
use crate::sim::{rng_from_seed, SimRng, CONTROL_DT};
use crate::tasks::{CurriculumForce, Episode, EpisodeConfig, TaskKind, TaskSpec, WrenchMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub steps_per_update: usize,
    pub num_envs: usize,
    pub epochs_per_update: usize,
    pub minibatches: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Truncated-BPTT sequence length.
    pub chunk_len: usize,
    /// Multiplies every reward before advantage estimation.
    pub reward_scale: f64,
    pub normalize_advantages: bool,
    /// Critic regresses standardized returns under running statistics.
    pub normalize_values: bool,
    pub total_updates: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            steps_per_update: 4096,
            num_envs: 16,
            epochs_per_update: 4,
            minibatches: 4,
            entropy_coef: 1e-3,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            chunk_len: 32,
            reward_scale: 1.0,
            normalize_advantages: true,
            normalize_values: true,
            total_updates: 100,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.gamma) || !unit(self.gae_lambda) {
            return Err(Error::invalid("ppo config", "gamma and gae_lambda must lie in [0, 1]"));
        }
        if !(self.clip_eps > 0.0) {
            return Err(Error::invalid("ppo config", "clip_eps must be positive"));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::invalid("ppo config", "learning rates must be positive"));
        }
        if self.steps_per_update == 0
            || self.num_envs == 0
            || self.epochs_per_update == 0
            || self.minibatches == 0
            || self.chunk_len == 0
        {
            return Err(Error::invalid("ppo config", "sizes must be positive"));
        }
        if self.steps_per_update < self.num_envs {
            return Err(Error::invalid("ppo config", "steps_per_update must be >= num_envs"));
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0 && self.max_grad_norm >= 0.0) {
            return Err(Error::invalid("ppo config", "coefficients must be >= 0"));
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return Err(Error::invalid("ppo config", "reward_scale must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_env(&self) -> usize {
        self.steps_per_update.div_ceil(self.num_envs)
    }
}

/// What the training environments simulate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingEnvConfig {
    pub chain: ChainModel,
    pub episode: EpisodeConfig,
    /// Each new episode draws its task uniformly from this list.
    pub tasks: Vec<TaskKind>,
    pub weights: RewardWeights,
    pub wrench_mode: WrenchMode,
    /// Peak curriculum force per component (N).
    pub f_max: f64,
}

/// Step records of one environment, in time order.
#[derive(Debug, Clone, Default)]
pub struct EnvStream {
    pub obs: Vec<f64>,
    pub privileged: Vec<f64>,
    /// Pre-squash action samples.
    pub samples: Vec<f64>,
    /// Pre-squash Gaussian log densities of `samples`.
    pub log_probs: Vec<f64>,
    /// Scaled total rewards.
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// The episode ended after this step.
    pub dones: Vec<bool>,
    /// The recurrent state was reset before this step.
    pub starts: Vec<bool>,
    /// Recurrent state entering every `chunk_len`-th step.
    pub snapshots: Vec<RecurrentState>,
    /// Critic value of the state after the last step.
    pub bootstrap: f64,
}

impl EnvStream {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Aggregates over one rollout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub steps: usize,
    /// Mean unscaled weighted reward per step.
    pub mean_reward: f64,
    /// Mean raw reward terms per step.
    pub terms: RewardTerms,
    /// Mean end-effector position error over engaged steps (m).
    pub e_track: f64,
    /// Mean joint-acceleration norm (rad/s^2).
    pub smoothness: f64,
    pub episodes_finished: usize,
    /// Mean undiscounted return of finished episodes; NaN if none.
    pub mean_episode_return: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub streams: Vec<EnvStream>,
    pub chunk_len: usize,
    pub stats: RolloutStats,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.streams.iter().map(EnvStream::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct PendingObs {
    obs: Vec<f64>,
    privileged: Vec<f64>,
}

struct EnvSlot {
    seed_base: u64,
    episodes_started: u64,
    task_rng: SimRng,
    policy_rng: SimRng,
    episode: Episode,
    builder: ObservationBuilder,
    state: RecurrentState,
    deriv: DerivativeBuffer,
    pending: Option<PendingObs>,
    fresh: bool,
    episode_return: f64,
}

/// `num_envs` independent simulated episodes that persist across rollouts.
pub struct TrainEnvs {
    config: TrainingEnvConfig,
    slots: Vec<EnvSlot>,
    alpha: f64,
}

impl TrainEnvs {
    pub fn new(config: TrainingEnvConfig, params: &PolicyParams, num_envs: usize, seed: u64) -> Result<Self> {
        if config.tasks.is_empty() {
            return Err(Error::Empty("training task list"));
        }
        config.weights.validate()?;
        let mut slots = Vec::with_capacity(num_envs);
        for i in 0..num_envs {
            let seed_base = episode_seed(seed, 1 << 32 | i as u64);
            let mut task_rng = rng_from_seed(episode_seed(seed_base, u64::MAX));
            let policy_rng = rng_from_seed(episode_seed(seed_base, u64::MAX - 1));
            let kind = config.tasks[task_rng.random_range(0..config.tasks.len())];
            let episode = Episode::new(&config.chain, &TaskSpec::new(kind), &config.episode, episode_seed(seed_base, 0))?;
            slots.push(EnvSlot {
                seed_base,
                episodes_started: 1,
                task_rng,
                policy_rng,
                episode,
                builder: ObservationBuilder::new(&params.arch),
                state: RecurrentState::zeros(&params.arch),
                deriv: DerivativeBuffer::new(CONTROL_DT),
                pending: None,
                fresh: true,
                episode_return: 0.0,
            });
        }
        Ok(TrainEnvs {
            config,
            slots,
            alpha: 0.0,
        })
    }

    pub fn config(&self) -> &TrainingEnvConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn curriculum(&self) -> Option<CurriculumForce> {
        (self.alpha > 0.0).then_some(CurriculumForce {
            alpha: self.alpha,
            f_max: self.config.f_max,
            mode: self.config.wrench_mode,
        })
    }

    /// Curriculum coefficient for episodes started from now on.
    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha.clamp(0.0, 1.0);
    }
}

impl EnvSlot {
    fn observe(&mut self) -> Result<&PendingObs> {
        if self.pending.is_none() {
            let input = self.episode.begin_tick();
            let obs = self.builder.observe(&input.observed, &input.command)?;
            let privileged = privileged_observation(
                &obs,
                &self.episode.wrench(),
                self.episode.params(),
                self.episode.nominal(),
            );
            self.pending = Some(PendingObs { obs, privileged });
        }
        Ok(self.pending.as_ref().expect("just filled"))
    }

    fn restart(&mut self, config: &TrainingEnvConfig, curriculum: Option<CurriculumForce>, params: &PolicyParams) -> Result<()> {
        let kind = config.tasks[self.task_rng.random_range(0..config.tasks.len())];
        let mut episode_config = config.episode.clone();
        episode_config.curriculum = curriculum;
        let seed = episode_seed(self.seed_base, self.episodes_started);
        self.episodes_started += 1;
        self.episode = Episode::new(&config.chain, &TaskSpec::new(kind), &episode_config, seed)?;
        self.builder.reset();
        self.state = RecurrentState::zeros(&params.arch);
        self.deriv.clear();
        self.pending = None;
        self.fresh = true;
        self.episode_return = 0.0;
        Ok(())
    }
}

#[derive(Default)]
struct StatAccumulator {
    steps: usize,
    reward: f64,
    terms: RewardTerms,
    track_sum: f64,
    track_n: usize,
    acc_sum: f64,
    acc_n: usize,
    returns: Vec<f64>,
}

/// Runs every environment for `config.steps_per_env()` control ticks with
/// stochastic actions from `params`. Streams are merged in env order.
pub fn collect_rollouts(envs: &mut TrainEnvs, params: &PolicyParams, config: &PpoConfig) -> Result<RolloutBuffer> {
    config.validate()?;
    let steps = config.steps_per_env();
    let low = low_level_gains(params.arch.n_joints);
    let weights = envs.config.weights;
    let curriculum = envs.curriculum();
    let env_config = envs.config.clone();
    let mut acc = StatAccumulator::default();
    let mut streams = Vec::with_capacity(envs.slots.len());
    for slot in envs.slots.iter_mut() {
        let mut s = EnvStream::default();
        for t in 0..steps {
            if slot.episode.is_done() {
                slot.restart(&env_config, curriculum, params)?;
            }
            if t % config.chunk_len == 0 {
                s.snapshots.push(slot.state.clone());
            }
            let pending = slot.observe()?;
            let (obs, privileged) = (pending.obs.clone(), pending.privileged.clone());
            let value = critic_forward(params, &privileged)?;
            let (out, next_state) = actor_forward(params, &obs, &slot.state)?;
            let sampled = sample_action(&params.arch, &out.pre_squash, params.log_std(), &mut slot.policy_rng)?;
            let logp = gaussian_log_prob(&sampled.pre_squash, &out.pre_squash, params.log_std());
            let observed = slot.episode.begin_tick().observed;
            let torque = sampled.action.torque(&observed, &low);
            let record = slot.episode.apply(&torque)?.clone();
            slot.pending = None;
            slot.builder.record_action(&sampled.action);
            slot.state = next_state;

            let q_next = &slot.episode.true_state().q;
            slot.deriv.push(q_next);
            let ee_next = forward_kinematics(&env_config.chain, q_next)?;
            let terms = RewardTerms {
                track: reward_tracking(&ee_next, &record.command.pose, weights.lambda_rot),
                smooth: reward_smoothness(&slot.deriv, weights.lambda_jerk),
                energy: reward_energy(&record.torque),
            };
            let reward = total_reward(&terms, &weights);
            let done = slot.episode.is_done();

            acc.steps += 1;
            acc.reward += reward;
            acc.terms.add(&terms);
            if record.command.grip {
                acc.track_sum += ee_next.distance(&record.command.pose);
                acc.track_n += 1;
            }
            if slot.deriv.is_full() {
                acc.acc_sum += slot.deriv.acceleration().iter().map(|a| a * a).sum::<f64>().sqrt();
                acc.acc_n += 1;
            }
            slot.episode_return += reward;
            if done {
                acc.returns.push(slot.episode_return);
            }

            s.obs.extend_from_slice(&obs);
            s.privileged.extend_from_slice(&privileged);
            s.samples.extend_from_slice(&sampled.pre_squash);
            s.log_probs.push(logp);
            s.rewards.push(reward * config.reward_scale);
            s.values.push(value);
            s.dones.push(done);
            s.starts.push(std::mem::take(&mut slot.fresh));
        }
        s.bootstrap = if slot.episode.is_done() {
            0.0
        } else {
            let pending = slot.observe()?;
            critic_forward(params, &pending.privileged)?
        };
        streams.push(s);
    }
    let n = acc.steps.max(1) as f64;
    let stats = RolloutStats {
        steps: acc.steps,
        mean_reward: acc.reward / n,
        terms: RewardTerms {
            track: acc.terms.track / n,
            smooth: acc.terms.smooth / n,
            energy: acc.terms.energy / n,
        },
        e_track: acc.track_sum / acc.track_n.max(1) as f64,
        smoothness: acc.acc_sum / acc.acc_n.max(1) as f64,
        episodes_finished: acc.returns.len(),
        mean_episode_return: if acc.returns.is_empty() {
            f64::NAN
        } else {
            acc.returns.iter().sum::<f64>() / acc.returns.len() as f64
        },
        alpha: envs.alpha,
    };
    Ok(RolloutBuffer {
        streams,
        chunk_len: config.chunk_len,
        stats,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub minibatch_steps: usize,
}

/// Running mean and variance of value targets, merged batch by batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueNormalizer {
    pub mean: f64,
    pub var: f64,
    pub count: f64,
}

impl Default for ValueNormalizer {
    fn default() -> Self {
        ValueNormalizer {
            mean: 0.0,
            var: 1.0,
            count: 1e-4,
        }
    }
}

impl ValueNormalizer {
    pub fn std(&self) -> f64 {
        self.var.sqrt().max(1e-6)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std() + self.mean
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std()
    }

    pub fn update(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let total = self.count + n;
        let delta = mean - self.mean;
        let m2 = self.var * self.count + var * n + delta * delta * self.count * n / total;
        self.mean += delta * n / total;
        self.var = m2 / total;
        self.count = total;
    }
}

/// PPO optimizer state carried across updates.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    pub config: PpoConfig,
    actor_opt: Adam,
    critic_opt: Adam,
    rng: SimRng,
    values: ValueNormalizer,
}

struct TrainChunk {
    batch: PpoBatch,
    privileged: Vec<f64>,
    returns: Vec<f64>,
}

fn build_chunks(
    params: &PolicyParams,
    buffer: &RolloutBuffer,
    config: &PpoConfig,
    norm: &mut ValueNormalizer,
) -> Result<Vec<TrainChunk>> {
    let od = params.arch.obs_dim();
    let pd = params.arch.critic_input_dim();
    let ad = params.arch.action_dim();
    let mut per_stream = Vec::with_capacity(buffer.streams.len());
    for s in &buffer.streams {
        let (values, bootstrap) = if config.normalize_values {
            let v: Vec<f64> = s.values.iter().map(|v| norm.denormalize(*v)).collect();
            (v, norm.denormalize(s.bootstrap))
        } else {
            (s.values.clone(), s.bootstrap)
        };
        per_stream.push(compute_gae(&s.rewards, &values, &s.dones, bootstrap, config.gamma, config.gae_lambda)?);
    }
    if config.normalize_values {
        let all: Vec<f64> = per_stream.iter().flat_map(|(_, r)| r.iter().copied()).collect();
        norm.update(&all);
        for (_, ret) in per_stream.iter_mut() {
            ret.iter_mut().for_each(|r| *r = norm.normalize(*r));
        }
    }
    if config.normalize_advantages {
        let all: Vec<f64> = per_stream.iter().flat_map(|(a, _)| a.iter().copied()).collect();
        let mean = all.iter().sum::<f64>() / all.len().max(1) as f64;
        let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / all.len().max(1) as f64;
        let std = var.sqrt().max(1e-8);
        for (adv, _) in per_stream.iter_mut() {
            adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
        }
    }
    let cl = buffer.chunk_len;
    let mut chunks = Vec::new();
    for (s, (adv, ret)) in buffer.streams.iter().zip(per_stream) {
        for (k, t0) in (0..s.len()).step_by(cl).enumerate() {
            let t1 = (t0 + cl).min(s.len());
            chunks.push(TrainChunk {
                batch: PpoBatch {
                    chunk: SeqChunk {
                        obs: s.obs[t0 * od..t1 * od].to_vec(),
                        starts: s.starts[t0..t1].to_vec(),
                        h0: s.snapshots[k].clone(),
                    },
                    samples: s.samples[t0 * ad..t1 * ad].to_vec(),
                    old_log_prob: s.log_probs[t0..t1].to_vec(),
                    advantages: adv[t0..t1].to_vec(),
                },
                privileged: s.privileged[t0 * pd..t1 * pd].to_vec(),
                returns: ret[t0..t1].to_vec(),
            });
        }
    }
    Ok(chunks)
}

impl PpoLearner {
    pub fn value_normalizer(&self) -> &ValueNormalizer {
        &self.values
    }

    pub fn new(params: &PolicyParams, config: PpoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(PpoLearner {
            actor_opt: Adam::new(params.layout.actor_range().len(), config.actor_lr),
            critic_opt: Adam::new(params.layout.critic_range().len(), config.critic_lr),
            rng: rng_from_seed(episode_seed(seed, u64::MAX - 2)),
            values: ValueNormalizer::default(),
            config,
        })
    }

    /// `epochs_per_update` passes of minibatch clipped-surrogate ascent and
    /// value regression. On a non-finite gradient the parameters are left
    /// as they were before the call and an error is returned.
    pub fn update(&mut self, params: &mut PolicyParams, buffer: &RolloutBuffer) -> Result<PpoDiagnostics> {
        if buffer.is_empty() {
            return Err(Error::Empty("rollout buffer"));
        }
        let cfg = self.config.clone();
        let norm_backup = self.values;
        let mut chunks = build_chunks(params, buffer, &cfg, &mut self.values)?;
        let backup = params.data.clone();
        let (actor_opt_backup, critic_opt_backup) = (self.actor_opt.clone(), self.critic_opt.clone());
        let actor = params.layout.actor_range();
        let critic = params.layout.critic_range();
        let mut grad = vec![0.0; params.len()];
        let mut diag = PpoDiagnostics::default();
        let mut batches = 0usize;
        let per_mb = chunks.len().div_ceil(cfg.minibatches).max(1);
        for _ in 0..cfg.epochs_per_update {
            chunks.shuffle(&mut self.rng);
            for group in chunks.chunks(per_mb) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let ppo: Vec<PpoBatch> = group.iter().map(|c| c.batch.clone()).collect();
                let stats = ppo_actor_loss_grad(params, &ppo, cfg.clip_eps, cfg.entropy_coef, Some(&mut grad));
                let privileged: Vec<f64> = group.iter().flat_map(|c| c.privileged.iter().copied()).collect();
                let returns: Vec<f64> = group.iter().flat_map(|c| c.returns.iter().copied()).collect();
                let mut vgrad = vec![0.0; params.len()];
                let vloss = value_loss_grad(params, &privileged, &returns, Some(&mut vgrad));
                for i in critic.clone() {
                    grad[i] = cfg.value_coef * vgrad[i];
                }
                if !stats.loss.is_finite() || !vloss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    params.data = backup;
                    self.actor_opt = actor_opt_backup;
                    self.critic_opt = critic_opt_backup;
                    self.values = norm_backup;
                    return Err(Error::NonFinite("ppo gradient"));
                }
                let an = clip_grad_norm(&mut grad[actor.clone()], cfg.max_grad_norm);
                let cn = clip_grad_norm(&mut grad[critic.clone()], cfg.max_grad_norm);
                self.actor_opt.step(&mut params.data[actor.clone()], &grad[actor.clone()]);
                self.critic_opt.step(&mut params.data[critic.clone()], &grad[critic.clone()]);
                diag.policy_loss += stats.policy_loss;
                diag.value_loss += vloss;
                diag.entropy += stats.entropy;
                diag.clip_fraction += stats.clip_fraction;
                diag.approx_kl += stats.approx_kl;
                diag.actor_grad_norm += an;
                diag.critic_grad_norm += cn;
                diag.minibatch_steps += stats.samples;
                batches += 1;
            }
        }
        let b = batches.max(1) as f64;
        diag.policy_loss /= b;
        diag.value_loss /= b;
        diag.entropy /= b;
        diag.clip_fraction /= b;
        diag.approx_kl /= b;
        diag.actor_grad_norm /= b;
        diag.critic_grad_norm /= b;
        diag.minibatch_steps /= batches.max(1);
        Ok(diag)
    }
}

/// One update with fresh optimizer state.
pub fn ppo_update(
    params: &PolicyParams,
    buffer: &RolloutBuffer,
    config: &PpoConfig,
    seed: u64,
) -> Result<(PolicyParams, PpoDiagnostics)> {
    let mut learner = PpoLearner::new(params, config.clone(), seed)?;
    let mut out = params.clone();
    let diag = learner.update(&mut out, buffer)?;
    Ok((out, diag))
}
