//! Expert demonstrations from the IK+PD baseline and behavior cloning.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::losses::{bc_loss_grad, BcBatch, SeqChunk};
use super::Adam;
use crate::baseline::{solve_ik, IkConfig, IkPdController, PdGains};
use crate::error::{check_dim, Error, Result};
use crate::kinematics::ChainModel;
use crate::sim::CONTROL_DT;
use crate::policy::{actor_forward_seq, ActionVector, ObservationBuilder, PolicyArch, PolicyParams, RecurrentState};
use crate::tasks::{stream_rng, Episode, EpisodeConfig, Stream, TaskKind, TaskSpec, Trajectory};

/// One recorded demonstration episode. Every tick is stored so recurrent
/// state can be rebuilt; only engaged ticks are training pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoEpisode {
    pub task: TaskKind,
    pub seed: u64,
    /// `ticks x obs_dim`.
    pub obs: Vec<f64>,
    /// Expert actions in physical units, `ticks x 2n`, clamped to the bounds.
    pub actions: Vec<f64>,
    pub engaged: Vec<bool>,
    pub trajectory: Trajectory,
}

impl DemoEpisode {
    pub fn ticks(&self) -> usize {
        self.engaged.len()
    }

    pub fn pairs(&self) -> usize {
        self.engaged.iter().filter(|e| **e).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoMeta {
    pub tasks: Vec<TaskKind>,
    pub seeds: Vec<u64>,
    /// Number of (observation, expert action) pairs.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoDataset {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub episodes: Vec<DemoEpisode>,
    pub meta: DemoMeta,
}

impl DemoDataset {
    pub fn from_episodes(obs_dim: usize, action_dim: usize, episodes: Vec<DemoEpisode>) -> Result<Self> {
        for ep in &episodes {
            check_dim("demo observations", ep.ticks() * obs_dim, ep.obs.len())?;
            check_dim("demo actions", ep.ticks() * action_dim, ep.actions.len())?;
        }
        let meta = DemoMeta {
            tasks: episodes.iter().map(|e| e.task).collect(),
            seeds: episodes.iter().map(|e| e.seed).collect(),
            count: episodes.iter().map(DemoEpisode::pairs).sum(),
        };
        Ok(DemoDataset {
            obs_dim,
            action_dim,
            episodes,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.count
    }

    pub fn is_empty(&self) -> bool {
        self.meta.count == 0
    }
}

/// Seed of the `index`-th episode drawn from a run seed.
/// Derives the `index`-th child seed of `seed`. Every named sub-seed in the
/// crate (demo episodes, stage RNGs, rollout streams) goes through this.
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer keeps neighbouring indices uncorrelated
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub episodes: usize,
    pub tasks: Vec<TaskKind>,
    /// Stationary std (rad) of Ornstein-Uhlenbeck noise added to the
    /// executed joint target. Labels stay the clean IK action; the
    /// observation's previous-action field carries the executed one.
    pub action_noise: f64,
    /// Correlation time (s) of that noise; slow noise leaves the arm
    /// settled away from the IK target, which is where the expert's
    /// corrective labels are most informative.
    pub noise_correlation_time: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        // holding still is a reach to the home pose; its episodes add
        // little that reach and sinusoid episodes do not cover
        DemoConfig {
            episodes: 50,
            tasks: vec![TaskKind::Reach, TaskKind::SinusoidTrack],
            action_noise: 0.1,
            noise_correlation_time: 0.3,
        }
    }
}

impl DemoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Empty("demo task list"));
        }
        if !(self.action_noise >= 0.0 && self.action_noise.is_finite()) {
            return Err(Error::invalid("demo config", "action_noise must be >= 0"));
        }
        if !(self.noise_correlation_time >= 0.0 && self.noise_correlation_time.is_finite()) {
            return Err(Error::invalid("demo config", "noise_correlation_time must be >= 0"));
        }
        Ok(())
    }
}

/// Runs scripted episodes under the IK+PD baseline, cycling through the
/// configured tasks, with no external force. Expert actions are the IK
/// joint target relative to the measured joints and zero feedforward.
/// The labelled target is solved from the measured joints, so it is a
/// function of what the policy observes; the executing controller keeps
/// its own warm-started solution.
pub fn collect_demos(
    chain: &ChainModel,
    arch: &PolicyArch,
    gains: &PdGains,
    ik: &IkConfig,
    env: &EpisodeConfig,
    demo: &DemoConfig,
    seed: u64,
) -> Result<DemoDataset> {
    demo.validate()?;
    check_dim("policy joints", chain.n(), arch.n_joints)?;
    let mut env = env.clone();
    env.curriculum = None;
    let n = chain.n();
    let bounds = arch.bounds();
    let rho = if demo.noise_correlation_time > 0.0 {
        (-CONTROL_DT / demo.noise_correlation_time).exp()
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(demo.episodes);
    for i in 0..demo.episodes {
        let kind = demo.tasks[i % demo.tasks.len()];
        let task = TaskSpec::new(kind);
        let ep_seed = episode_seed(seed, i as u64);
        let mut episode = Episode::new(chain, &task, &env, ep_seed)?;
        let mut expert = IkPdController::new(chain.clone(), gains.clone(), ik.clone());
        let mut builder = ObservationBuilder::new(arch);
        let mut noise_rng = stream_rng(ep_seed, Stream::Policy);
        let mut eta = vec![0.0; n];
        let ticks = episode.len();
        let mut obs = Vec::with_capacity(ticks * arch.obs_dim());
        let mut actions = Vec::with_capacity(ticks * arch.action_dim());
        let mut engaged = Vec::with_capacity(ticks);
        while !episode.is_done() {
            let input = episode.begin_tick();
            obs.extend(builder.observe(&input.observed, &input.command)?);
            let mut torque = expert.act(&input.command, &input.observed)?;
            let mut label = vec![0.0; 2 * n];
            let mut executed = vec![0.0; 2 * n];
            let q_label = if input.command.grip {
                let mut seed_q = input.observed.q.clone();
                chain.clamp_to_limits(&mut seed_q);
                solve_ik(chain, &seed_q, &input.command.pose, ik)?.q
            } else {
                expert.q_target().to_vec()
            };
            for j in 0..n {
                let off = q_label[j] - input.observed.q[j];
                label[j] = off.clamp(-bounds[j], bounds[j]);
                if demo.action_noise > 0.0 {
                    let eps: f64 = noise_rng.sample(StandardNormal);
                    eta[j] = rho * eta[j] + (1.0 - rho * rho).sqrt() * demo.action_noise * eps;
                }
                torque[j] += gains.kp[j] * eta[j];
                executed[j] = (off + eta[j]).clamp(-bounds[j], bounds[j]);
            }
            builder.record_action(&ActionVector::from_vec(n, &executed));
            actions.extend_from_slice(&label);
            engaged.push(input.command.grip);
            episode.apply(&torque)?;
        }
        out.push(DemoEpisode {
            task: kind,
            seed: ep_seed,
            obs,
            actions,
            engaged,
            trajectory: episode.into_trajectory(),
        });
    }
    DemoDataset::from_episodes(arch.obs_dim(), arch.action_dim(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    pub epochs: usize,
    /// Timesteps per gradient step.
    pub minibatch: usize,
    pub learning_rate: f64,
    /// The step size decays linearly to `learning_rate * final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub validation_fraction: f64,
    /// Truncated-BPTT sequence length.
    pub chunk_len: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            epochs: 100,
            minibatch: 128,
            learning_rate: 1e-3,
            final_lr_fraction: 0.1,
            validation_fraction: 0.1,
            chunk_len: 32,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.minibatch == 0 || self.chunk_len == 0 {
            return Err(Error::invalid("bc config", "epochs, minibatch and chunk_len must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("bc config", "learning_rate must be positive"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::invalid("bc config", "final_lr_fraction must lie in (0, 1]"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid("bc config", "validation_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BcHistory {
    pub initial_train: f64,
    pub initial_validation: f64,
    /// Mean minibatch loss of each epoch.
    pub train: Vec<f64>,
    /// Validation loss after each epoch.
    pub validation: Vec<f64>,
    pub train_episodes: usize,
    pub validation_episodes: usize,
}

fn normalized_targets(arch: &PolicyArch, actions: &[f64]) -> Vec<f64> {
    let bounds = arch.bounds();
    actions
        .iter()
        .enumerate()
        .map(|(i, a)| a / bounds[i % bounds.len()])
        .collect()
}

/// Whole episodes as single chunks, for loss evaluation.
fn full_batches(arch: &PolicyArch, episodes: &[&DemoEpisode]) -> Vec<BcBatch> {
    episodes
        .iter()
        .map(|ep| BcBatch {
            chunk: SeqChunk {
                obs: ep.obs.clone(),
                starts: (0..ep.ticks()).map(|t| t == 0).collect(),
                h0: RecurrentState::zeros(arch),
            },
            targets: normalized_targets(arch, &ep.actions),
            mask: ep.engaged.clone(),
        })
        .collect()
}

/// Splits episodes into `chunk_len` windows whose entering state comes
/// from a no-grad pass with the current parameters.
fn chunked_batches(params: &PolicyParams, episodes: &[&DemoEpisode], chunk_len: usize) -> Vec<BcBatch> {
    let arch = &params.arch;
    let (od, ad) = (arch.obs_dim(), arch.action_dim());
    let mut out = Vec::new();
    for ep in episodes {
        let t_max = ep.ticks();
        let starts: Vec<bool> = (0..t_max).map(|t| t == 0).collect();
        let tape = actor_forward_seq(params, &ep.obs, &starts, &RecurrentState::zeros(arch));
        let targets = normalized_targets(arch, &ep.actions);
        let mut t0 = 0;
        while t0 < t_max {
            let t1 = (t0 + chunk_len).min(t_max);
            if ep.engaged[t0..t1].iter().any(|e| *e) {
                let h0 = if t0 == 0 {
                    RecurrentState::zeros(arch)
                } else {
                    tape.state_after(params, t0 - 1)
                };
                out.push(BcBatch {
                    chunk: SeqChunk {
                        obs: ep.obs[t0 * od..t1 * od].to_vec(),
                        starts: starts[t0..t1].to_vec(),
                        h0,
                    },
                    targets: targets[t0 * ad..t1 * ad].to_vec(),
                    mask: ep.engaged[t0..t1].to_vec(),
                });
            }
            t0 = t1;
        }
    }
    out
}

/// Minibatch Adam on the masked behavior-cloning loss. Episodes are split
/// into training and validation sets; with a single episode both sets are
/// that episode.
pub fn bc_train(
    params: PolicyParams,
    dataset: &DemoDataset,
    config: &BcConfig,
    seed: u64,
) -> Result<(PolicyParams, BcHistory)> {
    config.validate()?;
    params.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("demo dataset"));
    }
    check_dim("demo observation width", params.arch.obs_dim(), dataset.obs_dim)?;
    check_dim("demo action width", params.arch.action_dim(), dataset.action_dim)?;
    let mut rng = stream_rng(seed, Stream::Policy);
    let mut order: Vec<usize> = (0..dataset.episodes.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if order.len() < 2 {
        0
    } else {
        ((order.len() as f64 * config.validation_fraction).round() as usize).clamp(1, order.len() - 1)
    };
    let val: Vec<&DemoEpisode> = order[..n_val].iter().map(|&i| &dataset.episodes[i]).collect();
    let train: Vec<&DemoEpisode> = order[n_val..].iter().map(|&i| &dataset.episodes[i]).collect();
    let val = if val.is_empty() { train.clone() } else { val };
    if train.iter().all(|e| e.pairs() == 0) {
        return Err(Error::Empty("engaged demo ticks in the training split"));
    }

    let mut params = params;
    let arch = params.arch.clone();
    let val_batches = full_batches(&arch, &val);
    let train_full = full_batches(&arch, &train);
    let mut history = BcHistory {
        initial_train: bc_loss_grad(&params, &train_full, None),
        initial_validation: bc_loss_grad(&params, &val_batches, None),
        train_episodes: train.len(),
        validation_episodes: if n_val == 0 { 0 } else { val.len() },
        ..Default::default()
    };
    let actor = params.layout.actor_range();
    let mut opt = Adam::new(actor.len(), config.learning_rate);
    let mut grad = vec![0.0; params.len()];
    for epoch in 0..config.epochs {
        let frac = if config.epochs > 1 {
            epoch as f64 / (config.epochs - 1) as f64
        } else {
            0.0
        };
        opt.lr = config.learning_rate * (1.0 - frac * (1.0 - config.final_lr_fraction));
        let mut chunks = chunked_batches(&params, &train, config.chunk_len);
        chunks.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        let mut i = 0;
        while i < chunks.len() {
            let mut j = i;
            let mut steps = 0;
            while j < chunks.len() && steps < config.minibatch {
                steps += chunks[j].chunk.len();
                j += 1;
            }
            let batch = &chunks[i..j];
            let pairs: usize = batch.iter().map(|b| b.mask.iter().filter(|m| **m).count()).sum();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = bc_loss_grad(&params, batch, Some(&mut grad));
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("behavior-cloning gradient"));
            }
            opt.step(&mut params.data[actor.clone()], &grad[actor.clone()]);
            epoch_loss += loss * pairs as f64;
            epoch_steps += pairs;
            i = j;
        }
        history.train.push(epoch_loss / epoch_steps.max(1) as f64);
        history.validation.push(bc_loss_grad(&params, &val_batches, None));
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::rng_from_seed;

    #[test]
    fn chunking_does_not_change_the_loss() {
        let chain = ChainModel::default();
        let arch = PolicyArch { history: 2, vr_hidden: 8, prop_hidden: 16, core_hidden: 16, ..PolicyArch::for_joints(4) };
        let env = EpisodeConfig::new(&chain, crate::sim::RandomizationConfig::default());
        let demo = DemoConfig { episodes: 2, ..Default::default() };
        let ds = collect_demos(&chain, &arch, &PdGains::default_for(4), &IkConfig::default(), &env, &demo, 3).unwrap();
        let p = PolicyParams::init(&arch, -1.0, &mut rng_from_seed(1)).unwrap();
        let eps: Vec<&DemoEpisode> = ds.episodes.iter().collect();
        let full = bc_loss_grad(&p, &full_batches(&arch, &eps), None);
        let chunked = bc_loss_grad(&p, &chunked_batches(&p, &eps, 16), None);
        assert!((full - chunked).abs() < 1e-12 * full.max(1.0), "{full} vs {chunked}");
    }
}
