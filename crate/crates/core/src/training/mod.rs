//! Three-stage training: behavior cloning from IK demonstrations, PPO
//! fine-tuning with tracking/smoothness/energy rewards, then PPO under a
//! ramped external-force curriculum.

mod demos;
mod gradcheck;
mod losses;
mod pipeline;
mod ppo;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub use demos::{
    bc_train, collect_demos, episode_seed, BcConfig, BcHistory, DemoConfig, DemoDataset, DemoEpisode, DemoMeta,
};
pub use gradcheck::{check_gradients, GradCheckReport, LossKind};
pub use pipeline::{
    run_bc_stage, run_curriculum_stage, run_ppo_stage, train_full_pipeline, Ablation, PipelineConfig,
    PipelineError, PipelineOutput, Stage, StageSnapshot, TrainingLog, TrainingLogRow,
};
pub use ppo::{
    collect_rollouts, ppo_update, EnvStream, PpoConfig, PpoDiagnostics, PpoLearner, RolloutBuffer,
    RolloutStats, TrainEnvs, TrainingEnvConfig, ValueNormalizer,
};
pub use losses::{
    bc_loss_grad, ppo_actor_loss_grad, value_loss_grad, ActorLossStats, BcBatch, PpoBatch,
    SeqChunk,
};

/// Adam over one contiguous slice of the parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Rescales `grad` in place so its norm is at most `max_norm`.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Generalized advantage estimation over one time-ordered stream.
///
/// `dones[t]` marks that the episode ended after step `t`; `bootstrap` is
/// the value of the state following the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    check_dim("gae values", n, values.len())?;
    check_dim("gae dones", n, dones.len())?;
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Linear ramp of the force-curriculum coefficient over PPO updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSchedule {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub ramp_updates: usize,
    /// Peak force magnitude per component (N).
    pub f_max: f64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            alpha_start: 0.0,
            alpha_end: 1.0,
            ramp_updates: 40,
            f_max: 20.0,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        let unit = |a: f64| (0.0..=1.0).contains(&a);
        if !(unit(self.alpha_start) && unit(self.alpha_end) && self.alpha_start <= self.alpha_end) {
            return Err(Error::invalid(
                "curriculum",
                "need 0 <= alpha_start <= alpha_end <= 1",
            ));
        }
        if !(self.f_max >= 0.0 && self.f_max.is_finite()) {
            return Err(Error::invalid("curriculum", "f_max must be >= 0"));
        }
        Ok(())
    }

    /// `alpha` for the given zero-based update; reaches `alpha_end` on the
    /// last ramp update.
    pub fn alpha(&self, update: usize) -> f64 {
        if self.ramp_updates <= 1 {
            return self.alpha_end;
        }
        let frac = (update as f64 / (self.ramp_updates - 1) as f64).min(1.0);
        self.alpha_start + (self.alpha_end - self.alpha_start) * frac
    }
}
