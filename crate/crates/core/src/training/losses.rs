//! Scalar training losses and their analytic gradients.
//!
//! Every `*_loss_grad` returns the loss and, when `grad` is given,
//! accumulates `dLoss/dparams` into it (same length as `params.data`).

use crate::policy::{actor_backward, actor_forward_seq, critic_backward, critic_forward_cached};
use crate::policy::{PolicyParams, RecurrentState};

/// A contiguous run of actor observations with its entering recurrent
/// state. `starts[t]` resets the state before step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqChunk {
    pub obs: Vec<f64>,
    pub starts: Vec<bool>,
    pub h0: RecurrentState,
}

impl SeqChunk {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

/// Behavior-cloning targets for one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct BcBatch {
    pub chunk: SeqChunk,
    /// Expert actions divided by their bounds, `len x 2n`.
    pub targets: Vec<f64>,
    /// Steps that contribute to the loss.
    pub mask: Vec<bool>,
}

/// Mean squared error between `tanh(pre)` and normalized expert actions,
/// averaged over masked steps and action components.
pub fn bc_loss_grad(params: &PolicyParams, batches: &[BcBatch], mut grad: Option<&mut [f64]>) -> f64 {
    let na = params.arch.action_dim();
    let count: usize = batches.iter().map(|b| b.mask.iter().filter(|m| **m).count()).sum();
    if count == 0 {
        return 0.0;
    }
    let scale = 1.0 / (count * na) as f64;
    let mut loss = 0.0;
    for b in batches {
        let tape = actor_forward_seq(params, &b.chunk.obs, &b.chunk.starts, &b.chunk.h0);
        let mut d_pre = vec![0.0; tape.len() * na];
        for t in 0..tape.len() {
            if !b.mask[t] {
                continue;
            }
            let pre = tape.pre(t);
            for k in 0..na {
                let y = pre[k].tanh();
                let e = y - b.targets[t * na + k];
                loss += e * e * scale;
                d_pre[t * na + k] = 2.0 * e * scale * (1.0 - y * y);
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            actor_backward(params, &tape, &d_pre, g);
        }
    }
    loss
}

/// Clipped-surrogate inputs for one chunk of rollout data.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoBatch {
    pub chunk: SeqChunk,
    /// Pre-squash action samples, `len x 2n`.
    pub samples: Vec<f64>,
    /// Pre-squash Gaussian log densities under the behavior policy.
    pub old_log_prob: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ActorLossStats {
    pub loss: f64,
    /// `-mean min(rho A, clip(rho) A)`.
    pub policy_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// `mean(old_log_prob - new_log_prob)`.
    pub approx_kl: f64,
    pub samples: usize,
}

/// Negated PPO objective: `-mean min(rho A, clip(rho, 1 +- eps) A) - c H`.
pub fn ppo_actor_loss_grad(
    params: &PolicyParams,
    batches: &[PpoBatch],
    clip_eps: f64,
    entropy_coef: f64,
    mut grad: Option<&mut [f64]>,
) -> ActorLossStats {
    let na = params.arch.action_dim();
    let log_std = params.log_std().to_vec();
    let inv_std: Vec<f64> = log_std.iter().map(|l| (-l).exp()).collect();
    let count: usize = batches.iter().map(|b| b.chunk.len()).sum();
    let entropy = crate::policy::gaussian_entropy(&log_std);
    if count == 0 {
        return ActorLossStats {
            entropy,
            ..Default::default()
        };
    }
    let n = count as f64;
    let mut stats = ActorLossStats {
        entropy,
        samples: count,
        ..Default::default()
    };
    let mut d_log_std = vec![0.0; na];
    let mut clipped = 0usize;
    for b in batches {
        let tape = actor_forward_seq(params, &b.chunk.obs, &b.chunk.starts, &b.chunk.h0);
        let mut d_pre = vec![0.0; tape.len() * na];
        for t in 0..tape.len() {
            let mean = tape.pre(t);
            let u = &b.samples[t * na..(t + 1) * na];
            let logp = crate::policy::gaussian_log_prob(u, mean, &log_std);
            let ratio = (logp - b.old_log_prob[t]).exp();
            let adv = b.advantages[t];
            let clipped_ratio = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
            let surr = (ratio * adv).min(clipped_ratio * adv);
            stats.policy_loss -= surr / n;
            stats.approx_kl += (b.old_log_prob[t] - logp) / n;
            if (ratio - 1.0).abs() > clip_eps {
                clipped += 1;
            }
            // the clipped branch is constant in the parameters
            let active = !((adv > 0.0 && ratio > 1.0 + clip_eps) || (adv < 0.0 && ratio < 1.0 - clip_eps));
            if !active {
                continue;
            }
            let d_logp = -ratio * adv / n;
            for k in 0..na {
                let z = (u[k] - mean[k]) * inv_std[k];
                d_pre[t * na + k] = d_logp * z * inv_std[k];
                d_log_std[k] += d_logp * (z * z - 1.0);
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            actor_backward(params, &tape, &d_pre, g);
        }
    }
    stats.clip_fraction = clipped as f64 / n;
    stats.loss = stats.policy_loss - entropy_coef * entropy;
    if let Some(g) = grad {
        let range = params.layout.log_std.range();
        for (k, gi) in g[range].iter_mut().enumerate() {
            *gi += d_log_std[k] - entropy_coef;
        }
    }
    stats
}

/// `mean (V(x) - R)^2` over rows of `inputs` (each `critic_input_dim` long).
pub fn value_loss_grad(
    params: &PolicyParams,
    inputs: &[f64],
    returns: &[f64],
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let dim = params.arch.critic_input_dim();
    let m = returns.len();
    if m == 0 {
        return 0.0;
    }
    let mut loss = 0.0;
    for (x, r) in inputs.chunks_exact(dim).zip(returns) {
        let tape = critic_forward_cached(params, x);
        let e = tape.value() - r;
        loss += e * e / m as f64;
        if let Some(g) = grad.as_deref_mut() {
            critic_backward(params, &tape, 2.0 * e / m as f64, g);
        }
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{gaussian_log_prob, PolicyArch};
    use crate::sim::rng_from_seed;
    use rand::Rng;

    fn tiny_params(seed: u64) -> PolicyParams {
        let arch = PolicyArch::tiny(1);
        PolicyParams::init(&arch, -0.5, &mut rng_from_seed(seed)).unwrap()
    }

    fn chunk(params: &PolicyParams, steps: usize, seed: u64) -> SeqChunk {
        let mut rng = rng_from_seed(seed);
        let obs = (0..steps * params.arch.obs_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        SeqChunk {
            obs,
            starts: (0..steps).map(|t| t == 0).collect(),
            h0: RecurrentState::zeros(&params.arch),
        }
    }

    #[test]
    fn ratio_two_with_positive_advantage_has_zero_gradient() {
        let params = tiny_params(3);
        let c = chunk(&params, 1, 4);
        let tape = actor_forward_seq(&params, &c.obs, &c.starts, &c.h0);
        let u: Vec<f64> = tape.pre(0).iter().map(|m| m + 0.1).collect();
        let logp = gaussian_log_prob(&u, tape.pre(0), params.log_std());
        let batch = PpoBatch {
            chunk: c,
            samples: u,
            old_log_prob: vec![logp - 2f64.ln()],
            advantages: vec![1.5],
        };
        let mut g = vec![0.0; params.len()];
        let stats = ppo_actor_loss_grad(&params, &[batch], 0.2, 0.0, Some(&mut g));
        assert!(g.iter().all(|v| *v == 0.0));
        assert!((stats.policy_loss + 1.2 * 1.5).abs() < 1e-12);
        assert_eq!(stats.clip_fraction, 1.0);
    }

    #[test]
    fn zero_advantage_zero_entropy_gives_zero_gradient() {
        let params = tiny_params(5);
        let c = chunk(&params, 6, 6);
        let batch = PpoBatch {
            samples: vec![0.3; 6 * params.arch.action_dim()],
            old_log_prob: vec![-1.0; 6],
            advantages: vec![0.0; 6],
            chunk: c,
        };
        let mut g = vec![0.0; params.len()];
        ppo_actor_loss_grad(&params, &[batch], 0.2, 0.0, Some(&mut g));
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_bc_mask_is_zero_loss() {
        let params = tiny_params(7);
        let c = chunk(&params, 3, 8);
        let b = BcBatch {
            targets: vec![0.5; 3 * params.arch.action_dim()],
            mask: vec![false; 3],
            chunk: c,
        };
        let mut g = vec![0.0; params.len()];
        assert_eq!(bc_loss_grad(&params, &[b], Some(&mut g)), 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }
}
