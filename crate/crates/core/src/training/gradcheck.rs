//! Finite-difference verification of the hand-written backward passes.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::losses::{bc_loss_grad, ppo_actor_loss_grad, value_loss_grad, BcBatch, PpoBatch, SeqChunk};
use crate::policy::{actor_forward_seq, gaussian_log_prob, PolicyParams, RecurrentState};
use crate::sim::{rng_from_seed, SimRng};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// At most this many coordinates are probed on large networks.
const MAX_PROBES: usize = 400;
/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bc,
    PpoSurrogate,
    Value,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Bc, LossKind::PpoSurrogate, LossKind::Value];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Bc => "bc",
            LossKind::PpoSurrogate => "ppo_surrogate",
            LossKind::Value => "value",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub kind: LossKind,
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over probed coordinates.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub probed: usize,
    pub param_count: usize,
}

enum Problem {
    Bc(Vec<BcBatch>),
    Ppo(Vec<PpoBatch>, f64, f64),
    Value(Vec<f64>, Vec<f64>),
}

impl Problem {
    fn eval(&self, params: &PolicyParams, grad: Option<&mut [f64]>) -> f64 {
        match self {
            Problem::Bc(b) => bc_loss_grad(params, b, grad),
            Problem::Ppo(b, eps, c) => ppo_actor_loss_grad(params, b, *eps, *c, grad).loss,
            Problem::Value(x, r) => value_loss_grad(params, x, r, grad),
        }
    }
}

fn random_chunk(params: &PolicyParams, steps: usize, reset_at: Option<usize>, rng: &mut SimRng) -> SeqChunk {
    let arch = &params.arch;
    let obs = (0..steps * arch.obs_dim())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let mut h0 = RecurrentState::zeros(arch);
    for v in h0.hidden.iter_mut().chain(h0.cell.iter_mut()) {
        *v = rng.random_range(-0.5..0.5);
    }
    SeqChunk {
        obs,
        starts: (0..steps).map(|t| Some(t) == reset_at).collect(),
        h0,
    }
}

fn build_problem(params: &PolicyParams, kind: LossKind, rng: &mut SimRng) -> Problem {
    let na = params.arch.action_dim();
    let chunks = [random_chunk(params, 5, None, rng), random_chunk(params, 6, Some(2), rng)];
    match kind {
        LossKind::Bc => Problem::Bc(
            chunks
                .into_iter()
                .map(|chunk| {
                    let steps = chunk.len();
                    BcBatch {
                        targets: (0..steps * na).map(|_| rng.random_range(-0.9..0.9)).collect(),
                        mask: (0..steps).map(|t| t == 0 || rng.random_bool(0.7)).collect(),
                        chunk,
                    }
                })
                .collect(),
        ),
        LossKind::PpoSurrogate => {
            let log_std = params.log_std().to_vec();
            let batches = chunks
                .into_iter()
                .map(|chunk| {
                    let tape = actor_forward_seq(params, &chunk.obs, &chunk.starts, &chunk.h0);
                    let steps = chunk.len();
                    let mut samples = Vec::with_capacity(steps * na);
                    let mut old = Vec::with_capacity(steps);
                    for t in 0..steps {
                        let mean = tape.pre(t);
                        let u: Vec<f64> = mean
                            .iter()
                            .zip(&log_std)
                            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * 0.15;
                        old.push(gaussian_log_prob(&u, mean, &log_std) + jitter);
                        samples.extend(u);
                    }
                    PpoBatch {
                        advantages: (0..steps).map(|_| rng.sample(StandardNormal)).collect(),
                        chunk,
                        samples,
                        old_log_prob: old,
                    }
                })
                .collect();
            Problem::Ppo(batches, 0.2, 0.01)
        }
        LossKind::Value => {
            let dim = params.arch.critic_input_dim();
            let rows = 6;
            let x = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect();
            Problem::Value(x, r)
        }
    }
}

/// Compares analytic gradients of the selected loss with central finite
/// differences on random inputs drawn from `seed`. Never fails; read the
/// report.
pub fn check_gradients(params: &PolicyParams, kind: LossKind, seed: u64) -> GradCheckReport {
    let mut rng = rng_from_seed(seed);
    let problem = build_problem(params, kind, &mut rng);
    let mut analytic = vec![0.0; params.len()];
    problem.eval(params, Some(&mut analytic));
    let indices: Vec<usize> = if params.len() <= MAX_PROBES {
        (0..params.len()).collect()
    } else {
        let mut v = sample(&mut rng, params.len(), MAX_PROBES).into_vec();
        v.sort_unstable();
        v
    };
    let mut probe = params.clone();
    let mut worst = (0.0f64, 0usize);
    for &i in &indices {
        let orig = probe.data[i];
        probe.data[i] = orig + FD_STEP;
        let up = problem.eval(&probe, None);
        probe.data[i] = orig - FD_STEP;
        let down = problem.eval(&probe, None);
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    GradCheckReport {
        kind,
        max_rel_error: worst.0,
        worst_index: worst.1,
        probed: indices.len(),
        param_count: params.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Activation, PolicyArch};
    use rand::Rng;

    fn params(arch: &PolicyArch, seed: u64) -> PolicyParams {
        PolicyParams::init(arch, -0.5, &mut rng_from_seed(seed)).unwrap()
    }

    #[test]
    fn tiny_networks_stay_under_200_params() {
        assert!(params(&PolicyArch::tiny(1), 0).len() <= 200);
    }

    #[test]
    fn all_losses_match_finite_differences() {
        for recurrent in [true, false] {
            let mut arch = PolicyArch::tiny(1);
            arch.recurrent = recurrent;
            let p = params(&arch, 11);
            for kind in LossKind::ALL {
                let r = check_gradients(&p, kind, 42);
                assert!(r.max_rel_error < 1e-4, "{r:?}");
            }
        }
    }

    #[test]
    fn linear_value_loss_is_exact() {
        let mut arch = PolicyArch::tiny(1);
        arch.activation = Activation::Identity;
        // O(1) weights keep every gradient component well above the
        // cancellation floor of the difference quotient
        let mut p = params(&arch, 2);
        let mut rng = rng_from_seed(3);
        p.data.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let r = check_gradients(&p, LossKind::Value, 9);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn report_is_deterministic() {
        let p = params(&PolicyArch::tiny(1), 4);
        assert_eq!(check_gradients(&p, LossKind::Bc, 1), check_gradients(&p, LossKind::Bc, 1));
    }
}
