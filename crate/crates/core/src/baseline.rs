//! IK+PD teleoperation baseline: damped-least-squares IK produces joint
//! targets, a joint-level PD loop tracks them.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::kinematics::{forward_kinematics, jacobian, wrap_angle, ChainModel, Pose2};
use crate::sim::{DynamicsParams, SimState};
use crate::tasks::TargetCommand;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IkConfig {
    pub dls_lambda: f64,
    pub max_iters: usize,
    pub pos_tol: f64,
    pub rot_tol: f64,
    pub step_scale: f64,
    /// Extra solves from spread-out seeds when the first one fails.
    /// `max_iters` is shared evenly by all starts.
    pub restarts: usize,
}

impl Default for IkConfig {
    fn default() -> Self {
        IkConfig {
            dls_lambda: 0.05,
            max_iters: 200,
            pos_tol: 1e-3,
            rot_tol: 1e-2,
            step_scale: 1.0,
            restarts: 7,
        }
    }
}

impl IkConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dls_lambda > 0.0
            && self.max_iters > 0
            && self.pos_tol > 0.0
            && self.rot_tol > 0.0
            && self.step_scale > 0.0
            && self.step_scale <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "ik config",
                "lambda, iterations and tolerances must be positive, step_scale in (0, 1]",
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdGains {
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
}

impl PdGains {
    pub const DEFAULT_KP: f64 = 40.0;

    /// `kd = 2 sqrt(kp * inertia)`: critically damped on the nominal inertia.
    pub fn critically_damped(kp: f64, params: &DynamicsParams) -> Self {
        PdGains {
            kp: vec![kp; params.n()],
            kd: params.inertia.iter().map(|m| 2.0 * (kp * m).sqrt()).collect(),
        }
    }

    pub fn default_for(n: usize) -> Self {
        Self::critically_damped(Self::DEFAULT_KP, &DynamicsParams::nominal(n))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        PdGains {
            kp: self.kp.iter().map(|k| k * factor).collect(),
            kd: self.kd.iter().map(|k| k * factor).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("pd kd", self.kp.len(), self.kd.len())?;
        if self.kp.iter().all(|&k| k > 0.0) && self.kd.iter().all(|&k| k >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid("pd gains", "need kp > 0 and kd >= 0"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub q: Vec<f64>,
    pub converged: bool,
    /// Position error of the returned iterate (m).
    pub residual: f64,
    /// Heading error of the returned iterate (rad).
    pub rot_residual: f64,
    pub iterations: usize,
}

fn task_error(chain: &ChainModel, q: &[f64], target: &Pose2) -> Result<[f64; 3]> {
    let pose = forward_kinematics(chain, q)?;
    Ok([
        target.p[0] - pose.p[0],
        target.p[1] - pose.p[1],
        wrap_angle(target.theta - pose.theta),
    ])
}

/// Solves `A x = b` for symmetric positive definite 3 x 3 `A` (Cholesky).
fn solve_spd3(a: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][j] = (a[i][i] - s).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    let mut y = [0.0; 3];
    for i in 0..3 {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i][i];
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let s: f64 = (i + 1..3).map(|k| l[k][i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i][i];
    }
    x
}

/// Deterministic restart seed `k`: a Halton point (bases 2, 3, 5, 7, ...)
/// stretched over 90% of each joint range.
fn restart_seed(chain: &ChainModel, k: usize) -> Vec<f64> {
    const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    chain
        .joint_limits
        .iter()
        .enumerate()
        .map(|(i, (lo, hi))| {
            let base = PRIMES[i % PRIMES.len()];
            let (mut f, mut r, mut idx) = (1.0, 0.0, k + 1);
            while idx > 0 {
                f /= base as f64;
                r += f * (idx % base) as f64;
                idx /= base;
            }
            let mid = 0.5 * (lo + hi);
            mid + 0.9 * (r - 0.5) * (hi - lo)
        })
        .collect()
}

/// Damped-least-squares IK. Never fails on unreachable targets: the
/// iterate with the smallest task error is returned with `converged = false`.
/// When the seeded solve does not converge, up to `restarts` further solves
/// start from fixed spread-out configurations; all starts together take at
/// most `max_iters` iterations.
pub fn solve_ik(
    chain: &ChainModel,
    q_seed: &[f64],
    target: &Pose2,
    config: &IkConfig,
) -> Result<IkSolution> {
    check_dim("ik seed", chain.n(), q_seed.len())?;
    check_finite("ik seed", q_seed)?;
    if !target.is_finite() {
        return Err(Error::NonFinite("ik target"));
    }
    let per_start = (config.max_iters / (config.restarts + 1)).max(1);
    let mut best = solve_from(chain, q_seed, target, config, per_start)?;
    let mut iterations = best.iterations;
    for k in 0..config.restarts {
        if best.converged || iterations + per_start > config.max_iters {
            break;
        }
        let sol = solve_from(chain, &restart_seed(chain, k), target, config, per_start)?;
        iterations += sol.iterations;
        let score = |s: &IkSolution| (s.converged, -s.residual.hypot(s.rot_residual));
        if score(&sol) > score(&best) {
            best = sol;
        }
    }
    best.iterations = iterations;
    Ok(best)
}

fn solve_from(
    chain: &ChainModel,
    q_seed: &[f64],
    target: &Pose2,
    config: &IkConfig,
    max_iters: usize,
) -> Result<IkSolution> {
    let lambda2 = config.dls_lambda * config.dls_lambda;
    let norm = |e: &[f64; 3]| (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
    let done = |e: &[f64; 3]| e[0].hypot(e[1]) < config.pos_tol && e[2].abs() < config.rot_tol;

    let mut q = q_seed.to_vec();
    chain.clamp_to_limits(&mut q);
    let mut e = task_error(chain, &q, target)?;
    let mut best = (q.clone(), e, norm(&e));
    let mut iterations = 0;

    while iterations < max_iters && !done(&e) {
        let j = jacobian(chain, &q)?;
        let mut a = j.jjt();
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += lambda2;
        }
        let y = solve_spd3(a, e);
        let dq = j.transpose_mul(&y);
        for (qi, d) in q.iter_mut().zip(&dq) {
            *qi += config.step_scale * d;
        }
        chain.clamp_to_limits(&mut q);
        e = task_error(chain, &q, target)?;
        iterations += 1;
        let en = norm(&e);
        if !en.is_finite() {
            break;
        }
        if en < best.2 {
            best = (q.clone(), e, en);
        }
    }

    let (q, e, _) = best;
    Ok(IkSolution {
        converged: done(&e),
        residual: e[0].hypot(e[1]),
        rot_residual: e[2].abs(),
        q,
        iterations,
    })
}

/// `tau = kp (q_target - q) + kd (qdot_target - qdot)`; unclamped.
pub fn pd_torque(
    gains: &PdGains,
    q_target: &[f64],
    qdot_target: &[f64],
    state: &SimState,
) -> Result<Vec<f64>> {
    let n = gains.kp.len();
    check_dim("pd kd", n, gains.kd.len())?;
    check_dim("pd q_target", n, q_target.len())?;
    check_dim("pd qdot_target", n, qdot_target.len())?;
    check_dim("pd state q", n, state.q.len())?;
    check_dim("pd state qdot", n, state.qdot.len())?;
    Ok((0..n)
        .map(|i| {
            gains.kp[i] * (q_target[i] - state.q[i]) + gains.kd[i] * (qdot_target[i] - state.qdot[i])
        })
        .collect())
}

/// Two-stage IK+PD controller with its per-episode memory.
///
/// While grip is held the IK is warm-started from the previous solution;
/// on release the joint target freezes at the measured configuration.
#[derive(Debug, Clone)]
pub struct IkPdController {
    pub chain: ChainModel,
    pub gains: PdGains,
    pub ik: IkConfig,
    last_solution: Option<Vec<f64>>,
    hold: Option<Vec<f64>>,
    q_target: Vec<f64>,
    pub last_ik: Option<IkSolution>,
}

impl IkPdController {
    pub fn new(chain: ChainModel, gains: PdGains, ik: IkConfig) -> Self {
        IkPdController {
            chain,
            gains,
            ik,
            last_solution: None,
            hold: None,
            q_target: Vec::new(),
            last_ik: None,
        }
    }

    pub fn reset(&mut self) {
        self.last_solution = None;
        self.hold = None;
        self.q_target.clear();
        self.last_ik = None;
    }

    /// Joint target used on the most recent tick.
    pub fn q_target(&self) -> &[f64] {
        &self.q_target
    }

    pub fn act(&mut self, command: &TargetCommand, state: &SimState) -> Result<Vec<f64>> {
        if !command.pose.is_finite() {
            return Err(Error::NonFinite("command pose"));
        }
        if command.grip {
            self.hold = None;
            let seed = self.last_solution.clone().unwrap_or_else(|| state.q.clone());
            let mut seed = seed;
            self.chain.clamp_to_limits(&mut seed);
            let sol = solve_ik(&self.chain, &seed, &command.pose, &self.ik)?;
            self.q_target = sol.q.clone();
            self.last_solution = Some(sol.q.clone());
            self.last_ik = Some(sol);
        } else {
            let hold = self.hold.get_or_insert_with(|| state.q.clone());
            self.q_target = hold.clone();
            // re-engaging starts IK from wherever the arm is held
            self.last_solution = Some(hold.clone());
        }
        let zero = vec![0.0; self.chain.n()];
        pd_torque(&self.gains, &self.q_target, &zero, state)
    }
}
