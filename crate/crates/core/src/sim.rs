//! Joint-space arm dynamics with diagonal inertia, viscous damping and an
//! external end-effector wrench, plus the training-time perturbation
//! machinery: dynamics randomization, force curriculum sampling, command
//! latency and encoder noise.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::kinematics::{jacobian, ChainModel};

/// Deterministic RNG used for every stochastic component.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Simulation step (100 Hz).
pub const SIM_DT: f64 = 0.01;
/// Control tick (50 Hz): two physics substeps per command.
pub const CONTROL_DT: f64 = 0.02;
pub const SUBSTEPS: usize = 2;

/// Moment arm converting the force bound into the torque bound of a wrench.
pub const WRENCH_MOMENT_ARM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub time: f64,
}

impl SimState {
    pub fn at_rest(q: Vec<f64>) -> Self {
        let n = q.len();
        SimState {
            q,
            qdot: vec![0.0; n],
            time: 0.0,
        }
    }

    pub fn kinetic_energy(&self, params: &DynamicsParams) -> f64 {
        0.5 * self
            .qdot
            .iter()
            .zip(&params.inertia)
            .map(|(v, m)| m * v * v)
            .sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.time.is_finite()
            && self.q.iter().all(|v| v.is_finite())
            && self.qdot.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsParams {
    pub inertia: Vec<f64>,
    pub damping: Vec<f64>,
    pub motor_gain_scale: Vec<f64>,
    pub friction_scale: f64,
}

impl DynamicsParams {
    pub const NOMINAL_INERTIA: f64 = 0.5;
    pub const NOMINAL_DAMPING: f64 = 1.0;

    pub fn nominal(n: usize) -> Self {
        DynamicsParams {
            inertia: vec![Self::NOMINAL_INERTIA; n],
            damping: vec![Self::NOMINAL_DAMPING; n],
            motor_gain_scale: vec![1.0; n],
            friction_scale: 1.0,
        }
    }

    pub fn n(&self) -> usize {
        self.inertia.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inertia.len();
        check_dim("damping", n, self.damping.len())?;
        check_dim("motor_gain_scale", n, self.motor_gain_scale.len())?;
        let positive = |v: &f64| *v > 0.0 && v.is_finite();
        if !(self.inertia.iter().all(positive)
            && self.damping.iter().all(positive)
            && self.motor_gain_scale.iter().all(positive)
            && positive(&self.friction_scale))
        {
            return Err(Error::invalid(
                "dynamics params",
                "all entries must be strictly positive",
            ));
        }
        Ok(())
    }

    /// Ratios against nominal, `2n + 1` entries: inertia, gains, friction.
    /// Damping is left out since it only enters through the friction scale.
    pub fn normalized(&self, nominal: &DynamicsParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.n() + 1);
        out.extend(self.inertia.iter().zip(&nominal.inertia).map(|(a, b)| a / b));
        out.extend(
            self.motor_gain_scale
                .iter()
                .zip(&nominal.motor_gain_scale)
                .map(|(a, b)| a / b),
        );
        out.push(self.friction_scale / nominal.friction_scale);
        out
    }
}

/// Force (N) and torque (N.m) applied at the end-effector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExternalWrench {
    pub force: [f64; 2],
    pub torque: f64,
}

impl ExternalWrench {
    pub const ZERO: ExternalWrench = ExternalWrench {
        force: [0.0, 0.0],
        torque: 0.0,
    };

    pub fn from_force(fx: f64, fy: f64) -> Self {
        ExternalWrench {
            force: [fx, fy],
            torque: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.force[0], self.force[1], self.torque]
    }

    pub fn force_magnitude(&self) -> f64 {
        self.force[0].hypot(self.force[1])
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationConfig {
    pub inertia_frac: f64,
    pub friction_range: (f64, f64),
    pub gain_frac: f64,
    pub latency_steps: (usize, usize),
    pub encoder_noise_std: f64,
    /// Peak of random joint-torque impulses (N.m); 0 disables them.
    pub push_torque: f64,
    /// Expected impulses per second of sim time.
    pub push_rate: f64,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        RandomizationConfig {
            inertia_frac: 0.10,
            friction_range: (0.5, 1.25),
            gain_frac: 0.10,
            latency_steps: (0, 1),
            encoder_noise_std: 0.01,
            push_torque: 0.0,
            push_rate: 0.5,
        }
    }
}

impl RandomizationConfig {
    /// No randomization, no latency, no noise.
    pub fn disabled() -> Self {
        RandomizationConfig {
            inertia_frac: 0.0,
            friction_range: (1.0, 1.0),
            gain_frac: 0.0,
            latency_steps: (0, 0),
            encoder_noise_std: 0.0,
            push_torque: 0.0,
            push_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| (0.0..1.0).contains(&f);
        if !frac_ok(self.inertia_frac) || !frac_ok(self.gain_frac) {
            return Err(Error::invalid("randomization", "fractions must lie in [0, 1)"));
        }
        let (lo, hi) = self.friction_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("randomization", "friction_range must be 0 < lo <= hi"));
        }
        if self.latency_steps.0 > self.latency_steps.1 {
            return Err(Error::invalid("randomization", "latency_steps must be min <= max"));
        }
        if !(self.encoder_noise_std >= 0.0 && self.encoder_noise_std.is_finite()) {
            return Err(Error::invalid("randomization", "encoder_noise_std must be >= 0"));
        }
        if !(self.push_torque >= 0.0 && self.push_rate >= 0.0) {
            return Err(Error::invalid("randomization", "push settings must be >= 0"));
        }
        Ok(())
    }

    pub fn sample_latency(&self, rng: &mut SimRng) -> usize {
        let (lo, hi) = self.latency_steps;
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    }
}

fn uniform(rng: &mut SimRng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws a perturbed copy of `nominal`: inertia and motor gains scaled by
/// `1 +- frac`, friction scaled by a factor from `friction_range`.
pub fn apply_randomization(
    nominal: &DynamicsParams,
    config: &RandomizationConfig,
    rng: &mut SimRng,
) -> DynamicsParams {
    let inertia = nominal
        .inertia
        .iter()
        .map(|m| m * uniform(rng, 1.0 - config.inertia_frac, 1.0 + config.inertia_frac))
        .collect();
    let motor_gain_scale = nominal
        .motor_gain_scale
        .iter()
        .map(|g| g * uniform(rng, 1.0 - config.gain_frac, 1.0 + config.gain_frac))
        .collect();
    let (lo, hi) = config.friction_range;
    DynamicsParams {
        inertia,
        damping: nominal.damping.clone(),
        motor_gain_scale,
        friction_scale: nominal.friction_scale * uniform(rng, lo, hi),
    }
}

/// Curriculum disturbance: each force component uniform on
/// `[-alpha * f_max, alpha * f_max]`, torque on the same interval scaled by
/// [`WRENCH_MOMENT_ARM`].
pub fn sample_curriculum_wrench(alpha: f64, f_max: f64, rng: &mut SimRng) -> ExternalWrench {
    let bound = alpha.clamp(0.0, 1.0) * f_max.max(0.0);
    if bound == 0.0 {
        return ExternalWrench::ZERO;
    }
    ExternalWrench {
        force: [
            rng.random_range(-bound..=bound),
            rng.random_range(-bound..=bound),
        ],
        torque: WRENCH_MOMENT_ARM * rng.random_range(-bound..=bound),
    }
}

/// Advances the arm by one semi-implicit Euler step.
///
/// Commanded torques are clamped to the chain limits and scaled by the motor
/// gains; joints that reach a position limit stop there with zero velocity.
pub fn step(
    state: &SimState,
    torque: &[f64],
    wrench: &ExternalWrench,
    params: &DynamicsParams,
    dt: f64,
    chain: &ChainModel,
) -> Result<SimState> {
    let n = chain.n();
    check_dim("torque", n, torque.len())?;
    check_dim("state q", n, state.q.len())?;
    check_dim("state qdot", n, state.qdot.len())?;
    check_dim("dynamics params", n, params.n())?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("dt", "must be positive and finite"));
    }
    check_finite("torque", torque)?;
    if !wrench.is_finite() {
        return Err(Error::NonFinite("wrench"));
    }
    if !state.is_finite() {
        return Err(Error::NonFinite("state"));
    }

    let external = if *wrench == ExternalWrench::ZERO {
        vec![0.0; n]
    } else {
        jacobian(chain, &state.q)?.transpose_mul(&wrench.as_array())
    };

    let mut next = state.clone();
    for i in 0..n {
        let limit = chain.torque_limits[i];
        let applied = params.motor_gain_scale[i] * torque[i].clamp(-limit, limit);
        let friction = params.damping[i] * params.friction_scale * state.qdot[i];
        let acc = (applied - friction + external[i]) / params.inertia[i];
        let v = state.qdot[i] + dt * acc;
        let mut q = state.q[i] + dt * v;
        let (lo, hi) = chain.joint_limits[i];
        let mut v_out = v;
        if q <= lo {
            q = lo;
            v_out = 0.0;
        } else if q >= hi {
            q = hi;
            v_out = 0.0;
        }
        next.q[i] = q;
        next.qdot[i] = v_out;
    }
    next.time = state.time + dt;
    Ok(next)
}

/// Fixed-latency FIFO in control ticks. Until the first command has aged
/// `latency` ticks the output repeats the first command.
#[derive(Debug, Clone)]
pub struct DelayLine<T> {
    latency: usize,
    buffer: VecDeque<T>,
}

impl<T: Clone> DelayLine<T> {
    pub fn new(latency: usize) -> Self {
        DelayLine {
            latency,
            buffer: VecDeque::with_capacity(latency + 2),
        }
    }

    pub fn latency(&self) -> usize {
        self.latency
    }

    /// Inserts this tick's command and returns the one due now.
    pub fn push(&mut self, command: T) -> T {
        self.buffer.push_back(command);
        if self.buffer.len() > self.latency + 1 {
            self.buffer.pop_front();
        }
        self.buffer
            .front()
            .cloned()
            .expect("buffer holds at least the pushed command")
    }
}

/// Runs a whole command stream through a delay line.
pub fn delay_line<T: Clone>(commands: &[T], latency: usize) -> Vec<T> {
    let mut line = DelayLine::new(latency);
    commands.iter().map(|c| line.push(c.clone())).collect()
}

/// Ratio of velocity noise (rad/s) to position noise (rad).
pub const VELOCITY_NOISE_SCALE: f64 = 10.0;

/// Encoder reading: Gaussian noise on q with `std`, on qdot with
/// `std * VELOCITY_NOISE_SCALE`.
pub fn noisy_observation(state: &SimState, encoder_noise_std: f64, rng: &mut SimRng) -> SimState {
    if encoder_noise_std <= 0.0 {
        return state.clone();
    }
    let q_noise = Normal::new(0.0, encoder_noise_std).expect("std is positive");
    let v_noise =
        Normal::new(0.0, encoder_noise_std * VELOCITY_NOISE_SCALE).expect("std is positive");
    let mut obs = state.clone();
    for q in obs.q.iter_mut() {
        *q += q_noise.sample(rng);
    }
    for v in obs.qdot.iter_mut() {
        *v += v_noise.sample(rng);
    }
    obs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_joint() -> (ChainModel, DynamicsParams) {
        let chain = ChainModel::uniform(1, 1.0, 100.0, 10.0);
        let params = DynamicsParams {
            inertia: vec![1.0],
            damping: vec![1.0],
            motor_gain_scale: vec![1.0],
            friction_scale: 1.0,
        };
        (chain, params)
    }

    #[test]
    fn equilibrium_only_advances_time() {
        let chain = ChainModel::default();
        let params = DynamicsParams::nominal(4);
        let s0 = SimState::at_rest(vec![0.1, -0.2, 0.3, 0.4]);
        let s1 = step(&s0, &[0.0; 4], &ExternalWrench::ZERO, &params, SIM_DT, &chain).unwrap();
        assert_eq!(s1.q, s0.q);
        assert_eq!(s1.qdot, s0.qdot);
        assert_eq!(s1.time, SIM_DT);
    }

    #[test]
    fn constant_torque_integrates_linearly() {
        let (chain, mut params) = single_joint();
        params.damping = vec![0.0];
        let mut s = SimState::at_rest(vec![0.0]);
        for k in 1..=200 {
            s = step(&s, &[1.0], &ExternalWrench::ZERO, &params, 0.01, &chain).unwrap();
            assert!((s.qdot[0] - 0.01 * k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn torque_is_clamped_to_limit() {
        let (chain, mut params) = single_joint();
        params.damping = vec![0.0];
        let s = SimState::at_rest(vec![0.0]);
        let a = step(&s, &[1e6], &ExternalWrench::ZERO, &params, 0.01, &chain).unwrap();
        assert!((a.qdot[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn joint_limit_stops_motion() {
        let chain = ChainModel::uniform(1, 1.0, 0.05, 10.0);
        let params = DynamicsParams::nominal(1);
        let mut s = SimState::at_rest(vec![0.0]);
        for _ in 0..100 {
            s = step(&s, &[10.0], &ExternalWrench::ZERO, &params, 0.01, &chain).unwrap();
            assert!(s.q[0] <= 0.05);
        }
        assert_eq!(s.q[0], 0.05);
        assert_eq!(s.qdot[0], 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let chain = ChainModel::default();
        let params = DynamicsParams::nominal(4);
        let s = SimState::at_rest(vec![0.0; 4]);
        let w = ExternalWrench::ZERO;
        assert!(step(&s, &[0.0; 3], &w, &params, 0.01, &chain).is_err());
        assert!(step(&s, &[f64::NAN, 0.0, 0.0, 0.0], &w, &params, 0.01, &chain).is_err());
        assert!(step(&s, &[0.0; 4], &w, &params, 0.0, &chain).is_err());
        let bad = ExternalWrench::from_force(f64::INFINITY, 0.0);
        assert!(step(&s, &[0.0; 4], &bad, &params, 0.01, &chain).is_err());
    }

    #[test]
    fn delay_line_traces() {
        assert_eq!(delay_line(&[1, 2, 3], 0), vec![1, 2, 3]);
        assert_eq!(delay_line(&['a', 'b', 'c', 'c', 'c'], 2), vec!['a', 'a', 'a', 'b', 'c']);
        assert_eq!(delay_line(&[5, 6, 7, 8], 1), vec![5, 5, 6, 7]);
        // one tick at 50 Hz is the 20 ms upper latency bound
        assert!((CONTROL_DT * 1.0 - 0.020).abs() < 1e-15);
    }

    #[test]
    fn zero_width_randomization_is_identity() {
        let nominal = DynamicsParams::nominal(4);
        let mut rng = rng_from_seed(3);
        let out = apply_randomization(&nominal, &RandomizationConfig::disabled(), &mut rng);
        assert_eq!(out, nominal);
    }

    #[test]
    fn zero_alpha_gives_zero_wrench() {
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            assert_eq!(sample_curriculum_wrench(0.0, 40.0, &mut rng), ExternalWrench::ZERO);
        }
    }

    #[test]
    fn zero_noise_is_exact() {
        let s = SimState::at_rest(vec![0.3, 0.2]);
        let mut rng = rng_from_seed(9);
        assert_eq!(noisy_observation(&s, 0.0, &mut rng), s);
    }

    #[test]
    fn randomization_config_validation() {
        assert!(RandomizationConfig::default().validate().is_ok());
        let mut c = RandomizationConfig::default();
        c.inertia_frac = 1.0;
        assert!(c.validate().is_err());
        let mut c = RandomizationConfig::default();
        c.latency_steps = (2, 1);
        assert!(c.validate().is_err());
        let mut c = RandomizationConfig::default();
        c.friction_range = (1.3, 1.2);
        assert!(c.validate().is_err());
    }
}
