//! Learned teleoperation policy: observation encoding, recurrent actor,
//! privileged critic, Gaussian action sampling and parameter files.
//!
//! The actor maps `[proprio history, grip-relative command]` through two
//! encoders into an LSTM (or a feedforward layer for the MLP-only
//! variant) and a linear head producing `2n` pre-squash outputs: joint
//! target offsets and feedforward torques. The critic is a feedforward
//! network over the actor observation plus simulator-only information.

mod io;
mod linalg;
mod net;

use std::collections::VecDeque;
use std::f64::consts::LN_2;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baseline::PdGains;
use crate::error::{check_dim, check_finite, Error, Result};
use crate::kinematics::{relative_pose, Pose2};
use crate::sim::{DynamicsParams, ExternalWrench, SimRng, SimState};
use crate::tasks::{Controller, GripTracker, TargetCommand};

pub use io::{load_params, read_params, save_params, write_params, ParamsIoError, FORMAT_VERSION};
pub use net::{
    actor_backward, actor_forward_seq, critic_backward, critic_forward_cached, ActorTape,
    CriticTape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// Used for linear test networks.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Network widths and action bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyArch {
    pub n_joints: usize,
    /// Proprioceptive frames stacked into each observation.
    pub history: usize,
    pub vr_hidden: usize,
    pub prop_hidden: usize,
    pub core_hidden: usize,
    /// LSTM core when true, a single feedforward layer otherwise.
    pub recurrent: bool,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
    /// Bound on joint-target offsets (rad).
    pub offset_bound: f64,
    /// Bound on feedforward torques (N.m).
    pub torque_bound: f64,
}

impl Default for PolicyArch {
    fn default() -> Self {
        PolicyArch::for_joints(4)
    }
}

impl PolicyArch {
    pub fn for_joints(n: usize) -> Self {
        PolicyArch {
            n_joints: n,
            history: 5,
            vr_hidden: 16,
            prop_hidden: 64,
            core_hidden: 64,
            recurrent: true,
            critic_hidden: vec![128, 128],
            activation: Activation::Tanh,
            offset_bound: 0.5,
            torque_bound: 10.0,
        }
    }

    /// Few-parameter network for gradient checks.
    pub fn tiny(n: usize) -> Self {
        PolicyArch {
            n_joints: n,
            history: 2,
            vr_hidden: 2,
            prop_hidden: 3,
            core_hidden: 3,
            recurrent: true,
            critic_hidden: vec![2],
            activation: Activation::Tanh,
            offset_bound: 0.5,
            torque_bound: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_joints,
            self.history,
            self.vr_hidden,
            self.prop_hidden,
            self.core_hidden,
        ];
        if dims.contains(&0) || self.critic_hidden.contains(&0) {
            return Err(Error::invalid("policy arch", "all widths must be positive"));
        }
        if !(self.offset_bound > 0.0 && self.torque_bound > 0.0) {
            return Err(Error::invalid("policy arch", "action bounds must be positive"));
        }
        Ok(())
    }

    pub fn frame_dim(&self) -> usize {
        4 * self.n_joints
    }

    pub fn prop_dim(&self) -> usize {
        self.history * self.frame_dim()
    }

    /// Actor observation length: `history * 4n + 4`.
    pub fn obs_dim(&self) -> usize {
        self.prop_dim() + VR_DIM
    }

    /// Critic-only features: wrench (3) and dynamics ratios (2n + 1).
    pub fn privileged_extra(&self) -> usize {
        3 + 2 * self.n_joints + 1
    }

    pub fn critic_input_dim(&self) -> usize {
        self.obs_dim() + self.privileged_extra()
    }

    pub fn action_dim(&self) -> usize {
        2 * self.n_joints
    }

    pub fn core_input_dim(&self) -> usize {
        self.vr_hidden + self.prop_hidden
    }

    pub fn bounds(&self) -> Vec<f64> {
        let n = self.n_joints;
        let mut b = vec![self.offset_bound; n];
        b.extend(std::iter::repeat_n(self.torque_bound, n));
        b
    }
}

/// Length of the grip-relative command block `(dx, dy, dtheta, grip)`.
pub const VR_DIM: usize = 4;
/// Scale applied to joint velocities in observations.
pub const QDOT_SCALE: f64 = 0.2;
/// Scale applied to the relative command translation (1/m).
pub const VR_POS_SCALE: f64 = 4.0;
/// Normalizer for privileged wrench forces (N).
pub const WRENCH_SCALE: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Positions of every weight block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub vr_w: Block,
    pub vr_b: Block,
    pub prop_w: Block,
    pub prop_b: Block,
    /// LSTM input weights (`4H x I`, gate order i, f, g, o) or the
    /// feedforward core weights (`H x I`).
    pub core_wx: Block,
    /// LSTM recurrent weights; empty for the feedforward core.
    pub core_wh: Block,
    pub core_b: Block,
    pub head_w: Block,
    pub head_b: Block,
    pub log_std: Block,
    pub critic: Vec<(Block, Block)>,
    pub actor_len: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(arch: &PolicyArch) -> Self {
        let mut offset = 0;
        let mut block = |rows: usize, cols: usize| {
            let b = Block { offset, rows, cols };
            offset += rows * cols;
            b
        };
        let h = arch.core_hidden;
        let i = arch.core_input_dim();
        let gates = if arch.recurrent { 4 * h } else { h };
        let vr_w = block(arch.vr_hidden, VR_DIM);
        let vr_b = block(arch.vr_hidden, 1);
        let prop_w = block(arch.prop_hidden, arch.prop_dim());
        let prop_b = block(arch.prop_hidden, 1);
        let core_wx = block(gates, i);
        let core_wh = block(if arch.recurrent { gates } else { 0 }, h);
        let core_b = block(gates, 1);
        let head_w = block(arch.action_dim(), h);
        let head_b = block(arch.action_dim(), 1);
        let log_std = block(arch.action_dim(), 1);
        let actor_len = log_std.offset + log_std.len();
        let mut critic = Vec::new();
        let mut fan_in = arch.critic_input_dim();
        for &width in arch.critic_hidden.iter().chain(std::iter::once(&1)) {
            let w = block(width, fan_in);
            let b = block(width, 1);
            critic.push((w, b));
            fan_in = width;
        }
        Layout {
            vr_w,
            vr_b,
            prop_w,
            prop_b,
            core_wx,
            core_wh,
            core_b,
            head_w,
            head_b,
            log_std,
            critic,
            actor_len,
            total: offset,
        }
    }

    /// Blocks in storage order; this is the shape table of parameter files.
    pub fn blocks(&self) -> Vec<Block> {
        let mut out = vec![
            self.vr_w,
            self.vr_b,
            self.prop_w,
            self.prop_b,
            self.core_wx,
            self.core_wh,
            self.core_b,
            self.head_w,
            self.head_b,
            self.log_std,
        ];
        for (w, b) in &self.critic {
            out.push(*w);
            out.push(*b);
        }
        out
    }

    pub fn actor_range(&self) -> std::ops::Range<usize> {
        0..self.actor_len
    }

    pub fn critic_range(&self) -> std::ops::Range<usize> {
        self.actor_len..self.total
    }
}

/// All learnable weights of the actor and critic in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub arch: PolicyArch,
    pub layout: Layout,
    pub data: Vec<f64>,
    pub format_version: u32,
}

impl PolicyParams {
    pub fn zeros(arch: &PolicyArch) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(arch);
        Ok(PolicyParams {
            arch: arch.clone(),
            data: vec![0.0; layout.total],
            layout,
            format_version: FORMAT_VERSION,
        })
    }

    /// Uniform `+-1/sqrt(fan_in)` weights, zero biases (forget gate 1),
    /// a small action head and the given initial log standard deviation.
    pub fn init(arch: &PolicyArch, init_log_std: f64, rng: &mut SimRng) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let l = p.layout.clone();
        let mut fill = |data: &mut [f64], b: Block, gain: f64| {
            let bound = gain / (b.cols as f64).sqrt();
            for v in &mut data[b.range()] {
                *v = rng.random_range(-bound..=bound);
            }
        };
        fill(&mut p.data, l.vr_w, 1.0);
        fill(&mut p.data, l.prop_w, 1.0);
        fill(&mut p.data, l.core_wx, 1.0);
        if !l.core_wh.is_empty() {
            fill(&mut p.data, l.core_wh, 1.0);
        }
        fill(&mut p.data, l.head_w, 0.1);
        for (k, (w, _)) in l.critic.iter().enumerate() {
            let gain = if k + 1 == l.critic.len() { 0.1 } else { 1.0 };
            fill(&mut p.data, *w, gain);
        }
        if arch.recurrent {
            let h = arch.core_hidden;
            for v in &mut p.data[l.core_b.offset + h..l.core_b.offset + 2 * h] {
                *v = 1.0;
            }
        }
        for v in &mut p.data[l.log_std.range()] {
            *v = init_log_std;
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block(&self, b: Block) -> &[f64] {
        &self.data[b.range()]
    }

    pub fn log_std(&self) -> &[f64] {
        self.block(self.layout.log_std)
    }

    /// Sets every action log standard deviation to `value`.
    pub fn set_log_std(&mut self, value: f64) {
        let r = self.layout.log_std.range();
        self.data[r].iter_mut().for_each(|v| *v = value);
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("policy params", self.layout.total, self.data.len())?;
        check_finite("policy params", &self.data)
    }

    pub fn actor_param_count(&self) -> usize {
        self.layout.actor_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(arch: &PolicyArch) -> Self {
        RecurrentState {
            hidden: vec![0.0; arch.core_hidden],
            cell: vec![0.0; arch.core_hidden],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.hidden.iter().chain(&self.cell).all(|v| *v == 0.0)
    }
}

/// Joint-target offsets (rad) and feedforward torques (N.m).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    pub q_target_offset: Vec<f64>,
    pub tau_ff: Vec<f64>,
}

impl ActionVector {
    pub fn zeros(n: usize) -> Self {
        ActionVector {
            q_target_offset: vec![0.0; n],
            tau_ff: vec![0.0; n],
        }
    }

    /// `bound * tanh(pre)` for the `2n` pre-squash outputs.
    pub fn from_pre_squash(arch: &PolicyArch, pre: &[f64]) -> Self {
        let n = arch.n_joints;
        ActionVector {
            q_target_offset: pre[..n].iter().map(|u| arch.offset_bound * u.tanh()).collect(),
            tau_ff: pre[n..2 * n].iter().map(|u| arch.torque_bound * u.tanh()).collect(),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.q_target_offset.clone();
        v.extend_from_slice(&self.tau_ff);
        v
    }

    pub fn from_vec(n: usize, v: &[f64]) -> Self {
        ActionVector {
            q_target_offset: v[..n].to_vec(),
            tau_ff: v[n..2 * n].to_vec(),
        }
    }

    /// Components divided by their bounds, each in `[-1, 1]`.
    pub fn normalized(&self, arch: &PolicyArch) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .q_target_offset
            .iter()
            .map(|x| x / arch.offset_bound)
            .collect();
        v.extend(self.tau_ff.iter().map(|x| x / arch.torque_bound));
        v
    }

    /// Executes the action through the fixed low-level joint loop:
    /// `kp (q + offset - q) - kd qdot + tau_ff`.
    pub fn torque(&self, observed: &SimState, low_level: &PdGains) -> Vec<f64> {
        (0..self.tau_ff.len())
            .map(|i| {
                low_level.kp[i] * self.q_target_offset[i] - low_level.kd[i] * observed.qdot[i]
                    + self.tau_ff[i]
            })
            .collect()
    }
}

/// Gains of the joint loop that executes policy actions: half the baseline.
pub fn low_level_gains(n: usize) -> PdGains {
    PdGains::default_for(n).scaled(0.5)
}

/// One proprioceptive frame: measured q, qdot and the previous action
/// (normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct ProprioFrame {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub prev_action: Vec<f64>,
}

/// Builds the flat actor observation.
///
/// `history` is ordered oldest to newest and padded to `history_len` by
/// repeating its oldest frame. The command block is the grip-relative
/// transform `relative_pose(command, grip_frame)` with flag 1 while the
/// grip is held, and all zeros otherwise.
pub fn encode_observation(
    arch: &PolicyArch,
    history: &[ProprioFrame],
    command: &TargetCommand,
    grip_frame: Option<&Pose2>,
) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::Empty("proprioceptive history"));
    }
    let n = arch.n_joints;
    let mut obs = Vec::with_capacity(arch.obs_dim());
    let len = arch.history;
    let skip = history.len().saturating_sub(len);
    let kept = &history[skip..];
    let pad = len - kept.len();
    for frame in std::iter::repeat_n(&kept[0], pad).chain(kept.iter()) {
        check_dim("frame q", n, frame.q.len())?;
        check_dim("frame qdot", n, frame.qdot.len())?;
        check_dim("frame action", 2 * n, frame.prev_action.len())?;
        obs.extend_from_slice(&frame.q);
        obs.extend(frame.qdot.iter().map(|v| v * QDOT_SCALE));
        obs.extend_from_slice(&frame.prev_action);
    }
    match (command.grip, grip_frame) {
        (true, Some(frame)) => {
            let rel = relative_pose(&command.pose, frame);
            obs.extend_from_slice(&[rel.p[0] * VR_POS_SCALE, rel.p[1] * VR_POS_SCALE, rel.theta, 1.0]);
        }
        _ => obs.extend_from_slice(&[0.0; VR_DIM]),
    }
    Ok(obs)
}

/// Critic input: actor observation, true wrench and randomized dynamics.
pub fn privileged_observation(
    obs: &[f64],
    wrench: &ExternalWrench,
    params: &DynamicsParams,
    nominal: &DynamicsParams,
) -> Vec<f64> {
    let mut out = obs.to_vec();
    out.push(wrench.force[0] / WRENCH_SCALE);
    out.push(wrench.force[1] / WRENCH_SCALE);
    out.push(wrench.torque / (WRENCH_SCALE * crate::sim::WRENCH_MOMENT_ARM));
    out.extend(params.normalized(nominal).iter().map(|r| r - 1.0));
    out
}

/// Deterministic actor output.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorOutput {
    /// Gaussian mean in pre-squash space.
    pub pre_squash: Vec<f64>,
    pub action: ActionVector,
}

pub fn actor_forward(
    params: &PolicyParams,
    obs: &[f64],
    state: &RecurrentState,
) -> Result<(ActorOutput, RecurrentState)> {
    let arch = &params.arch;
    check_dim("observation", arch.obs_dim(), obs.len())?;
    check_dim("recurrent hidden", arch.core_hidden, state.hidden.len())?;
    check_dim("recurrent cell", arch.core_hidden, state.cell.len())?;
    check_dim("policy params", params.layout.total, params.data.len())?;
    let (pre, next) = net::actor_step(params, obs, state);
    let action = ActionVector::from_pre_squash(arch, &pre);
    Ok((
        ActorOutput {
            pre_squash: pre,
            action,
        },
        next,
    ))
}

pub fn critic_forward(params: &PolicyParams, privileged: &[f64]) -> Result<f64> {
    check_dim(
        "privileged observation",
        params.arch.critic_input_dim(),
        privileged.len(),
    )?;
    Ok(net::critic_value(params, privileged))
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// `ln(1 - tanh(u)^2)`, stable for large `|u|`.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    let a = u.abs();
    2.0 * (LN_2 - a - (-2.0 * a).exp().ln_1p())
}

/// Diagonal Gaussian log density in pre-squash space.
pub fn gaussian_log_prob(sample: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    sample
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) * (-ls).exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

/// Log density of the squashed action: the pre-squash Gaussian density
/// minus `sum ln(bound * (1 - tanh(u)^2))`.
pub fn squashed_log_prob(arch: &PolicyArch, sample_pre: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let correction: f64 = sample_pre
        .iter()
        .zip(arch.bounds())
        .map(|(u, b)| b.ln() + log_one_minus_tanh_sq(*u))
        .sum();
    gaussian_log_prob(sample_pre, mean, log_std) - correction
}

/// Entropy of the pre-squash Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    pub pre_squash: Vec<f64>,
    pub action: ActionVector,
    /// Log density of `action`, including the squashing correction.
    pub log_prob: f64,
}

pub fn sample_action(
    arch: &PolicyArch,
    mean_pre_squash: &[f64],
    log_std: &[f64],
    rng: &mut SimRng,
) -> Result<SampledAction> {
    check_dim("action mean", arch.action_dim(), mean_pre_squash.len())?;
    check_dim("log_std", arch.action_dim(), log_std.len())?;
    check_finite("action mean", mean_pre_squash)?;
    check_finite("log_std", log_std)?;
    let pre: Vec<f64> = mean_pre_squash
        .iter()
        .zip(log_std)
        .map(|(m, ls)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + ls.exp() * eps
        })
        .collect();
    let log_prob = squashed_log_prob(arch, &pre, mean_pre_squash, log_std);
    Ok(SampledAction {
        action: ActionVector::from_pre_squash(arch, &pre),
        pre_squash: pre,
        log_prob,
    })
}

/// Maintains the proprioceptive history, grip frame and previous action
/// needed to build consecutive observations for one episode.
#[derive(Debug, Clone)]
pub struct ObservationBuilder {
    arch: PolicyArch,
    frames: VecDeque<ProprioFrame>,
    grip: GripTracker,
    prev_action: Vec<f64>,
}

impl ObservationBuilder {
    pub fn new(arch: &PolicyArch) -> Self {
        ObservationBuilder {
            arch: arch.clone(),
            frames: VecDeque::with_capacity(arch.history + 1),
            grip: GripTracker::default(),
            prev_action: vec![0.0; arch.action_dim()],
        }
    }

    pub fn reset(&mut self) {
        self.frames.clear();
        self.grip.reset();
        self.prev_action.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn grip_frame(&self) -> Option<Pose2> {
        self.grip.frame()
    }

    pub fn observe(&mut self, observed: &SimState, command: &TargetCommand) -> Result<Vec<f64>> {
        let frame = ProprioFrame {
            q: observed.q.clone(),
            qdot: observed.qdot.clone(),
            prev_action: self.prev_action.clone(),
        };
        if self.frames.len() == self.arch.history {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
        let grip = self.grip.update(command);
        let history: Vec<ProprioFrame> = self.frames.iter().cloned().collect();
        encode_observation(&self.arch, &history, command, grip.as_ref())
    }

    pub fn record_action(&mut self, action: &ActionVector) {
        self.prev_action = action.normalized(&self.arch);
    }
}

/// Runs a policy as a [`Controller`]: deterministic mean actions unless a
/// sampling RNG is attached.
#[derive(Debug, Clone)]
pub struct PolicyController {
    params: Arc<PolicyParams>,
    low_level: PdGains,
    builder: ObservationBuilder,
    state: RecurrentState,
    sampler: Option<SimRng>,
    last_action: Option<ActionVector>,
}

impl PolicyController {
    pub fn new(params: Arc<PolicyParams>) -> Self {
        let arch = params.arch.clone();
        PolicyController {
            low_level: low_level_gains(arch.n_joints),
            builder: ObservationBuilder::new(&arch),
            state: RecurrentState::zeros(&arch),
            params,
            sampler: None,
            last_action: None,
        }
    }

    pub fn with_sampling(mut self, rng: SimRng) -> Self {
        self.sampler = Some(rng);
        self
    }

    pub fn params(&self) -> &Arc<PolicyParams> {
        &self.params
    }

    pub fn last_action(&self) -> Option<&ActionVector> {
        self.last_action.as_ref()
    }

    pub fn recurrent_state(&self) -> &RecurrentState {
        &self.state
    }
}

impl Controller for PolicyController {
    fn reset(&mut self) {
        self.builder.reset();
        self.state = RecurrentState::zeros(&self.params.arch);
        self.last_action = None;
    }

    fn act(&mut self, observed: &SimState, command: &TargetCommand) -> Result<Vec<f64>> {
        let obs = self.builder.observe(observed, command)?;
        let (out, next) = actor_forward(&self.params, &obs, &self.state)?;
        self.state = next;
        let action = match self.sampler.as_mut() {
            Some(rng) => {
                sample_action(&self.params.arch, &out.pre_squash, self.params.log_std(), rng)?.action
            }
            None => out.action,
        };
        self.builder.record_action(&action);
        let torque = action.torque(observed, &self.low_level);
        self.last_action = Some(action);
        Ok(torque)
    }
}
