//! Scripted virtual operator, task definitions and the closed-loop episode
//! runner shared by evaluation, demonstration collection and RL rollouts.
//!
//! Every script starts with grip released and the operator's hand at the
//! arm's home end-effector pose. Grip engages at [`ENGAGE_TIME`] with the
//! command still at home, so the captured grip frame is always the home
//! pose and later commands are expressed relative to it.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::baseline::IkPdController;
use crate::error::{check_dim, Error, Result};
use crate::kinematics::{forward_kinematics, ChainModel, Pose2};
use crate::sim::{
    apply_randomization, noisy_observation, sample_curriculum_wrench, step, DelayLine,
    DynamicsParams, ExternalWrench, RandomizationConfig, SimRng, SimState, CONTROL_DT, SIM_DT,
    SUBSTEPS,
};

/// Time at which scripts press the grip button (s).
pub const ENGAGE_TIME: f64 = 0.2;
/// Delay between grip engage and the reach step (s).
pub const REACH_STEP_DELAY: f64 = 0.1;
/// Fraction of the chain reach every commanded pose must respect.
pub const REACH_MARGIN: f64 = 0.95;

/// Named RNG streams derived from one episode seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Script = 1,
    Dynamics = 2,
    Noise = 3,
    Wrench = 4,
    Latency = 5,
    Push = 6,
    Policy = 7,
}

/// `ChaCha8(seed)` on the given stream; the sub-seed derivation rule.
pub fn stream_rng(seed: u64, stream: Stream) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmId {
    Left,
    #[default]
    Right,
}

/// Operator input for one control tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetCommand {
    pub pose: Pose2,
    pub grip: bool,
    pub trigger: bool,
    pub arm_id: ArmId,
}

impl TargetCommand {
    pub fn new(pose: Pose2, grip: bool) -> Self {
        TargetCommand {
            pose,
            grip,
            trigger: false,
            arm_id: ArmId::Right,
        }
    }
}

/// Captures the commanded pose on the tick the grip is pressed and forgets
/// it on release. Shared by the learned controller and the teleop server.
#[derive(Debug, Clone, Default)]
pub struct GripTracker {
    frame: Option<Pose2>,
}

impl GripTracker {
    pub fn update(&mut self, command: &TargetCommand) -> Option<Pose2> {
        if command.grip {
            Some(*self.frame.get_or_insert(command.pose))
        } else {
            self.frame = None;
            None
        }
    }

    pub fn frame(&self) -> Option<Pose2> {
        self.frame
    }

    pub fn reset(&mut self) {
        self.frame = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reach,
    SinusoidTrack,
    HoldUnderForce,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::Reach,
        TaskKind::SinusoidTrack,
        TaskKind::HoldUnderForce,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Reach => "reach",
            TaskKind::SinusoidTrack => "sinusoid_track",
            TaskKind::HoldUnderForce => "hold_under_force",
        }
    }
}

/// Constant end-effector force switched on at `onset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceProfile {
    pub magnitude: f64,
    /// Direction of the force in the base frame (rad).
    pub direction: f64,
    pub onset: f64,
}

impl ForceProfile {
    pub fn wrench(&self) -> ExternalWrench {
        ExternalWrench::from_force(
            self.magnitude * self.direction.cos(),
            self.magnitude * self.direction.sin(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub duration: f64,
    pub goal_radius: f64,
    pub hold_time: f64,
    pub force_profile: Option<ForceProfile>,
    /// Explicit reach goal; sampled near home when absent.
    pub goal: Option<Pose2>,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        let duration = match kind {
            TaskKind::Reach => 3.0,
            TaskKind::SinusoidTrack => 4.0,
            TaskKind::HoldUnderForce => 3.0,
        };
        TaskSpec {
            kind,
            duration,
            goal_radius: 0.02,
            hold_time: 0.5,
            force_profile: None,
            goal: None,
        }
    }

    pub fn with_force(mut self, profile: ForceProfile) -> Self {
        self.force_profile = Some(profile);
        self
    }

    pub fn ticks(&self) -> usize {
        (self.duration / CONTROL_DT).round() as usize
    }

    pub fn validate(&self, chain: &ChainModel) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::invalid("task", "duration must be positive"));
        }
        if !(self.goal_radius > 0.0 && self.hold_time >= 0.0) {
            return Err(Error::invalid("task", "goal_radius > 0 and hold_time >= 0 required"));
        }
        if let Some(goal) = &self.goal {
            check_reach(chain, goal)?;
        }
        Ok(())
    }
}

fn check_reach(chain: &ChainModel, pose: &Pose2) -> Result<()> {
    // a single link always sits at full extension
    let margin = if chain.n() == 1 { 1.0 + 1e-9 } else { REACH_MARGIN };
    let limit = margin * chain.reach();
    let distance = pose.norm();
    if !pose.is_finite() || distance > limit {
        return Err(Error::Unreachable { distance, limit });
    }
    Ok(())
}

pub fn default_home(n: usize) -> Vec<f64> {
    if n == 4 {
        vec![-0.5, 1.2, 0.8, 0.3]
    } else {
        vec![0.4; n]
    }
}

/// Samples the operator's command stream, one command per control tick.
pub fn generate_script(
    task: &TaskSpec,
    chain: &ChainModel,
    home_q: &[f64],
    seed: u64,
) -> Result<Vec<TargetCommand>> {
    task.validate(chain)?;
    check_dim("home configuration", chain.n(), home_q.len())?;
    let anchor = forward_kinematics(chain, home_q)?;
    check_reach(chain, &anchor)?;
    let mut rng = stream_rng(seed, Stream::Script);
    let engage_tick = (ENGAGE_TIME / CONTROL_DT).round() as usize;
    let ticks = task.ticks();

    let script: Vec<TargetCommand> = match task.kind {
        TaskKind::Reach => {
            let goal = match task.goal {
                Some(goal) => goal,
                None => {
                    let mut q: Vec<f64> = home_q
                        .iter()
                        .map(|q| q + rng.random_range(-0.3..=0.3))
                        .collect();
                    chain.clamp_to_limits(&mut q);
                    forward_kinematics(chain, &q)?
                }
            };
            let step_tick = engage_tick + (REACH_STEP_DELAY / CONTROL_DT).round() as usize;
            (0..ticks)
                .map(|k| {
                    let pose = if k >= step_tick { goal } else { anchor };
                    TargetCommand::new(pose, k >= engage_tick)
                })
                .collect()
        }
        TaskKind::SinusoidTrack => {
            let amplitude = rng.random_range(0.06..=0.15);
            let omega = rng.random_range(1.0..=2.0);
            let phase = rng.random_range(-PI..PI);
            let spin = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let (sp, cp) = phase.sin_cos();
            // circle through the anchor at t = engage
            let center = [anchor.p[0] - amplitude * cp, anchor.p[1] - amplitude * sp];
            (0..ticks)
                .map(|k| {
                    let t = k as f64 * CONTROL_DT - ENGAGE_TIME;
                    if k < engage_tick {
                        return TargetCommand::new(anchor, false);
                    }
                    let angle = phase + spin * omega * t;
                    let pose = Pose2::new(
                        center[0] + amplitude * angle.cos(),
                        center[1] + amplitude * angle.sin(),
                        anchor.theta,
                    );
                    TargetCommand::new(pose, true)
                })
                .collect()
        }
        TaskKind::HoldUnderForce => (0..ticks)
            .map(|k| TargetCommand::new(anchor, k >= engage_tick))
            .collect(),
    };
    for cmd in &script {
        check_reach(chain, &cmd.pose)?;
    }
    Ok(script)
}

/// How training-time curriculum forces evolve within an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrenchMode {
    PerStep,
    /// Hold each sampled wrench for `period` seconds.
    Held { period: f64 },
}

impl Default for WrenchMode {
    fn default() -> Self {
        WrenchMode::Held { period: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumForce {
    pub alpha: f64,
    pub f_max: f64,
    pub mode: WrenchMode,
}

/// Everything about an episode that is not the task itself.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub home_q: Vec<f64>,
    pub nominal: DynamicsParams,
    pub randomization: RandomizationConfig,
    pub curriculum: Option<CurriculumForce>,
}

impl EpisodeConfig {
    pub fn new(chain: &ChainModel, randomization: RandomizationConfig) -> Self {
        EpisodeConfig {
            home_q: default_home(chain.n()),
            nominal: DynamicsParams::nominal(chain.n()),
            randomization,
            curriculum: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub state: SimState,
    pub command: TargetCommand,
    pub torque: Vec<f64>,
    pub wrench: ExternalWrench,
    pub ee: Pose2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub records: Vec<TickRecord>,
    /// Set when the episode was aborted on a non-finite state.
    pub failed: bool,
}

impl Trajectory {
    pub fn csv_header(n: usize) -> Vec<String> {
        let mut cols = vec!["tick".to_string(), "time_s".to_string()];
        cols.extend((0..n).map(|i| format!("q{i}")));
        cols.extend((0..n).map(|i| format!("qdot{i}")));
        cols.extend(
            ["target_x", "target_y", "target_theta", "grip", "trigger"]
                .iter()
                .map(|s| s.to_string()),
        );
        cols.extend((0..n).map(|i| format!("tau{i}")));
        cols.extend(
            ["force_x", "force_y", "wrench_torque", "ee_x", "ee_y", "ee_theta"]
                .iter()
                .map(|s| s.to_string()),
        );
        cols
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.records.first().map_or(0, |r| r.state.q.len());
        writeln!(out, "{}", Self::csv_header(n).join(","))?;
        for (k, r) in self.records.iter().enumerate() {
            let mut row = vec![k.to_string(), format!("{:.4}", r.state.time)];
            row.extend(r.state.q.iter().map(|v| format!("{v:.9}")));
            row.extend(r.state.qdot.iter().map(|v| format!("{v:.9}")));
            row.push(format!("{:.9}", r.command.pose.p[0]));
            row.push(format!("{:.9}", r.command.pose.p[1]));
            row.push(format!("{:.9}", r.command.pose.theta));
            row.push((r.command.grip as u8).to_string());
            row.push((r.command.trigger as u8).to_string());
            row.extend(r.torque.iter().map(|v| format!("{v:.9}")));
            row.push(format!("{:.9}", r.wrench.force[0]));
            row.push(format!("{:.9}", r.wrench.force[1]));
            row.push(format!("{:.9}", r.wrench.torque));
            row.push(format!("{:.9}", r.ee.p[0]));
            row.push(format!("{:.9}", r.ee.p[1]));
            row.push(format!("{:.9}", r.ee.theta));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// What a controller sees on one tick: noisy joint readings and the
/// (possibly delayed) operator command.
#[derive(Debug, Clone, PartialEq)]
pub struct TickInput {
    pub observed: SimState,
    pub command: TargetCommand,
}

pub trait Controller {
    fn reset(&mut self);
    /// Joint torques for this tick.
    fn act(&mut self, observed: &SimState, command: &TargetCommand) -> Result<Vec<f64>>;
}

impl Controller for IkPdController {
    fn reset(&mut self) {
        IkPdController::reset(self)
    }

    fn act(&mut self, observed: &SimState, command: &TargetCommand) -> Result<Vec<f64>> {
        IkPdController::act(self, command, observed)
    }
}

/// Always outputs zero torque.
#[derive(Debug, Clone)]
pub struct ZeroController {
    pub n: usize,
}

impl Controller for ZeroController {
    fn reset(&mut self) {}

    fn act(&mut self, _observed: &SimState, _command: &TargetCommand) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.n])
    }
}

/// Replays a fixed torque sequence, then zeros.
#[derive(Debug, Clone)]
pub struct ReplayController {
    torques: Vec<Vec<f64>>,
    tick: usize,
}

impl ReplayController {
    pub fn new(torques: Vec<Vec<f64>>) -> Self {
        ReplayController { torques, tick: 0 }
    }
}

impl Controller for ReplayController {
    fn reset(&mut self) {
        self.tick = 0;
    }

    fn act(&mut self, observed: &SimState, _command: &TargetCommand) -> Result<Vec<f64>> {
        let out = self
            .torques
            .get(self.tick)
            .cloned()
            .unwrap_or_else(|| vec![0.0; observed.q.len()]);
        self.tick += 1;
        Ok(out)
    }
}

/// Push impulse currently acting on one joint.
#[derive(Debug, Clone, Copy)]
struct Push {
    joint: usize,
    torque: f64,
    ticks_left: usize,
}

const PUSH_TICKS: usize = 5;

/// One closed-loop episode, advanced a control tick at a time.
#[derive(Debug, Clone)]
pub struct Episode {
    chain: ChainModel,
    task: TaskSpec,
    nominal: DynamicsParams,
    params: DynamicsParams,
    script: Vec<TargetCommand>,
    state: SimState,
    tick: usize,
    delay: DelayLine<TargetCommand>,
    noise_std: f64,
    noise_rng: SimRng,
    wrench_rng: SimRng,
    push_rng: SimRng,
    push_torque: f64,
    push_rate: f64,
    push: Option<Push>,
    curriculum: Option<CurriculumForce>,
    curriculum_wrench: ExternalWrench,
    next_resample: f64,
    current_wrench: ExternalWrench,
    pending: Option<TickInput>,
    records: Vec<TickRecord>,
    failed: bool,
}

impl Episode {
    pub fn new(chain: &ChainModel, task: &TaskSpec, config: &EpisodeConfig, seed: u64) -> Result<Self> {
        config.randomization.validate()?;
        config.nominal.validate()?;
        check_dim("nominal dynamics", chain.n(), config.nominal.n())?;
        let script = generate_script(task, chain, &config.home_q, seed)?;
        let params = apply_randomization(
            &config.nominal,
            &config.randomization,
            &mut stream_rng(seed, Stream::Dynamics),
        );
        let latency = config
            .randomization
            .sample_latency(&mut stream_rng(seed, Stream::Latency));
        let mut home = config.home_q.clone();
        chain.clamp_to_limits(&mut home);
        Ok(Episode {
            chain: chain.clone(),
            task: task.clone(),
            nominal: config.nominal.clone(),
            params,
            script,
            state: SimState::at_rest(home),
            tick: 0,
            delay: DelayLine::new(latency),
            noise_std: config.randomization.encoder_noise_std,
            noise_rng: stream_rng(seed, Stream::Noise),
            wrench_rng: stream_rng(seed, Stream::Wrench),
            push_rng: stream_rng(seed, Stream::Push),
            push_torque: config.randomization.push_torque,
            push_rate: config.randomization.push_rate,
            push: None,
            curriculum: config.curriculum,
            curriculum_wrench: ExternalWrench::ZERO,
            next_resample: 0.0,
            current_wrench: ExternalWrench::ZERO,
            pending: None,
            records: Vec::with_capacity(task.ticks()),
            failed: false,
        })
    }

    pub fn chain(&self) -> &ChainModel {
        &self.chain
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn is_done(&self) -> bool {
        self.failed || self.tick >= self.script.len()
    }

    pub fn tick(&self) -> usize {
        self.tick
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }

    pub fn failed(&self) -> bool {
        self.failed
    }

    pub fn true_state(&self) -> &SimState {
        &self.state
    }

    pub fn params(&self) -> &DynamicsParams {
        &self.params
    }

    pub fn nominal(&self) -> &DynamicsParams {
        &self.nominal
    }

    /// Wrench acting during the current tick (valid after [`Episode::begin_tick`]).
    pub fn wrench(&self) -> ExternalWrench {
        self.current_wrench
    }

    /// Undelayed operator command for the current tick.
    pub fn operator_command(&self) -> &TargetCommand {
        &self.script[self.tick.min(self.script.len() - 1)]
    }

    pub fn latency(&self) -> usize {
        self.delay.latency()
    }

    pub fn records(&self) -> &[TickRecord] {
        &self.records
    }

    fn update_wrench(&mut self) {
        let t = self.state.time;
        if let Some(cur) = self.curriculum {
            match cur.mode {
                WrenchMode::PerStep => {
                    self.curriculum_wrench =
                        sample_curriculum_wrench(cur.alpha, cur.f_max, &mut self.wrench_rng)
                }
                WrenchMode::Held { period } => {
                    if t + 1e-9 >= self.next_resample {
                        self.curriculum_wrench =
                            sample_curriculum_wrench(cur.alpha, cur.f_max, &mut self.wrench_rng);
                        self.next_resample += period.max(CONTROL_DT);
                    }
                }
            }
        }
        let mut w = self.curriculum_wrench;
        if let Some(profile) = &self.task.force_profile {
            if t + 1e-9 >= profile.onset {
                let f = profile.wrench();
                w.force[0] += f.force[0];
                w.force[1] += f.force[1];
                w.torque += f.torque;
            }
        }
        self.current_wrench = w;
    }

    fn update_push(&mut self) -> Option<Push> {
        if let Some(p) = self.push.as_mut() {
            p.ticks_left -= 1;
            if p.ticks_left == 0 {
                self.push = None;
            }
        }
        if self.push.is_none()
            && self.push_torque > 0.0
            && self.push_rng.random_bool((self.push_rate * CONTROL_DT).min(1.0))
        {
            self.push = Some(Push {
                joint: self.push_rng.random_range(0..self.chain.n()),
                torque: self.push_rng.random_range(-self.push_torque..=self.push_torque),
                ticks_left: PUSH_TICKS,
            });
        }
        self.push
    }

    /// Starts a tick: samples disturbances and returns what the controller
    /// observes. Idempotent until [`Episode::apply`] is called.
    pub fn begin_tick(&mut self) -> TickInput {
        if let Some(p) = &self.pending {
            return p.clone();
        }
        self.update_wrench();
        let command = self.delay.push(*self.operator_command());
        let observed = noisy_observation(&self.state, self.noise_std, &mut self.noise_rng);
        let input = TickInput { observed, command };
        self.pending = Some(input.clone());
        input
    }

    /// Applies the controller torque for this tick and advances the physics
    /// by [`SUBSTEPS`] steps. A non-finite state marks the episode failed.
    pub fn apply(&mut self, torque: &[f64]) -> Result<&TickRecord> {
        if self.is_done() {
            return Err(Error::invalid("episode", "already finished"));
        }
        check_dim("controller torque", self.chain.n(), torque.len())?;
        if self.pending.is_none() {
            self.begin_tick();
        }
        self.pending = None;
        let clamped: Vec<f64> = torque
            .iter()
            .zip(&self.chain.torque_limits)
            .map(|(t, lim)| if t.is_finite() { t.clamp(-lim, *lim) } else { *t })
            .collect();
        let mut applied = clamped.clone();
        if let Some(p) = self.update_push() {
            applied[p.joint] += p.torque;
        }
        let ee = forward_kinematics(&self.chain, &self.state.q)?;
        let record = TickRecord {
            state: self.state.clone(),
            command: *self.operator_command(),
            torque: clamped,
            wrench: self.current_wrench,
            ee,
        };
        let mut state = self.state.clone();
        for _ in 0..SUBSTEPS {
            match step(&state, &applied, &self.current_wrench, &self.params, SIM_DT, &self.chain) {
                Ok(next) if next.is_finite() => state = next,
                _ => {
                    self.failed = true;
                    break;
                }
            }
        }
        if !self.failed {
            self.state = state;
        }
        self.records.push(record);
        self.tick += 1;
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn into_trajectory(self) -> Trajectory {
        Trajectory {
            dt: CONTROL_DT,
            records: self.records,
            failed: self.failed,
        }
    }
}

/// Runs one full episode of `controller` on `task`.
pub fn run_episode(
    controller: &mut dyn Controller,
    chain: &ChainModel,
    task: &TaskSpec,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<Trajectory> {
    let mut episode = Episode::new(chain, task, config, seed)?;
    controller.reset();
    while !episode.is_done() {
        let input = episode.begin_tick();
        let torque = match controller.act(&input.observed, &input.command) {
            Ok(t) => t,
            Err(Error::NonFinite(_)) => {
                let mut traj = episode.into_trajectory();
                traj.failed = true;
                return Ok(traj);
            }
            Err(e) => return Err(e),
        };
        if torque.iter().any(|t| !t.is_finite()) {
            let mut traj = episode.into_trajectory();
            traj.failed = true;
            return Ok(traj);
        }
        episode.apply(&torque)?;
    }
    Ok(episode.into_trajectory())
}

/// Task success: reach and hold require the end-effector to stay within
/// `goal_radius` (inclusive) for the final `hold_time`; sinusoid tracking
/// requires mean engaged tracking error below 5 cm.
pub fn success(trajectory: &Trajectory, task: &TaskSpec) -> bool {
    let records = &trajectory.records;
    if records.is_empty() || trajectory.failed {
        return false;
    }
    match task.kind {
        TaskKind::Reach | TaskKind::HoldUnderForce => {
            let window = (task.hold_time / trajectory.dt).round() as usize;
            if window > records.len() {
                return false;
            }
            records[records.len() - window..]
                .iter()
                .all(|r| r.ee.distance(&r.command.pose) <= task.goal_radius)
        }
        TaskKind::SinusoidTrack => {
            let engaged: Vec<f64> = records
                .iter()
                .filter(|r| r.command.grip)
                .map(|r| r.ee.distance(&r.command.pose))
                .collect();
            !engaged.is_empty() && engaged.iter().sum::<f64>() / (engaged.len() as f64) < 0.05
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{IkConfig, PdGains};

    fn chain() -> ChainModel {
        ChainModel::default()
    }

    #[test]
    fn reach_script_shape() {
        let c = chain();
        let task = TaskSpec::new(TaskKind::Reach);
        let script = generate_script(&task, &c, &default_home(4), 11).unwrap();
        assert_eq!(script.len(), 150);
        let engage = (ENGAGE_TIME / CONTROL_DT).round() as usize;
        assert!(script[..engage].iter().all(|c| !c.grip));
        assert!(script[engage..].iter().all(|c| c.grip));
        let last = script.last().unwrap().pose;
        let step = engage + 5;
        assert!(script[step..].iter().all(|c| c.pose == last));
        // the grip frame is the home pose
        let home = forward_kinematics(&c, &default_home(4)).unwrap();
        assert_eq!(script[engage].pose, home);
    }

    #[test]
    fn explicit_goal_outside_reach_is_rejected() {
        let c = chain();
        let mut task = TaskSpec::new(TaskKind::Reach);
        task.goal = Some(Pose2::new(1.19, 0.0, 0.0));
        assert!(matches!(
            generate_script(&task, &c, &default_home(4), 0),
            Err(Error::Unreachable { .. })
        ));
    }

    #[test]
    fn sinusoid_speed_below_fast_motion_regime() {
        let c = chain();
        let task = TaskSpec::new(TaskKind::SinusoidTrack);
        for seed in 0..50 {
            let script = generate_script(&task, &c, &default_home(4), seed).unwrap();
            let vmax = script
                .windows(2)
                .filter(|w| w[0].grip && w[1].grip)
                .map(|w| w[0].pose.distance(&w[1].pose) / CONTROL_DT)
                .fold(0.0, f64::max);
            assert!(vmax <= 0.3 + 1e-9 && vmax < 1.5, "vmax {vmax}");
        }
        // sampling bounds: A <= 0.15 <= 0.3 reach and omega <= 2
        assert!(0.15 * 2.0 <= 0.72);
    }

    #[test]
    fn script_determinism() {
        let c = chain();
        for kind in TaskKind::ALL {
            let task = TaskSpec::new(kind);
            let a = generate_script(&task, &c, &default_home(4), 5).unwrap();
            let b = generate_script(&task, &c, &default_home(4), 5).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_controller_keeps_arm_at_rest() {
        let c = chain();
        let cfg = EpisodeConfig::new(&c, RandomizationConfig::disabled());
        let task = TaskSpec::new(TaskKind::Reach);
        let traj = run_episode(&mut ZeroController { n: 4 }, &c, &task, &cfg, 1).unwrap();
        for r in &traj.records {
            assert_eq!(r.state.q, cfg.home_q);
            assert!(r.state.qdot.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn baseline_reaches_without_force() {
        let c = chain();
        let cfg = EpisodeConfig::new(&c, RandomizationConfig::default());
        let task = TaskSpec::new(TaskKind::Reach);
        let mut ctl = IkPdController::new(c.clone(), PdGains::default_for(4), IkConfig::default());
        for seed in 0..5 {
            let traj = run_episode(&mut ctl, &c, &task, &cfg, seed).unwrap();
            assert!(success(&traj, &task), "seed {seed}");
        }
    }

    #[test]
    fn episodes_are_deterministic() {
        let c = chain();
        let mut cfg = EpisodeConfig::new(&c, RandomizationConfig::default());
        cfg.curriculum = Some(CurriculumForce {
            alpha: 0.5,
            f_max: 20.0,
            mode: WrenchMode::default(),
        });
        cfg.randomization.push_torque = 2.0;
        let task = TaskSpec::new(TaskKind::SinusoidTrack);
        let mut ctl = IkPdController::new(c.clone(), PdGains::default_for(4), IkConfig::default());
        let a = run_episode(&mut ctl, &c, &task, &cfg, 42).unwrap();
        let b = run_episode(&mut ctl, &c, &task, &cfg, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grip_tracker_captures_on_engage() {
        let mut g = GripTracker::default();
        let a = Pose2::new(0.1, 0.2, 0.3);
        let b = Pose2::new(0.4, 0.2, 0.3);
        assert_eq!(g.update(&TargetCommand::new(a, false)), None);
        assert_eq!(g.update(&TargetCommand::new(a, true)), Some(a));
        assert_eq!(g.update(&TargetCommand::new(b, true)), Some(a));
        assert_eq!(g.update(&TargetCommand::new(b, false)), None);
        assert_eq!(g.update(&TargetCommand::new(b, true)), Some(b));
    }

    fn synthetic(offsets: &[f64]) -> Trajectory {
        let target = Pose2::new(0.0, 0.0, 0.0);
        Trajectory {
            dt: CONTROL_DT,
            failed: false,
            records: offsets
                .iter()
                .enumerate()
                .map(|(k, d)| TickRecord {
                    state: SimState {
                        q: vec![0.0],
                        qdot: vec![0.0],
                        time: k as f64 * CONTROL_DT,
                    },
                    command: TargetCommand::new(target, true),
                    torque: vec![0.0],
                    wrench: ExternalWrench::ZERO,
                    ee: Pose2::new(*d, 0.0, 0.0),
                })
                .collect(),
        }
    }

    #[test]
    fn success_rules() {
        let task = TaskSpec::new(TaskKind::Reach);
        assert!(success(&synthetic(&[0.0; 100]), &task));
        assert!(!success(&synthetic(&[0.1; 100]), &task));

        // exactly at the radius for exactly the hold window: closed threshold
        let mut offsets = vec![0.05; 75];
        offsets.extend(vec![0.02; 25]);
        assert!(success(&synthetic(&offsets), &task));
        let mut offsets = vec![0.05; 76];
        offsets.extend(vec![0.02; 24]);
        assert!(!success(&synthetic(&offsets), &task));

        let sin = TaskSpec::new(TaskKind::SinusoidTrack);
        assert!(success(&synthetic(&[0.04; 50]), &sin));
        assert!(!success(&synthetic(&[0.06; 50]), &sin));
    }
}
