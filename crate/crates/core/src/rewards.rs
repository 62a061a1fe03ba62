//! Per-step reward terms for RL fine-tuning and per-episode evaluation
//! metrics.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{wrap_angle, Pose2};
use crate::tasks::{success, TaskSpec, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub w_track: f64,
    pub w_smooth: f64,
    pub w_energy: f64,
    pub lambda_rot: f64,
    pub lambda_jerk: f64,
}

impl Default for RewardWeights {
    /// Scaled for SI units at desk scale: 5 cm of tracking error costs about
    /// as much as 5 rad/s^2 of joint acceleration or 8 N.m of torque.
    /// A larger smoothness weight lets exploration noise drown the
    /// tracking signal during PPO.
    fn default() -> Self {
        RewardWeights {
            w_track: 100.0,
            w_smooth: 0.01,
            w_energy: 0.004,
            lambda_rot: 0.1,
            lambda_jerk: 1e-4,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_track,
            self.w_smooth,
            self.w_energy,
            self.lambda_rot,
            self.lambda_jerk,
        ];
        if all.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("reward weights", "all weights must be >= 0"))
        }
    }
}

/// `-|p_ee - p_target|^2 - lambda_rot * wrap(theta_ee - theta_target)^2`.
pub fn reward_tracking(ee: &Pose2, target: &Pose2, lambda_rot: f64) -> f64 {
    let dx = ee.p[0] - target.p[0];
    let dy = ee.p[1] - target.p[1];
    let dtheta = wrap_angle(ee.theta - target.theta);
    -(dx * dx + dy * dy) - lambda_rot * dtheta * dtheta
}

/// Sliding window of the last four joint-position frames.
#[derive(Debug, Clone)]
pub struct DerivativeBuffer {
    dt: f64,
    frames: VecDeque<Vec<f64>>,
}

impl DerivativeBuffer {
    pub const LEN: usize = 4;

    pub fn new(dt: f64) -> Self {
        DerivativeBuffer {
            dt,
            frames: VecDeque::with_capacity(Self::LEN),
        }
    }

    pub fn push(&mut self, q: &[f64]) {
        if self.frames.len() == Self::LEN {
            self.frames.pop_front();
        }
        self.frames.push_back(q.to_vec());
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn is_full(&self) -> bool {
        self.frames.len() == Self::LEN
    }

    /// Backward second difference at the newest frame; zeros until full.
    pub fn acceleration(&self) -> Vec<f64> {
        if !self.is_full() {
            return vec![0.0; self.frames.back().map_or(0, Vec::len)];
        }
        let (q0, q1, q2) = (&self.frames[3], &self.frames[2], &self.frames[1]);
        let k = 1.0 / (self.dt * self.dt);
        (0..q0.len())
            .map(|i| (q0[i] - 2.0 * q1[i] + q2[i]) * k)
            .collect()
    }

    /// Backward third difference at the newest frame; zeros until full.
    pub fn jerk(&self) -> Vec<f64> {
        if !self.is_full() {
            return vec![0.0; self.frames.back().map_or(0, Vec::len)];
        }
        let f = &self.frames;
        let k = 1.0 / (self.dt * self.dt * self.dt);
        (0..f[3].len())
            .map(|i| (f[3][i] - 3.0 * f[2][i] + 3.0 * f[1][i] - f[0][i]) * k)
            .collect()
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `-|qddot|^2 - lambda_jerk * |qdddot|^2`, zero until the buffer is full.
pub fn reward_smoothness(buffer: &DerivativeBuffer, lambda_jerk: f64) -> f64 {
    if !buffer.is_full() {
        return 0.0;
    }
    -sq_norm(&buffer.acceleration()) - lambda_jerk * sq_norm(&buffer.jerk())
}

pub fn reward_energy(torque: &[f64]) -> f64 {
    -sq_norm(torque)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    pub track: f64,
    pub smooth: f64,
    pub energy: f64,
}

impl RewardTerms {
    pub fn add(&mut self, other: &RewardTerms) {
        self.track += other.track;
        self.smooth += other.smooth;
        self.energy += other.energy;
    }
}

pub fn total_reward(terms: &RewardTerms, weights: &RewardWeights) -> f64 {
    weights.w_track * terms.track + weights.w_smooth * terms.smooth + weights.w_energy * terms.energy
}

/// Per-episode evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean end-effector position error over grip-engaged ticks (m).
    pub e_track: f64,
    /// Mean absolute heading error over grip-engaged ticks (rad).
    pub e_rot: f64,
    /// Mean joint-acceleration norm (rad/s^2).
    pub smoothness: f64,
    pub success: bool,
    /// Mean joint-torque norm (N.m).
    pub mean_torque: f64,
    pub episode_length: usize,
}

impl MetricsReport {
    /// Column order of [`MetricsReport::csv_row`].
    pub const CSV_HEADER: [&'static str; 6] = [
        "e_track_m",
        "e_rot_rad",
        "smoothness",
        "success",
        "mean_torque_nm",
        "episode_length",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            format!("{:.9}", self.e_track),
            format!("{:.9}", self.e_rot),
            format!("{:.9}", self.smoothness),
            (self.success as u8).to_string(),
            format!("{:.9}", self.mean_torque),
            self.episode_length.to_string(),
        ]
    }
}

/// Mean `|qddot|` by central second differences of a position series.
pub fn mean_acceleration_norm(positions: &[&[f64]], dt: f64) -> f64 {
    if positions.len() < 3 {
        return 0.0;
    }
    let k = 1.0 / (dt * dt);
    let total: f64 = positions
        .windows(3)
        .map(|w| {
            w[1].iter()
                .enumerate()
                .map(|(i, q)| {
                    let a = (w[2][i] - 2.0 * q + w[0][i]) * k;
                    a * a
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / (positions.len() - 2) as f64
}

pub fn evaluate_episode(trajectory: &Trajectory, task: &TaskSpec) -> Result<MetricsReport> {
    let records = &trajectory.records;
    if records.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let mut pos_err = 0.0;
    let mut rot_err = 0.0;
    let mut engaged = 0usize;
    for r in records.iter().filter(|r| r.command.grip) {
        pos_err += r.ee.distance(&r.command.pose);
        rot_err += wrap_angle(r.ee.theta - r.command.pose.theta).abs();
        engaged += 1;
    }
    let (e_track, e_rot) = if engaged > 0 {
        (pos_err / engaged as f64, rot_err / engaged as f64)
    } else {
        (0.0, 0.0)
    };
    let positions: Vec<&[f64]> = records.iter().map(|r| r.state.q.as_slice()).collect();
    let smoothness = mean_acceleration_norm(&positions, trajectory.dt);
    let mean_torque =
        records.iter().map(|r| sq_norm(&r.torque).sqrt()).sum::<f64>() / records.len() as f64;
    Ok(MetricsReport {
        e_track,
        e_rot,
        smoothness,
        success: !trajectory.failed && success(trajectory, task),
        mean_torque,
        episode_length: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn tracking_reward_values() {
        let a = Pose2::new(0.2, 0.3, 0.4);
        assert_eq!(reward_tracking(&a, &a, 0.5), 0.0);
        let b = Pose2::new(0.3, 0.3, 0.4);
        assert!((reward_tracking(&a, &b, 0.5) + 0.01).abs() < 1e-15);
        let c = Pose2::new(0.2, 0.3, 0.4 + PI / 2.0);
        let expected = -0.5 * (PI / 2.0) * (PI / 2.0);
        assert!((reward_tracking(&a, &c, 0.5) - expected).abs() < 1e-12);
        assert!((expected + 1.2337).abs() < 1e-4);
    }

    #[test]
    fn smoothness_zero_on_constant_and_linear() {
        let mut buf = DerivativeBuffer::new(0.02);
        assert_eq!(reward_smoothness(&buf, 0.1), 0.0);
        for _ in 0..6 {
            buf.push(&[0.3, -0.1]);
        }
        assert!(reward_smoothness(&buf, 0.1).abs() < 1e-12);
        let mut buf = DerivativeBuffer::new(0.02);
        for k in 0..6 {
            let t = k as f64 * 0.02;
            buf.push(&[0.5 * t, -2.0 * t]);
        }
        assert!(reward_smoothness(&buf, 0.1).abs() < 1e-9);
    }

    #[test]
    fn quadratic_acceleration_exact() {
        let dt = 0.02;
        let a = [1.5, -0.7];
        let mut buf = DerivativeBuffer::new(dt);
        for k in 0..4 {
            let t = k as f64 * dt;
            buf.push(&[0.5 * a[0] * t * t, 0.5 * a[1] * t * t]);
        }
        let acc = buf.acceleration();
        assert!((acc[0] - a[0]).abs() < 1e-9 && (acc[1] - a[1]).abs() < 1e-9);
        let r = reward_smoothness(&buf, 0.1);
        assert!((r + (a[0] * a[0] + a[1] * a[1])).abs() < 1e-6);
    }

    #[test]
    fn energy_and_total() {
        assert_eq!(reward_energy(&[0.0, 0.0]), 0.0);
        assert_eq!(reward_energy(&[3.0, 4.0]), -25.0);
        let terms = RewardTerms {
            track: -0.3,
            smooth: -2.0,
            energy: -7.0,
        };
        let w = RewardWeights {
            w_track: 1.0,
            w_smooth: 0.0,
            w_energy: 0.0,
            ..Default::default()
        };
        assert_eq!(total_reward(&terms, &w), -0.3);
        assert_eq!(total_reward(&RewardTerms::default(), &RewardWeights::default()), 0.0);
        let w = RewardWeights {
            w_track: 2.0,
            w_smooth: 0.5,
            w_energy: 0.25,
            ..Default::default()
        };
        assert_eq!(total_reward(&terms, &w), 2.0 * -0.3 + 0.5 * -2.0 + 0.25 * -7.0);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = RewardWeights {
            w_smooth: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
