//! Planar serial-chain geometry: forward kinematics, the geometric Jacobian
//! and SE(2) pose algebra.
//!
//! Every joint is revolute about the plane normal, so the end-effector
//! heading is simply the sum of joint angles.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Geometry and actuation limits of a planar revolute arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainModel {
    pub link_lengths: Vec<f64>,
    pub joint_limits: Vec<(f64, f64)>,
    pub torque_limits: Vec<f64>,
}

impl Default for ChainModel {
    /// Four 0.3 m links, +-2.9 rad joint range, 30 N.m per joint.
    fn default() -> Self {
        ChainModel::uniform(4, 0.3, 2.9, 30.0)
    }
}

impl ChainModel {
    pub fn new(
        link_lengths: Vec<f64>,
        joint_limits: Vec<(f64, f64)>,
        torque_limits: Vec<f64>,
    ) -> Result<Self> {
        let chain = ChainModel {
            link_lengths,
            joint_limits,
            torque_limits,
        };
        chain.validate()?;
        Ok(chain)
    }

    pub fn uniform(n: usize, link: f64, limit: f64, torque: f64) -> Self {
        ChainModel {
            link_lengths: vec![link; n],
            joint_limits: vec![(-limit, limit); n],
            torque_limits: vec![torque; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.link_lengths.len();
        if n == 0 {
            return Err(Error::invalid("chain", "at least one link is required"));
        }
        check_dim("chain joint_limits", n, self.joint_limits.len())?;
        check_dim("chain torque_limits", n, self.torque_limits.len())?;
        if self.link_lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("chain", "link lengths must be positive"));
        }
        if self
            .joint_limits
            .iter()
            .any(|&(lo, hi)| !(lo < hi && lo.is_finite() && hi.is_finite()))
        {
            return Err(Error::invalid("chain", "joint limits need lo < hi"));
        }
        if self.torque_limits.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::invalid("chain", "torque limits must be positive"));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.link_lengths.len()
    }

    /// Distance from the base to the fully stretched end-effector.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    pub fn clamp_to_limits(&self, q: &mut [f64]) {
        for (qi, &(lo, hi)) in q.iter_mut().zip(&self.joint_limits) {
            *qi = qi.clamp(lo, hi);
        }
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.len() == self.n()
            && q
                .iter()
                .zip(&self.joint_limits)
                .all(|(&qi, &(lo, hi))| lo <= qi && qi <= hi)
    }
}

/// Rigid transform in the plane. `theta` is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub p: [f64; 2],
    pub theta: f64,
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 {
        p: [0.0, 0.0],
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2 {
            p: [x, y],
            theta: wrap_angle(theta),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p[0].is_finite() && self.p[1].is_finite() && self.theta.is_finite()
    }

    /// `self * other`: apply `other` in the frame of `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.p[0] + c * other.p[0] - s * other.p[1],
            self.p[1] + s * other.p[0] + c * other.p[1],
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            -(c * self.p[0] + s * self.p[1]),
            -(-s * self.p[0] + c * self.p[1]),
            -self.theta,
        )
    }

    pub fn distance(&self, other: &Pose2) -> f64 {
        (self.p[0] - other.p[0]).hypot(self.p[1] - other.p[1])
    }

    pub fn norm(&self) -> f64 {
        self.p[0].hypot(self.p[1])
    }
}

/// Relative transform between the grip-engage pose and the current pose,
/// composed as `current^-1 * init`.
///
/// Invariant to any rigid transform applied to both poses.
pub fn relative_pose(current: &Pose2, init: &Pose2) -> Pose2 {
    current.inverse().compose(init)
}

/// 3 x n geometric Jacobian, stored row-major: rows are (dx, dy, dtheta).
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian2 {
    n: usize,
    data: Vec<f64>,
}

impl Jacobian2 {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.n..(row + 1) * self.n]
    }

    pub fn column(&self, col: usize) -> [f64; 3] {
        [self.get(0, col), self.get(1, col), self.get(2, col)]
    }

    /// Joint torques produced by an end-effector wrench: `J^T w`.
    pub fn transpose_mul(&self, w: &[f64; 3]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.get(0, i) * w[0] + self.get(1, i) * w[1] + self.get(2, i) * w[2])
            .collect()
    }

    /// `J J^T`, a symmetric 3 x 3 matrix.
    pub fn jjt(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self
                    .row(r)
                    .iter()
                    .zip(self.row(c))
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        out
    }
}

fn check_q(chain: &ChainModel, q: &[f64]) -> Result<()> {
    check_dim("joint vector", chain.n(), q.len())?;
    check_finite("joint vector", q)
}

pub fn forward_kinematics(chain: &ChainModel, q: &[f64]) -> Result<Pose2> {
    check_q(chain, q)?;
    let mut cum = 0.0;
    let (mut x, mut y) = (0.0, 0.0);
    for (l, qi) in chain.link_lengths.iter().zip(q) {
        cum += qi;
        x += l * cum.cos();
        y += l * cum.sin();
    }
    Ok(Pose2::new(x, y, cum))
}

pub fn jacobian(chain: &ChainModel, q: &[f64]) -> Result<Jacobian2> {
    check_q(chain, q)?;
    let n = chain.n();
    let mut cum = 0.0;
    let mut sins = Vec::with_capacity(n);
    let mut coss = Vec::with_capacity(n);
    for (l, qi) in chain.link_lengths.iter().zip(q) {
        cum += qi;
        sins.push(l * cum.sin());
        coss.push(l * cum.cos());
    }
    let mut data = vec![0.0; 3 * n];
    // suffix sums over links k >= i
    let (mut sx, mut sy) = (0.0, 0.0);
    for i in (0..n).rev() {
        sx += sins[i];
        sy += coss[i];
        data[i] = -sx;
        data[n + i] = sy;
        data[2 * n + i] = 1.0;
    }
    Ok(Jacobian2 { n, data })
}
