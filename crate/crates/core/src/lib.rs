//! Desk-scale neural teleoperation workbench: a planar arm simulator, the
//! IK+PD teleoperation baseline, a recurrent actor-critic policy and the
//! behavior-cloning / PPO / force-curriculum training pipeline.

pub mod baseline;
pub mod error;
pub mod kinematics;
pub mod policy;
pub mod rewards;
pub mod sim;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
