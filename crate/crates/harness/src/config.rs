//! Experiment configuration: one TOML document with a section per module.
//!
//! Every section and field is optional and falls back to the desk defaults;
//! unknown keys anywhere are an error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use teleforge_core::baseline::{IkConfig, PdGains};
use teleforge_core::kinematics::ChainModel;
use teleforge_core::policy::PolicyArch;
use teleforge_core::rewards::RewardWeights;
use teleforge_core::sim::{DynamicsParams, RandomizationConfig};
use teleforge_core::tasks::{default_home, TaskKind, WrenchMode};
use teleforge_core::training::{BcConfig, CurriculumSchedule, DemoConfig, PipelineConfig, PpoConfig};

use crate::HarnessError;

/// The checked-in default, also compiled in so `--config default` works
/// from any directory.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    pub link_lengths: Vec<f64>,
    /// Symmetric joint range (rad).
    pub joint_limit: f64,
    /// Per-joint torque limit (N.m).
    pub torque_limit: f64,
}

impl Default for ChainSection {
    fn default() -> Self {
        ChainSection {
            link_lengths: vec![0.3; 4],
            joint_limit: 2.9,
            torque_limit: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// Nominal per-joint inertia (kg.m^2).
    pub inertia: f64,
    /// Nominal per-joint viscous damping (N.m.s/rad).
    pub damping: f64,
    /// Joint configuration every episode starts from; empty picks the
    /// built-in home pose.
    pub home_q: Vec<f64>,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            inertia: DynamicsParams::NOMINAL_INERTIA,
            damping: DynamicsParams::NOMINAL_DAMPING,
            home_q: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    /// Proportional gain; `kd` is chosen for critical damping.
    pub kp: f64,
    pub ik: IkConfig,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            kp: PdGains::DEFAULT_KP,
            ik: IkConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub init_log_std: f64,
    pub rl_log_std: f64,
    pub demo: DemoConfig,
    pub bc: BcConfig,
    /// Stage 2; `total_updates` counts its updates.
    pub ppo: PpoConfig,
    /// Stage 3 update count.
    pub curriculum_updates: usize,
    pub tasks: Vec<TaskKind>,
    pub weights: RewardWeights,
    pub wrench_mode: WrenchMode,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let p = PipelineConfig::desk(ChainModel::default());
        TrainingSection {
            init_log_std: p.init_log_std,
            rl_log_std: p.rl_log_std,
            demo: p.demo,
            bc: p.bc,
            ppo: p.ppo,
            curriculum_updates: p.curriculum_updates,
            tasks: p.tasks,
            weights: p.weights,
            wrench_mode: p.wrench_mode,
        }
    }
}

/// Evaluation protocol shared by `eval`, `compare` and `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub tasks: Vec<TaskKind>,
    /// Evaluation seeds per task and condition.
    pub seeds: usize,
    /// Held force of the force condition as a fraction of `curriculum.f_max`.
    pub force_fraction: f64,
    /// Time the held force switches on (s).
    pub force_onset: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            tasks: TaskKind::ALL.to_vec(),
            seeds: 5,
            force_fraction: 0.4,
            force_onset: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub chain: ChainSection,
    pub sim: SimSection,
    pub baseline: BaselineSection,
    pub policy: PolicyArch,
    pub training: TrainingSection,
    pub task: TaskSection,
    pub curriculum: CurriculumSchedule,
    pub randomization: RandomizationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = PipelineConfig::desk(ChainModel::default());
        ExperimentConfig {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            chain: ChainSection::default(),
            sim: SimSection::default(),
            baseline: BaselineSection::default(),
            policy: p.arch,
            training: TrainingSection::default(),
            task: TaskSection::default(),
            curriculum: p.curriculum,
            randomization: p.randomization,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`, or the built-in default when `path` is `default`.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        if path == Path::new("default") {
            return Self::from_toml(DEFAULT_CONFIG_TOML);
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn chain_model(&self) -> Result<ChainModel, HarnessError> {
        let c = &self.chain;
        let n = c.link_lengths.len();
        ChainModel::new(
            c.link_lengths.clone(),
            vec![(-c.joint_limit, c.joint_limit); n],
            vec![c.torque_limit; n],
        )
        .map_err(|e| HarnessError::Config(format!("chain: {e}")))
    }

    pub fn nominal(&self) -> DynamicsParams {
        let n = self.chain.link_lengths.len();
        DynamicsParams {
            inertia: vec![self.sim.inertia; n],
            damping: vec![self.sim.damping; n],
            motor_gain_scale: vec![1.0; n],
            friction_scale: 1.0,
        }
    }

    pub fn baseline_gains(&self) -> PdGains {
        PdGains::critically_damped(self.baseline.kp, &self.nominal())
    }

    /// Held-force magnitude of the force condition (N).
    pub fn eval_force(&self) -> f64 {
        self.task.force_fraction * self.curriculum.f_max
    }

    /// The core training configuration this experiment describes.
    pub fn pipeline(&self) -> Result<PipelineConfig, HarnessError> {
        let chain = self.chain_model()?;
        let n = chain.n();
        let t = &self.training;
        let config = PipelineConfig {
            arch: self.policy.clone(),
            init_log_std: t.init_log_std,
            rl_log_std: t.rl_log_std,
            demo: t.demo.clone(),
            bc: t.bc,
            ppo: t.ppo.clone(),
            curriculum: self.curriculum,
            curriculum_updates: t.curriculum_updates,
            tasks: t.tasks.clone(),
            weights: t.weights,
            wrench_mode: t.wrench_mode,
            randomization: self.randomization.clone(),
            nominal: self.nominal(),
            home_q: if self.sim.home_q.is_empty() { default_home(n) } else { self.sim.home_q.clone() },
            gains: self.baseline_gains(),
            ik: self.baseline.ik.clone(),
            ablation: Default::default(),
            chain,
        };
        config.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: &str| Err(HarnessError::Config(msg.to_string()));
        if !(self.sim.inertia > 0.0 && self.sim.damping > 0.0) {
            return bad("sim: inertia and damping must be positive");
        }
        if !(self.baseline.kp > 0.0 && self.baseline.kp.is_finite()) {
            return bad("baseline: kp must be positive");
        }
        if self.task.tasks.is_empty() || self.task.seeds == 0 {
            return bad("task: need at least one task and one seed");
        }
        if !(self.task.force_fraction >= 0.0 && self.task.force_onset >= 0.0) {
            return bad("task: force_fraction and force_onset must be >= 0");
        }
        self.pipeline().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn checked_in_default_matches_built_in() {
        assert_eq!(ExperimentConfig::from_toml(DEFAULT_CONFIG_TOML).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn default_pipeline_matches_desk_defaults() {
        let p = ExperimentConfig::default().pipeline().unwrap();
        assert_eq!(p, PipelineConfig::desk(ChainModel::default()));
    }

    #[test]
    fn serialized_config_parses_back() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
