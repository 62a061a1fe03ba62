//! The three training stages: demonstrations and behavior cloning, PPO
//! without external forces, then PPO under the force curriculum.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::demos::episode_seed;
use super::ppo::{collect_rollouts, PpoConfig, PpoDiagnostics, PpoLearner, RolloutStats, TrainEnvs, TrainingEnvConfig};
use super::{bc_train, collect_demos, BcConfig, BcHistory, CurriculumSchedule, DemoConfig};
use crate::baseline::{IkConfig, PdGains};
use crate::error::Error as CoreError;
use crate::kinematics::ChainModel;
use crate::policy::{save_params, ParamsIoError, PolicyArch, PolicyParams};
use crate::rewards::RewardWeights;
use crate::sim::{rng_from_seed, DynamicsParams, RandomizationConfig};
use crate::tasks::{default_home, EpisodeConfig, TaskKind, WrenchMode};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: ParamsIoError,
    },
    #[error("training log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Bc,
    Ppo,
    Curriculum,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Bc => "bc",
            Stage::Ppo => "ppo",
            Stage::Curriculum => "curriculum",
        }
    }

    pub fn checkpoint_name(&self) -> &'static str {
        match self {
            Stage::Bc => "stage1_bc.tfnp",
            Stage::Ppo => "stage2_ppo.tfnp",
            Stage::Curriculum => "stage3_curriculum.tfnp",
        }
    }
}

/// Components removed from the full method, one per ablation row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Stage 3 keeps `alpha = 0`.
    pub no_curriculum: bool,
    /// Feed-forward core instead of the LSTM.
    pub mlp_only: bool,
    /// Smoothness reward weight set to zero.
    pub no_smoothness: bool,
    /// Start RL from random weights.
    pub skip_bc: bool,
}

impl Ablation {
    pub const NO_CURRICULUM: Ablation = Ablation {
        no_curriculum: true,
        mlp_only: false,
        no_smoothness: false,
        skip_bc: false,
    };
    pub const MLP_ONLY: Ablation = Ablation {
        no_curriculum: false,
        mlp_only: true,
        no_smoothness: false,
        skip_bc: false,
    };
    pub const NO_SMOOTHNESS: Ablation = Ablation {
        no_curriculum: false,
        mlp_only: false,
        no_smoothness: true,
        skip_bc: false,
    };
    pub const SKIP_BC: Ablation = Ablation {
        no_curriculum: false,
        mlp_only: false,
        no_smoothness: false,
        skip_bc: true,
    };

    pub fn is_full(&self) -> bool {
        *self == Ablation::default()
    }

    /// Row label, e.g. `full` or `no_curriculum+mlp_only`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.no_curriculum, "no_curriculum"),
            (self.mlp_only, "mlp_only"),
            (self.no_smoothness, "no_smoothness"),
            (self.skip_bc, "skip_bc"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, name)| *name)
        .collect();
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// Everything `train_full_pipeline` needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub chain: ChainModel,
    pub arch: PolicyArch,
    /// Action log-std at initialization.
    pub init_log_std: f64,
    /// Action log-std set when RL starts.
    pub rl_log_std: f64,
    pub demo: DemoConfig,
    pub bc: BcConfig,
    /// `total_updates` is the number of stage-2 updates.
    pub ppo: PpoConfig,
    pub curriculum: CurriculumSchedule,
    pub curriculum_updates: usize,
    /// Tasks drawn by the RL environments.
    pub tasks: Vec<TaskKind>,
    pub weights: RewardWeights,
    pub wrench_mode: WrenchMode,
    pub randomization: RandomizationConfig,
    /// Nominal dynamics the randomization is applied around.
    pub nominal: DynamicsParams,
    pub home_q: Vec<f64>,
    /// Expert gains for demonstrations.
    pub gains: PdGains,
    pub ik: IkConfig,
    pub ablation: Ablation,
}

impl PipelineConfig {
    /// Defaults sized for a single CPU core.
    pub fn desk(chain: ChainModel) -> Self {
        let n = chain.n();
        PipelineConfig {
            arch: PolicyArch::for_joints(n),
            init_log_std: -1.0,
            rl_log_std: -1.5,
            demo: DemoConfig::default(),
            bc: BcConfig::default(),
            ppo: PpoConfig {
                steps_per_update: 2048,
                reward_scale: 0.01,
                total_updates: 60,
                ..PpoConfig::default()
            },
            curriculum: CurriculumSchedule {
                ramp_updates: 150,
                ..CurriculumSchedule::default()
            },
            curriculum_updates: 200,
            tasks: TaskKind::ALL.to_vec(),
            weights: RewardWeights::default(),
            wrench_mode: WrenchMode::default(),
            randomization: RandomizationConfig::default(),
            nominal: DynamicsParams::nominal(n),
            home_q: default_home(n),
            gains: PdGains::default_for(n),
            ik: IkConfig::default(),
            ablation: Ablation::default(),
            chain,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        self.chain.validate()?;
        self.effective_arch().validate()?;
        self.demo.validate()?;
        self.bc.validate()?;
        self.ppo.validate()?;
        self.curriculum.validate()?;
        self.effective_weights().validate()?;
        if self.tasks.is_empty() {
            return Err(CoreError::Empty("training task list"));
        }
        if self.curriculum_updates > 0 && self.curriculum_updates < self.curriculum.ramp_updates {
            return Err(CoreError::invalid(
                "pipeline config",
                "curriculum_updates must cover the ramp so alpha reaches alpha_end",
            ));
        }
        self.nominal.validate()?;
        self.randomization.validate()?;
        self.gains.validate()?;
        self.ik.validate()?;
        let n = self.chain.n();
        if self.nominal.n() != n || self.home_q.len() != n || self.gains.kp.len() != n {
            return Err(CoreError::invalid("pipeline config", "per-joint settings must match the chain"));
        }
        if !self.chain.within_limits(&self.home_q) {
            return Err(CoreError::invalid("pipeline config", "home pose outside joint limits"));
        }
        if self.arch.n_joints != self.chain.n() {
            return Err(CoreError::invalid("pipeline config", "policy and chain joint counts differ"));
        }
        Ok(())
    }

    pub fn effective_arch(&self) -> PolicyArch {
        let mut arch = self.arch.clone();
        if self.ablation.mlp_only {
            arch.recurrent = false;
        }
        arch
    }

    pub fn effective_weights(&self) -> RewardWeights {
        let mut w = self.weights;
        if self.ablation.no_smoothness {
            w.w_smooth = 0.0;
        }
        w
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            home_q: self.home_q.clone(),
            nominal: self.nominal.clone(),
            randomization: self.randomization.clone(),
            curriculum: None,
        }
    }

    fn env_config(&self) -> TrainingEnvConfig {
        TrainingEnvConfig {
            chain: self.chain.clone(),
            episode: self.episode_config(),
            tasks: self.tasks.clone(),
            weights: self.effective_weights(),
            wrench_mode: self.wrench_mode,
            f_max: self.curriculum.f_max,
        }
    }
}

/// One line of the training log: a BC epoch or a PPO update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingLogRow {
    pub stage: Stage,
    /// Epoch for BC rows, update index within the stage otherwise.
    pub step: usize,
    /// Running index over all PPO updates; 0 for BC rows.
    pub update: usize,
    pub alpha: f64,
    pub bc_train_loss: f64,
    pub bc_validation_loss: f64,
    pub rollout: RolloutStats,
    pub diagnostics: PpoDiagnostics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<TrainingLogRow>,
}

fn field(out: &mut String, v: f64) {
    if v.is_finite() {
        let _ = write!(out, ",{v:.9}");
    } else {
        out.push(',');
    }
}

impl TrainingLog {
    pub const CSV_HEADER: [&'static str; 19] = [
        "stage",
        "step",
        "update",
        "alpha",
        "bc_train_loss",
        "bc_validation_loss",
        "mean_reward",
        "reward_track",
        "reward_smooth",
        "reward_energy",
        "e_track_m",
        "smoothness",
        "episodes_finished",
        "policy_loss",
        "value_loss",
        "entropy",
        "clip_fraction",
        "approx_kl",
        "actor_grad_norm",
    ];

    pub fn stage_rows(&self, stage: Stage) -> impl Iterator<Item = &TrainingLogRow> {
        self.rows.iter().filter(move |r| r.stage == stage)
    }

    /// `alpha` of every RL row, in order.
    pub fn alphas(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| r.stage != Stage::Bc).map(|r| r.alpha).collect()
    }

    /// Missing values are written as empty fields.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER.join(","))?;
        for r in &self.rows {
            let mut line = format!("{},{},{}", r.stage.name(), r.step, r.update);
            let rl = r.stage != Stage::Bc;
            let nan = f64::NAN;
            field(&mut line, if rl { r.alpha } else { nan });
            field(&mut line, r.bc_train_loss);
            field(&mut line, r.bc_validation_loss);
            let s = &r.rollout;
            let d = &r.diagnostics;
            for v in [s.mean_reward, s.terms.track, s.terms.smooth, s.terms.energy, s.e_track, s.smoothness] {
                field(&mut line, if rl { v } else { nan });
            }
            if rl {
                let _ = write!(line, ",{}", s.episodes_finished);
            } else {
                line.push(',');
            }
            for v in [d.policy_loss, d.value_loss, d.entropy, d.clip_fraction, d.approx_kl, d.actor_grad_norm] {
                field(&mut line, if rl { v } else { nan });
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Policy and optimizer state at the end of stage 2, from which stage 3
/// (or a stage-3 ablation) continues.
#[derive(Debug, Clone)]
pub struct StageSnapshot {
    pub params: PolicyParams,
    pub learner: PpoLearner,
    /// PPO updates performed so far.
    pub updates: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub params: PolicyParams,
    pub bc_params: PolicyParams,
    pub stage2: StageSnapshot,
    pub bc_history: Option<BcHistory>,
    pub log: TrainingLog,
    pub checkpoints: Vec<PathBuf>,
}

/// Writes through a temporary file so an interrupted write never replaces
/// a good checkpoint.
fn write_checkpoint(params: &PolicyParams, dir: &Path, stage: Stage) -> Result<PathBuf, PipelineError> {
    let path = dir.join(stage.checkpoint_name());
    let tmp = dir.join(format!("{}.tmp", stage.checkpoint_name()));
    let wrap = |source| PipelineError::Checkpoint {
        path: path.clone(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| wrap(e.into()))?;
    save_params(params, &tmp).map_err(wrap)?;
    std::fs::rename(&tmp, &path).map_err(|e| wrap(e.into()))?;
    Ok(path)
}

/// Stage 1. With `skip_bc` the randomly initialized network is returned.
pub fn run_bc_stage(
    config: &PipelineConfig,
    seed: u64,
    log: &mut TrainingLog,
) -> Result<(PolicyParams, Option<BcHistory>), PipelineError> {
    let arch = config.effective_arch();
    let init = PolicyParams::init(&arch, config.init_log_std, &mut rng_from_seed(episode_seed(seed, 1)))?;
    if config.ablation.skip_bc {
        return Ok((init, None));
    }
    let demos = collect_demos(
        &config.chain,
        &arch,
        &config.gains,
        &config.ik,
        &config.episode_config(),
        &config.demo,
        episode_seed(seed, 10),
    )?;
    let (params, history) = bc_train(init, &demos, &config.bc, episode_seed(seed, 11))?;
    for (epoch, (train, val)) in history.train.iter().zip(&history.validation).enumerate() {
        log.rows.push(TrainingLogRow {
            stage: Stage::Bc,
            step: epoch,
            update: 0,
            alpha: 0.0,
            bc_train_loss: *train,
            bc_validation_loss: *val,
            rollout: RolloutStats::default(),
            diagnostics: PpoDiagnostics::default(),
        });
    }
    Ok((params, Some(history)))
}

fn run_ppo_updates(
    snapshot: &mut StageSnapshot,
    config: &PipelineConfig,
    stage: Stage,
    updates: usize,
    seed: u64,
    log: &mut TrainingLog,
) -> Result<(), PipelineError> {
    if updates == 0 {
        return Ok(());
    }
    if snapshot.updates == 0 {
        snapshot.params.set_log_std(config.rl_log_std);
    }
    let mut envs = TrainEnvs::new(config.env_config(), &snapshot.params, config.ppo.num_envs, seed)?;
    for step in 0..updates {
        let alpha = match stage {
            Stage::Curriculum if !config.ablation.no_curriculum => config.curriculum.alpha(step),
            _ => 0.0,
        };
        envs.set_alpha(alpha);
        let buffer = collect_rollouts(&mut envs, &snapshot.params, &config.ppo)?;
        let diagnostics = snapshot.learner.update(&mut snapshot.params, &buffer)?;
        log.rows.push(TrainingLogRow {
            stage,
            step,
            update: snapshot.updates,
            alpha,
            bc_train_loss: f64::NAN,
            bc_validation_loss: f64::NAN,
            rollout: buffer.stats,
            diagnostics,
        });
        snapshot.updates += 1;
    }
    Ok(())
}

/// Stage 2 from a cloned policy: PPO with `alpha = 0`.
pub fn run_ppo_stage(
    bc_params: &PolicyParams,
    config: &PipelineConfig,
    seed: u64,
    log: &mut TrainingLog,
) -> Result<StageSnapshot, PipelineError> {
    let mut snapshot = StageSnapshot {
        learner: PpoLearner::new(bc_params, config.ppo.clone(), episode_seed(seed, 20))?,
        params: bc_params.clone(),
        updates: 0,
    };
    run_ppo_updates(&mut snapshot, config, Stage::Ppo, config.ppo.total_updates, episode_seed(seed, 21), log)?;
    Ok(snapshot)
}

/// Stage 3 continuing from `from`; with `no_curriculum` alpha stays 0.
pub fn run_curriculum_stage(
    from: &StageSnapshot,
    config: &PipelineConfig,
    seed: u64,
    log: &mut TrainingLog,
) -> Result<PolicyParams, PipelineError> {
    let mut snapshot = from.clone();
    run_ppo_updates(&mut snapshot, config, Stage::Curriculum, config.curriculum_updates, episode_seed(seed, 31), log)?;
    Ok(snapshot.params)
}

/// Runs all three stages, writing a checkpoint after each one into
/// `checkpoint_dir` when given.
pub fn train_full_pipeline(
    config: &PipelineConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    let mut log = TrainingLog::default();
    let mut checkpoints = Vec::new();
    let mut save = |params: &PolicyParams, stage: Stage| -> Result<(), PipelineError> {
        if let Some(dir) = checkpoint_dir {
            checkpoints.push(write_checkpoint(params, dir, stage)?);
        }
        Ok(())
    };
    let (bc_params, bc_history) = run_bc_stage(config, seed, &mut log)?;
    save(&bc_params, Stage::Bc)?;
    let stage2 = run_ppo_stage(&bc_params, config, seed, &mut log)?;
    save(&stage2.params, Stage::Ppo)?;
    let params = run_curriculum_stage(&stage2, config, seed, &mut log)?;
    save(&params, Stage::Curriculum)?;
    Ok(PipelineOutput {
        params,
        bc_params,
        stage2,
        bc_history,
        log,
        checkpoints,
    })
}
