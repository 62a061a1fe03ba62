//! Paired evaluation of controllers, the IK-vs-policy comparison and the
//! ablation study.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use teleforge_core::baseline::IkPdController;
use teleforge_core::kinematics::ChainModel;
use teleforge_core::policy::{load_params, PolicyController, PolicyParams};
use teleforge_core::rewards::{evaluate_episode, MetricsReport};
use teleforge_core::sim::rng_from_seed;
use teleforge_core::tasks::{run_episode, Controller, EpisodeConfig, ForceProfile, TaskKind, TaskSpec, Trajectory};
use teleforge_core::training::{
    run_curriculum_stage, train_full_pipeline, Ablation, PipelineConfig, PipelineOutput, TrainingLog,
};

use crate::{sub_seed, ExperimentConfig, HarnessError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    NoForce,
    Force,
}

impl Condition {
    pub const ALL: [Condition; 2] = [Condition::NoForce, Condition::Force];

    pub fn label(&self) -> &'static str {
        match self {
            Condition::NoForce => "no_force",
            Condition::Force => "force",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    Ik,
    Policy,
}

impl ControllerKind {
    pub fn label(&self) -> &'static str {
        match self {
            ControllerKind::Ik => "ik",
            ControllerKind::Policy => "ours",
        }
    }
}

/// One evaluation episode, identical for every controller.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub condition: Condition,
    pub task: TaskSpec,
    /// Position in the seed list; pairs episodes across tasks.
    pub seed_index: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    /// File-name friendly identifier, e.g. `force_reach_s3`.
    pub fn id(&self) -> String {
        format!("{}_{}_s{}", self.condition.label(), self.task.kind.name(), self.seed_index)
    }
}

/// Seed of evaluation episode `j` of the `k`-th configured task.
pub fn eval_seed(seed: u64, task_index: usize, j: usize) -> u64 {
    sub_seed(sub_seed(seed, 100), 1000 * task_index as u64 + j as u64)
}

/// All evaluation episodes for `conditions`, in a fixed order.
pub fn episode_specs(config: &ExperimentConfig, seed: u64, conditions: &[Condition]) -> Vec<EpisodeSpec> {
    let mut specs = Vec::new();
    for &condition in conditions {
        for (k, &kind) in config.task.tasks.iter().enumerate() {
            for j in 0..config.task.seeds {
                let seed = eval_seed(seed, k, j);
                let mut task = TaskSpec::new(kind);
                if condition == Condition::Force {
                    let direction = rng_from_seed(sub_seed(seed, 0xF0)).random_range(0.0..std::f64::consts::TAU);
                    task = task.with_force(ForceProfile {
                        magnitude: config.eval_force(),
                        direction,
                        onset: config.task.force_onset,
                    });
                }
                specs.push(EpisodeSpec {
                    condition,
                    task,
                    seed_index: j,
                    seed,
                });
            }
        }
    }
    specs
}

/// Everything needed to run either controller on the configured arm.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub config: ExperimentConfig,
    pub chain: ChainModel,
    pub episode: EpisodeConfig,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub spec: EpisodeSpec,
    pub controller: ControllerKind,
    pub metrics: MetricsReport,
}

impl Evaluator {
    pub fn new(config: &ExperimentConfig) -> Result<Self, HarnessError> {
        let pipeline = config.pipeline()?;
        Ok(Evaluator {
            chain: pipeline.chain.clone(),
            episode: pipeline.episode_config(),
            config: config.clone(),
        })
    }

    pub fn controller(&self, kind: ControllerKind, policy: Option<&Arc<PolicyParams>>) -> Result<Box<dyn Controller>, HarnessError> {
        Ok(match kind {
            ControllerKind::Ik => Box::new(IkPdController::new(
                self.chain.clone(),
                self.config.baseline_gains(),
                self.config.baseline.ik.clone(),
            )),
            ControllerKind::Policy => {
                let params = policy.ok_or_else(|| HarnessError::Config("policy controller needs a checkpoint".into()))?;
                if params.arch.n_joints != self.chain.n() {
                    return Err(HarnessError::Config(format!(
                        "checkpoint has {} joints, chain has {}",
                        params.arch.n_joints,
                        self.chain.n()
                    )));
                }
                Box::new(PolicyController::new(params.clone()))
            }
        })
    }

    pub fn run(&self, controller: &mut dyn Controller, spec: &EpisodeSpec) -> Result<(Trajectory, MetricsReport), HarnessError> {
        let traj = run_episode(controller, &self.chain, &spec.task, &self.episode, spec.seed)?;
        let metrics = evaluate_episode(&traj, &spec.task)?;
        Ok((traj, metrics))
    }

    /// Runs `kind` over `specs`, handing each trajectory to `sink`.
    pub fn evaluate(
        &self,
        kind: ControllerKind,
        policy: Option<&Arc<PolicyParams>>,
        specs: &[EpisodeSpec],
        mut sink: impl FnMut(&EpisodeSpec, &Trajectory) -> Result<(), HarnessError>,
    ) -> Result<Vec<EpisodeResult>, HarnessError> {
        let mut controller = self.controller(kind, policy)?;
        specs
            .iter()
            .map(|spec| {
                let (traj, metrics) = self.run(controller.as_mut(), spec)?;
                sink(spec, &traj)?;
                Ok(EpisodeResult {
                    spec: spec.clone(),
                    controller: kind,
                    metrics,
                })
            })
            .collect()
    }
}

/// Mean and normal 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

impl Interval {
    pub fn of(values: &[f64]) -> Interval {
        let n = values.len();
        assert!(n > 0, "interval over no values");
        let mean = values.iter().sum::<f64>() / n as f64;
        let half_width = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        Interval { mean, half_width, n }
    }
}

/// The four reported metrics in report units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    ErrorCm,
    Smooth,
    SuccessPct,
    TorqueNm,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::ErrorCm, Metric::Smooth, Metric::SuccessPct, Metric::TorqueNm];

    pub fn label(&self) -> &'static str {
        match self {
            Metric::ErrorCm => "error_cm",
            Metric::Smooth => "smooth",
            Metric::SuccessPct => "success_pct",
            Metric::TorqueNm => "torque_nm",
        }
    }

    pub fn value(&self, m: &MetricsReport) -> f64 {
        match self {
            Metric::ErrorCm => 100.0 * m.e_track,
            Metric::Smooth => m.smoothness,
            Metric::SuccessPct => 100.0 * m.success as u8 as f64,
            Metric::TorqueNm => m.mean_torque,
        }
    }
}

/// Aggregate over seeds: each seed contributes its mean across tasks.
pub fn aggregate(results: &[&EpisodeResult], metric: Metric) -> Interval {
    let max_seed = results.iter().map(|r| r.spec.seed_index).max().expect("no results");
    let per_seed: Vec<f64> = (0..=max_seed)
        .filter_map(|j| {
            let vals: Vec<f64> = results
                .iter()
                .filter(|r| r.spec.seed_index == j)
                .map(|r| metric.value(&r.metrics))
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    Interval::of(&per_seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonCell {
    pub controller: ControllerKind,
    pub condition: Condition,
    pub metric: Metric,
    pub interval: Interval,
    pub episodes: usize,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub cells: Vec<ComparisonCell>,
    pub episodes: Vec<EpisodeResult>,
}

impl ComparisonReport {
    pub fn from_results(episodes: Vec<EpisodeResult>) -> Self {
        let mut cells = Vec::new();
        for metric in Metric::ALL {
            for condition in Condition::ALL {
                for controller in [ControllerKind::Ik, ControllerKind::Policy] {
                    let sel: Vec<&EpisodeResult> = episodes
                        .iter()
                        .filter(|r| r.controller == controller && r.spec.condition == condition)
                        .collect();
                    if sel.is_empty() {
                        continue;
                    }
                    cells.push(ComparisonCell {
                        controller,
                        condition,
                        metric,
                        interval: aggregate(&sel, metric),
                        episodes: sel.len(),
                    });
                }
            }
        }
        ComparisonReport { cells, episodes }
    }

    pub fn cell(&self, controller: ControllerKind, condition: Condition, metric: Metric) -> Option<&ComparisonCell> {
        self.cells
            .iter()
            .find(|c| c.controller == controller && c.condition == condition && c.metric == metric)
    }

    /// Per-seed paired differences `ik - ours` of `metric` under `condition`.
    pub fn paired_differences(&self, condition: Condition, metric: Metric) -> Vec<f64> {
        let per = |kind: ControllerKind| -> Vec<&EpisodeResult> {
            self.episodes
                .iter()
                .filter(|r| r.controller == kind && r.spec.condition == condition)
                .collect()
        };
        let (ik, ours) = (per(ControllerKind::Ik), per(ControllerKind::Policy));
        let seeds = ik.iter().map(|r| r.spec.seed_index).max().map_or(0, |m| m + 1);
        (0..seeds)
            .map(|j| {
                let mean = |rs: &[&EpisodeResult]| {
                    let v: Vec<f64> = rs.iter().filter(|r| r.spec.seed_index == j).map(|r| metric.value(&r.metrics)).collect();
                    v.iter().sum::<f64>() / v.len() as f64
                };
                mean(&ik) - mean(&ours)
            })
            .collect()
    }
}

pub fn load_policy(path: &Path) -> Result<Arc<PolicyParams>, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::MissingCheckpoint(path.to_path_buf()));
    }
    load_params(path)
        .map(Arc::new)
        .map_err(|source| HarnessError::BadCheckpoint {
            path: path.to_path_buf(),
            source,
        })
}

/// Baseline and policy on the same episodes under both conditions.
pub fn run_comparison(
    config: &ExperimentConfig,
    policy: &Arc<PolicyParams>,
    seed: u64,
) -> Result<ComparisonReport, HarnessError> {
    let eval = Evaluator::new(config)?;
    let specs = episode_specs(config, seed, &Condition::ALL);
    let mut results = eval.evaluate(ControllerKind::Ik, None, &specs, |_, _| Ok(()))?;
    results.extend(eval.evaluate(ControllerKind::Policy, Some(policy), &specs, |_, _| Ok(()))?);
    Ok(ComparisonReport::from_results(results))
}

/// One trained variant of the ablation study.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub error_cm: Interval,
    pub smooth: Interval,
    pub success_pct: Interval,
    pub episodes: usize,
}

impl AblationRow {
    pub fn label(&self) -> String {
        self.ablation.label()
    }
}

/// The full method followed by one row per removed component.
pub const ABLATIONS: [Ablation; 5] = [
    Ablation {
        no_curriculum: false,
        mlp_only: false,
        no_smoothness: false,
        skip_bc: false,
    },
    Ablation::NO_CURRICULUM,
    Ablation::MLP_ONLY,
    Ablation::NO_SMOOTHNESS,
    Ablation::SKIP_BC,
];

/// Trains `ablation` from `seed`. Variants that differ from the full method
/// only in stage 3 continue from `full`'s stage-2 snapshot when given,
/// which is the same computation the full pipeline would repeat.
pub fn train_variant(
    base: &PipelineConfig,
    ablation: Ablation,
    seed: u64,
    full: Option<&PipelineOutput>,
) -> Result<PolicyParams, HarnessError> {
    let mut config = base.clone();
    config.ablation = ablation;
    let stage3_only = Ablation {
        no_curriculum: false,
        ..ablation
    }
    .is_full();
    match full {
        Some(out) if stage3_only => {
            let mut log = TrainingLog::default();
            Ok(run_curriculum_stage(&out.stage2, &config, seed, &mut log)?)
        }
        _ => Ok(train_full_pipeline(&config, seed, None)?.params),
    }
}

/// Force-condition metrics of `policy` over the evaluation episodes.
pub fn evaluate_under_force(
    config: &ExperimentConfig,
    policy: &Arc<PolicyParams>,
    seed: u64,
) -> Result<Vec<EpisodeResult>, HarnessError> {
    let eval = Evaluator::new(config)?;
    let specs = episode_specs(config, seed, &[Condition::Force]);
    eval.evaluate(ControllerKind::Policy, Some(policy), &specs, |_, _| Ok(()))
}

pub fn ablation_row(ablation: Ablation, results: &[EpisodeResult]) -> AblationRow {
    let refs: Vec<&EpisodeResult> = results.iter().collect();
    AblationRow {
        ablation,
        error_cm: aggregate(&refs, Metric::ErrorCm),
        smooth: aggregate(&refs, Metric::Smooth),
        success_pct: aggregate(&refs, Metric::SuccessPct),
        episodes: results.len(),
    }
}

/// Trains and evaluates every variant in `ablations`; `progress` is told
/// each label before its training starts.
pub fn run_ablations(
    config: &ExperimentConfig,
    ablations: &[Ablation],
    seed: u64,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>, HarnessError> {
    let base = config.pipeline()?;
    let mut full: Option<PipelineOutput> = None;
    let mut rows = Vec::new();
    for &ablation in ablations {
        progress(&ablation.label());
        let params = if ablation.is_full() {
            let out = train_full_pipeline(&base, seed, None)?;
            let p = out.params.clone();
            full = Some(out);
            p
        } else {
            train_variant(&base, ablation, seed, full.as_ref())?
        };
        let results = evaluate_under_force(config, &Arc::new(params), seed)?;
        rows.push(ablation_row(ablation, &results));
    }
    Ok(rows)
}

/// Which tasks were evaluated, for report footers and logs.
pub fn task_names(tasks: &[TaskKind]) -> String {
    tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join("+")
}
