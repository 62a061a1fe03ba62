//! `tforge`: train, evaluate and serve teleoperation policies.
//!
//! Exit status: 0 success, 1 unclassified failure, 2 bad flags,
//! 3 invalid config, 4 missing checkpoint, 5 unreadable checkpoint,
//! 6 gradient check above tolerance, 7 I/O failure, 8 simulation or
//! training failure, 9 port unavailable. Failures print one line on
//! stderr: `error kind=<token> code=<n> msg=<text>`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use teleforge::experiment::{
    episode_specs, load_policy, run_ablations, run_comparison, task_names, Condition, ControllerKind, Evaluator, Metric,
    ABLATIONS,
};
use teleforge::report::{self, write_file};
use teleforge::server::{serve, ServeConfig, DEFAULT_PORT};
use teleforge::{error_line, sub_seed, ExperimentConfig, HarnessError};
use teleforge_core::policy::{save_params, PolicyArch, PolicyParams};
use teleforge_core::sim::rng_from_seed;
use teleforge_core::training::{
    bc_train, check_gradients, collect_demos, run_bc_stage, run_curriculum_stage, run_ppo_stage, train_full_pipeline,
    DemoDataset, LossKind, Stage, TrainingLog, TrainingLogRow,
};

#[derive(Debug, Parser)]
#[command(name = "tforge", version, about = "Neural teleoperation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML), or `default` for the built-in one.
    #[arg(long, global = true, default_value = "default")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true, env = "TFORGE_SEED")]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ControllerArg {
    Ik,
    Policy,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Record IK+PD demonstrations to demos.json.
    DemoCollect,
    /// Stage 1: behavior cloning.
    TrainBc {
        /// Demonstrations from `demo-collect`; collected afresh when absent.
        #[arg(long)]
        demos: Option<PathBuf>,
    },
    /// Stages 2 and 3 from a cloned policy.
    TrainPpo {
        /// Defaults to `<out>/stage1_bc.tfnp`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// All three stages.
    TrainAll,
    /// Runs one controller over the evaluation episodes.
    Eval {
        #[arg(long, value_enum, default_value = "policy")]
        controller: ControllerArg,
        /// Defaults to `<out>/stage3_curriculum.tfnp`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// IK+PD against the policy, with and without the held force.
    Compare {
        /// Defaults to `<out>/stage3_curriculum.tfnp`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Trains and evaluates the full method and each ablation.
    Ablate {
        /// Restrict to these variant labels (e.g. `full`, `no_curriculum`).
        #[arg(long, num_args = 1..)]
        only: Vec<String>,
    },
    /// Finite-difference check of the training gradients.
    Gradcheck,
    /// Live teleoperation server on ws://host:port/teleop.
    Serve {
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Policy for the `policy` controller; IK only when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

struct Run {
    config: ExperimentConfig,
    seed: u64,
    out: PathBuf,
}

impl Run {
    fn checkpoint(&self, given: &Option<PathBuf>, stage: Stage) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(stage.checkpoint_name()))
    }

    fn write(&self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<PathBuf, HarnessError> {
        write_file(&self.out, name, f)
    }

    fn save(&self, params: &PolicyParams, stage: Stage) -> Result<PathBuf, HarnessError> {
        std::fs::create_dir_all(&self.out).map_err(|e| HarnessError::io(self.out.display().to_string(), e))?;
        let path = self.out.join(stage.checkpoint_name());
        save_params(params, &path).map_err(|source| HarnessError::BadCheckpoint {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    fn write_log(&self, log: &TrainingLog) -> Result<PathBuf, HarnessError> {
        self.write("training_log.csv", |b| log.write_csv(b))
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("bad_flags", 2, first));
            std::process::exit(2);
        }
    };
    if let Err(err) = run(cli) {
        let (kind, code) = match err.downcast_ref::<HarnessError>() {
            Some(h) => (h.kind(), h.exit_code()),
            None => ("error", 1),
        };
        eprintln!("{}", error_line(kind, code, &format!("{err:#}")));
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = ExperimentConfig::load(&cli.config)?;
    let seed = cli.seed.unwrap_or(config.seed);
    let out = cli.out.clone().unwrap_or_else(|| config.out_dir.clone());
    let run = Run { config, seed, out };
    let mut resolved = run.config.clone();
    resolved.seed = seed;
    resolved.out_dir = run.out.clone();
    if !matches!(cli.command, Command::Serve { .. }) {
        run.write("config.toml", |b| {
            use std::io::Write;
            b.write_all(resolved.to_toml().as_bytes())
        })?;
    }
    match cli.command {
        Command::DemoCollect => demo_collect(&run),
        Command::TrainBc { demos } => train_bc(&run, demos.as_deref()),
        Command::TrainPpo { checkpoint } => train_ppo(&run, &checkpoint),
        Command::TrainAll => train_all(&run),
        Command::Eval { controller, checkpoint } => eval(&run, controller, &checkpoint),
        Command::Compare { checkpoint } => compare(&run, &checkpoint),
        Command::Ablate { only } => ablate(&run, &only),
        Command::Gradcheck => gradcheck(&run),
        Command::Serve { port, host, checkpoint } => serve_cmd(&run, port, host, checkpoint.as_deref()),
    }
}

fn demos(run: &Run) -> Result<DemoDataset, HarnessError> {
    let p = run.config.pipeline()?;
    Ok(collect_demos(
        &p.chain,
        &p.effective_arch(),
        &p.gains,
        &p.ik,
        &p.episode_config(),
        &p.demo,
        sub_seed(run.seed, 10),
    )?)
}

fn demo_collect(run: &Run) -> anyhow::Result<()> {
    let data = demos(run)?;
    let path = run.write("demos.json", |b| serde_json::to_writer(b, &data).map_err(std::io::Error::other))?;
    println!("demos episodes={} pairs={} path={}", data.episodes.len(), data.meta.count, path.display());
    Ok(())
}

fn train_bc(run: &Run, demos_path: Option<&Path>) -> anyhow::Result<()> {
    let p = run.config.pipeline()?;
    let mut log = TrainingLog::default();
    let (params, history) = match demos_path {
        None => run_bc_stage(&p, run.seed, &mut log)?,
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path.display().to_string(), e))?;
            let data: DemoDataset = serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            // same stream the pipeline uses for its initial weights
            let init = PolicyParams::init(&p.effective_arch(), p.init_log_std, &mut rng_from_seed(sub_seed(run.seed, 1)))?;
            let (params, history) = bc_train(init, &data, &p.bc, sub_seed(run.seed, 11))?;
            for (epoch, (t, v)) in history.train.iter().zip(&history.validation).enumerate() {
                log.rows.push(TrainingLogRow {
                    stage: Stage::Bc,
                    step: epoch,
                    update: 0,
                    alpha: 0.0,
                    bc_train_loss: *t,
                    bc_validation_loss: *v,
                    rollout: Default::default(),
                    diagnostics: Default::default(),
                });
            }
            (params, Some(history))
        }
    };
    let path = run.save(&params, Stage::Bc)?;
    run.write_log(&log)?;
    if let Some(h) = history {
        println!(
            "bc epochs={} val_loss_first={:.6} val_loss_last={:.6} checkpoint={}",
            h.validation.len(),
            h.initial_validation,
            h.validation.last().copied().unwrap_or(f64::NAN),
            path.display()
        );
    }
    Ok(())
}

fn train_ppo(run: &Run, checkpoint: &Option<PathBuf>) -> anyhow::Result<()> {
    let p = run.config.pipeline()?;
    let bc = load_policy(&run.checkpoint(checkpoint, Stage::Bc))?;
    let mut log = TrainingLog::default();
    let stage2 = run_ppo_stage(&bc, &p, run.seed, &mut log)?;
    run.save(&stage2.params, Stage::Ppo)?;
    let params = run_curriculum_stage(&stage2, &p, run.seed, &mut log)?;
    let path = run.save(&params, Stage::Curriculum)?;
    run.write_log(&log)?;
    println!("ppo updates={} checkpoint={}", log.rows.len(), path.display());
    Ok(())
}

fn train_all(run: &Run) -> anyhow::Result<()> {
    let p = run.config.pipeline()?;
    let out = train_full_pipeline(&p, run.seed, Some(&run.out))?;
    run.write_log(&out.log)?;
    for c in &out.checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(())
}

fn eval(run: &Run, controller: ControllerArg, checkpoint: &Option<PathBuf>) -> anyhow::Result<()> {
    let kind = match controller {
        ControllerArg::Ik => ControllerKind::Ik,
        ControllerArg::Policy => ControllerKind::Policy,
    };
    let policy = match kind {
        ControllerKind::Policy => Some(load_policy(&run.checkpoint(checkpoint, Stage::Curriculum))?),
        ControllerKind::Ik => None,
    };
    let evaluator = Evaluator::new(&run.config)?;
    let specs = episode_specs(&run.config, run.seed, &Condition::ALL);
    let results = evaluator.evaluate(kind, policy.as_ref(), &specs, |spec, traj| {
        run.write(&format!("trajectory_{}.csv", spec.id()), |b| traj.write_csv(b))
            .map(|_| ())
    })?;
    run.write("eval.csv", |b| report::write_episodes(&results, b))?;
    for condition in Condition::ALL {
        let sel: Vec<_> = results.iter().filter(|r| r.spec.condition == condition).collect();
        let e = teleforge::experiment::aggregate(&sel, Metric::ErrorCm);
        let s = teleforge::experiment::aggregate(&sel, Metric::Smooth);
        println!(
            "eval controller={} condition={} tasks={} error_cm={:.3}+-{:.3} smooth={:.3}+-{:.3}",
            kind.label(),
            condition.label(),
            task_names(&run.config.task.tasks),
            e.mean,
            e.half_width,
            s.mean,
            s.half_width
        );
    }
    Ok(())
}

fn compare(run: &Run, checkpoint: &Option<PathBuf>) -> anyhow::Result<()> {
    let policy = load_policy(&run.checkpoint(checkpoint, Stage::Curriculum))?;
    let report = run_comparison(&run.config, &policy, run.seed)?;
    let path = run.write("comparison.csv", |b| report::write_comparison(&report, b))?;
    run.write("comparison_detail.csv", |b| report::write_comparison_detail(&report, b))?;
    run.write("episodes.csv", |b| report::write_episodes(&report.episodes, b))?;
    print!("{}", std::fs::read_to_string(&path).context("reading back comparison.csv")?);
    Ok(())
}

fn ablate(run: &Run, only: &[String]) -> anyhow::Result<()> {
    let variants: Vec<_> = ABLATIONS
        .iter()
        .copied()
        .filter(|a| only.is_empty() || only.contains(&a.label()))
        .collect();
    if variants.is_empty() {
        return Err(HarnessError::Config(format!("no ablation variant matches {only:?}")).into());
    }
    let rows = run_ablations(&run.config, &variants, run.seed, |label| eprintln!("training {label}"))?;
    let path = run.write("ablation.csv", |b| report::write_ablation(&rows, b))?;
    print!("{}", std::fs::read_to_string(&path).context("reading back ablation.csv")?);
    Ok(())
}

fn gradcheck(run: &Run) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for recurrent in [true, false] {
        let arch = PolicyArch {
            recurrent,
            ..PolicyArch::tiny(1)
        };
        let params = PolicyParams::init(&arch, -0.5, &mut rng_from_seed(sub_seed(run.seed, 200)))?;
        for kind in LossKind::ALL {
            let r = check_gradients(&params, kind, sub_seed(run.seed, 201));
            worst = worst.max(r.max_rel_error);
            let core = if recurrent { "lstm" } else { "mlp" };
            println!("gradcheck core={core} loss={} max_rel_error={:.3e} probed={}", kind.name(), r.max_rel_error, r.probed);
            rows.push(format!("{core},{},{:e},{},{}", kind.name(), r.max_rel_error, r.probed, r.param_count));
        }
    }
    run.write("gradcheck.csv", |b| {
        use std::io::Write;
        writeln!(b, "core,loss,max_rel_error,probed,params")?;
        rows.iter().try_for_each(|r| writeln!(b, "{r}"))
    })?;
    if !(worst < 1e-4) {
        return Err(HarnessError::GradCheckFailed(worst).into());
    }
    Ok(())
}

fn serve_cmd(run: &Run, port: u16, host: String, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let policy: Option<Arc<PolicyParams>> = checkpoint.map(load_policy).transpose()?;
    let mut config = ServeConfig::from_experiment(&run.config, policy, port)?;
    config.host = host;
    let handle = serve(config)?;
    eprintln!("serving {}", handle.url());
    handle.wait();
    Ok(())
}
