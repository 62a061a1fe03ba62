#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use teleforge::ExperimentConfig;

/// Small enough that every subcommand finishes in seconds.
pub const FAST_TOML: &str = r#"
seed = 3

[policy]
history = 2
vr_hidden = 4
prop_hidden = 8
core_hidden = 8
critic_hidden = [16]

[training]
curriculum_updates = 2

[training.demo]
episodes = 3

[training.bc]
epochs = 2

[training.ppo]
steps_per_update = 128
num_envs = 2
total_updates = 2

[curriculum]
ramp_updates = 2

[task]
tasks = ["reach", "hold_under_force"]
seeds = 2
"#;

pub fn fast_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(FAST_TOML).unwrap()
}

pub fn write_fast_config(dir: &Path) -> PathBuf {
    let path = dir.join("fast.toml");
    std::fs::write(&path, FAST_TOML).unwrap();
    path
}

pub fn tforge(args: &[&str]) -> Output {
    tforge_env(args, &[])
}

pub fn tforge_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tforge"));
    cmd.args(args).env_remove("TFORGE_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("tforge runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn header_of(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .next()
        .unwrap()
        .to_string()
}
