use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;
use teleforge_core::kinematics::Pose2;
use teleforge_core::policy::*;
use teleforge_core::sim::{rng_from_seed, SimState};
use teleforge_core::tasks::{Controller, TargetCommand};

fn small(n: usize) -> PolicyArch {
    PolicyArch {
        history: 2,
        vr_hidden: 3,
        prop_hidden: 4,
        core_hidden: 5,
        critic_hidden: vec![6],
        ..PolicyArch::for_joints(n)
    }
}

fn random_params(arch: &PolicyArch, seed: u64, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::zeros(arch).unwrap();
    let mut rng = rng_from_seed(seed);
    p.data.iter_mut().for_each(|v| *v = rng.random_range(-scale..=scale));
    p
}

fn random_obs(arch: &PolicyArch, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..arch.obs_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Row-major `rows x cols` block times `x` plus bias, written out longhand.
fn dense(p: &PolicyParams, w: Block, b: Block, x: &[f64]) -> Vec<f64> {
    assert_eq!(w.cols, x.len());
    (0..w.rows)
        .map(|r| {
            let mut s = p.data[b.offset + r];
            for c in 0..w.cols {
                s += p.data[w.offset + r * w.cols + c] * x[c];
            }
            s
        })
        .collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Textbook LSTM step with gate order (i, f, g, o).
fn oracle_step(p: &PolicyParams, obs: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let l = &p.layout;
    let split = obs.len() - VR_DIM;
    let zv: Vec<f64> = dense(p, l.vr_w, l.vr_b, &obs[split..]).iter().map(|v| v.tanh()).collect();
    let zp: Vec<f64> = dense(p, l.prop_w, l.prop_b, &obs[..split]).iter().map(|v| v.tanh()).collect();
    let u: Vec<f64> = zv.into_iter().chain(zp).collect();
    let nh = h.len();
    let mut z = dense(p, l.core_wx, l.core_b, &u);
    for r in 0..4 * nh {
        for k in 0..nh {
            z[r] += p.data[l.core_wh.offset + r * nh + k] * h[k];
        }
    }
    let mut h2 = vec![0.0; nh];
    let mut c2 = vec![0.0; nh];
    for j in 0..nh {
        let (i, f, g, o) = (sig(z[j]), sig(z[nh + j]), z[2 * nh + j].tanh(), sig(z[3 * nh + j]));
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    let pre = dense(p, l.head_w, l.head_b, &h2);
    (pre, h2, c2)
}

#[test]
fn zero_network_outputs_zero_action_and_keeps_state_zero() {
    let arch = small(3);
    let p = PolicyParams::zeros(&arch).unwrap();
    let (out, next) = actor_forward(&p, &random_obs(&arch, 1), &RecurrentState::zeros(&arch)).unwrap();
    assert!(out.pre_squash.iter().all(|v| *v == 0.0));
    assert_eq!(out.action, ActionVector::zeros(3));
    assert!(next.is_zero());
}

#[test]
fn zero_policy_controller_is_pure_damping() {
    let arch = small(2);
    let mut ctl = PolicyController::new(Arc::new(PolicyParams::zeros(&arch).unwrap()));
    let state = SimState { q: vec![0.3, -0.2], qdot: vec![1.0, -2.0], time: 0.0 };
    let cmd = TargetCommand::new(Pose2 { p: [0.4, 0.1], theta: 0.0 }, true);
    let tau = ctl.act(&state, &cmd).unwrap();
    let kd = low_level_gains(2).kd;
    assert_eq!(tau, vec![-kd[0] * 1.0, kd[1] * 2.0]);
}

#[test]
fn low_level_loop_runs_at_half_baseline_gains() {
    let base = teleforge_core::baseline::PdGains::default_for(4);
    let low = low_level_gains(4);
    for i in 0..4 {
        assert!((low.kp[i] - 0.5 * base.kp[i]).abs() < 1e-12);
        assert!((low.kd[i] - 0.5 * base.kd[i]).abs() < 1e-12);
    }
}

#[test]
fn lstm_matches_hand_written_recurrence() {
    let arch = small(2);
    let p = random_params(&arch, 7, 0.6);
    let steps = 6usize;
    let obs: Vec<f64> = (0..steps as u64).flat_map(|t| random_obs(&arch, 100 + t)).collect();
    let mut starts = vec![false; steps];
    starts[3] = true;
    let h0 = RecurrentState { hidden: vec![0.2; 5], cell: vec![-0.4; 5] };
    let tape = actor_forward_seq(&p, &obs, &starts, &h0);

    let od = arch.obs_dim();
    let (mut h, mut c) = (h0.hidden.clone(), h0.cell.clone());
    for t in 0..steps {
        if starts[t] {
            h = vec![0.0; 5];
            c = vec![0.0; 5];
        }
        let (pre, h2, c2) = oracle_step(&p, &obs[t * od..(t + 1) * od], &h, &c);
        for (a, b) in tape.pre(t).iter().zip(&pre) {
            assert!((a - b).abs() < 1e-12, "step {t}: {a} vs {b}");
        }
        let s = tape.state_after(&p, t);
        assert!(s.hidden.iter().zip(&h2).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(s.cell.iter().zip(&c2).all(|(a, b)| (a - b).abs() < 1e-12));
        h = h2;
        c = c2;
    }
}

#[test]
fn single_step_forward_agrees_with_sequence_forward() {
    let arch = small(3);
    let p = random_params(&arch, 8, 0.5);
    let mut state = RecurrentState::zeros(&arch);
    let obs: Vec<f64> = (0..4).flat_map(|t| random_obs(&arch, 200 + t)).collect();
    let tape = actor_forward_seq(&p, &obs, &[true, false, false, false], &state);
    let od = arch.obs_dim();
    for t in 0..4 {
        let (out, next) = actor_forward(&p, &obs[t * od..(t + 1) * od], &state).unwrap();
        assert_eq!(out.pre_squash, tape.pre(t));
        state = next;
    }
    assert_eq!(state, tape.final_state(&p));
}

#[test]
fn feedforward_core_ignores_recurrent_state() {
    let arch = PolicyArch { recurrent: false, ..small(2) };
    let p = random_params(&arch, 9, 0.5);
    assert!(p.layout.core_wh.is_empty());
    let obs = random_obs(&arch, 3);
    let (a, _) = actor_forward(&p, &obs, &RecurrentState::zeros(&arch)).unwrap();
    let busy = RecurrentState { hidden: vec![0.7; 5], cell: vec![-0.3; 5] };
    let (b, _) = actor_forward(&p, &obs, &busy).unwrap();
    assert_eq!(a, b);
}

#[test]
fn critic_without_hidden_layers_is_linear() {
    let arch = PolicyArch { critic_hidden: vec![], ..small(2) };
    let p = random_params(&arch, 10, 0.5);
    let (w, b) = p.layout.critic[0];
    let mut rng = rng_from_seed(4);
    let x: Vec<f64> = (0..arch.critic_input_dim()).map(|_| rng.random_range(-2.0..=2.0)).collect();
    let expected = dense(&p, w, b, &x)[0];
    assert!((critic_forward(&p, &x).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn critic_hidden_layer_matches_hand_computation() {
    let arch = small(1);
    let p = random_params(&arch, 11, 0.5);
    let mut rng = rng_from_seed(5);
    let x: Vec<f64> = (0..arch.critic_input_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let (w0, b0) = p.layout.critic[0];
    let (w1, b1) = p.layout.critic[1];
    let hidden: Vec<f64> = dense(&p, w0, b0, &x).iter().map(|v| v.tanh()).collect();
    let expected = dense(&p, w1, b1, &hidden)[0];
    assert!((critic_forward(&p, &x).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn wrong_observation_width_is_rejected() {
    let arch = small(2);
    let p = PolicyParams::zeros(&arch).unwrap();
    assert!(actor_forward(&p, &[0.0; 3], &RecurrentState::zeros(&arch)).is_err());
    assert!(critic_forward(&p, &[0.0; 3]).is_err());
}

#[test]
fn sampled_log_prob_matches_change_of_variables() {
    let arch = small(2);
    let mean = [0.3, -1.2, 0.0, 2.0];
    let log_std = [-1.0, -0.5, 0.2, -2.0];
    let s = sample_action(&arch, &mean, &log_std, &mut rng_from_seed(12)).unwrap();
    let bounds = arch.bounds();
    let mut expected = 0.0;
    for k in 0..4 {
        let sd = f64::exp(log_std[k]);
        let u = s.pre_squash[k];
        let gauss = (-(u - mean[k]).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        let jac = bounds[k] * (1.0 - u.tanh().powi(2));
        expected += (gauss / jac).ln();
    }
    assert!((s.log_prob - expected).abs() < 1e-9, "{} vs {expected}", s.log_prob);
    let a = s.action.to_vec();
    for k in 0..4 {
        assert!((a[k] - bounds[k] * s.pre_squash[k].tanh()).abs() < 1e-15);
    }
}

#[test]
fn squashed_log_prob_is_stable_far_in_the_tails() {
    let arch = small(1);
    let lp = squashed_log_prob(&arch, &[40.0, -40.0], &[0.0, 0.0], &[2.0, 2.0]);
    assert!(lp.is_finite());
}

#[test]
fn sample_statistics_match_mean_and_std() {
    let arch = small(1);
    let mean = [0.4, -0.8];
    let log_std = [-1.0, 0.3];
    let mut rng = rng_from_seed(13);
    let n = 40_000;
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    for _ in 0..n {
        let s = sample_action(&arch, &mean, &log_std, &mut rng).unwrap();
        for k in 0..2 {
            sum[k] += s.pre_squash[k];
            sq[k] += s.pre_squash[k] * s.pre_squash[k];
        }
    }
    for k in 0..2 {
        let m = sum[k] / n as f64;
        let sd = (sq[k] / n as f64 - m * m).sqrt();
        let true_sd = f64::exp(log_std[k]);
        // five standard errors of the mean and of the standard deviation
        assert!((m - mean[k]).abs() < 5.0 * true_sd / (n as f64).sqrt(), "mean {m}");
        assert!((sd - true_sd).abs() < 5.0 * true_sd / (2.0 * n as f64).sqrt(), "sd {sd}");
    }
}

#[test]
fn entropy_matches_closed_form() {
    let ls = [-1.0, 0.5];
    let e: f64 = ls.iter().map(|l| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * f64::exp(2.0 * l)).ln()).sum();
    assert!((gaussian_entropy(&ls) - e).abs() < 1e-12);
}

#[test]
fn observation_pads_history_with_oldest_frame_and_zeroes_idle_command() {
    let arch = PolicyArch { history: 3, ..small(1) };
    let frame = |v: f64| ProprioFrame { q: vec![v], qdot: vec![10.0 * v], prev_action: vec![v, -v] };
    let cmd = TargetCommand::new(Pose2 { p: [0.5, 0.0], theta: 0.0 }, false);
    let obs = encode_observation(&arch, &[frame(1.0), frame(2.0)], &cmd, None).unwrap();
    let q = |v: f64| [v, 10.0 * v * QDOT_SCALE, v, -v];
    let expected: Vec<f64> = q(1.0).into_iter().chain(q(1.0)).chain(q(2.0)).chain([0.0; 4]).collect();
    assert_eq!(obs, expected);
}

#[test]
fn engaged_command_is_encoded_relative_to_grip_frame() {
    let arch = PolicyArch { history: 1, ..small(1) };
    let frame = ProprioFrame { q: vec![0.0], qdot: vec![0.0], prev_action: vec![0.0, 0.0] };
    let grip = Pose2 { p: [0.3, 0.2], theta: 0.5 };
    let cmd = TargetCommand::new(grip, true);
    let obs = encode_observation(&arch, &[frame], &cmd, Some(&grip)).unwrap();
    let vr = &obs[obs.len() - VR_DIM..];
    assert!(vr[..3].iter().all(|v| v.abs() < 1e-12), "{vr:?}");
    assert_eq!(vr[3], 1.0);
}

#[test]
fn parameter_file_round_trips_exactly() {
    for arch in [small(3), PolicyArch { recurrent: false, activation: Activation::Identity, critic_hidden: vec![], ..small(2) }] {
        let p = random_params(&arch, 14, 3.0);
        let bytes = write_params(&p);
        assert_eq!(read_params(&bytes).unwrap(), p);
    }
}

#[test]
fn parameter_file_round_trips_through_disk() {
    let p = random_params(&small(2), 15, 1.0);
    let path = std::env::temp_dir().join(format!("tfnp_roundtrip_{}.tfnp", std::process::id()));
    save_params(&p, &path).unwrap();
    let q = load_params(&path).unwrap();
    std::fs::remove_file(&path).ok();
    assert_eq!(p, q);
}

#[test]
fn unknown_format_version_is_rejected_by_name() {
    let mut bytes = write_params(&random_params(&small(1), 16, 1.0));
    bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
    match read_params(&bytes) {
        Err(ParamsIoError::Version { found: 7, expected }) => assert_eq!(expected, FORMAT_VERSION),
        other => panic!("{other:?}"),
    }
}

#[test]
fn corrupted_or_truncated_files_are_rejected() {
    let bytes = write_params(&random_params(&small(1), 17, 1.0));
    assert!(matches!(read_params(b"NOPE0000000000"), Err(ParamsIoError::BadMagic)));
    for pos in [9, bytes.len() / 2, bytes.len() - 5] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        assert!(matches!(read_params(&bad), Err(ParamsIoError::Corrupt(_))), "flip at {pos}");
    }
    assert!(read_params(&bytes[..bytes.len() - 9]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn actions_stay_within_bounds(seed in any::<u64>(), scale in 0.0..20.0f64, obs_scale in 0.0..100.0f64) {
        let arch = small(2);
        let p = random_params(&arch, seed, scale);
        let obs: Vec<f64> = random_obs(&arch, seed ^ 1).iter().map(|v| v * obs_scale).collect();
        let (out, _) = actor_forward(&p, &obs, &RecurrentState::zeros(&arch)).unwrap();
        prop_assert!(out.action.q_target_offset.iter().all(|v| v.abs() <= arch.offset_bound));
        prop_assert!(out.action.tau_ff.iter().all(|v| v.abs() <= arch.torque_bound));
        let s = sample_action(&arch, &out.pre_squash, &[1.0; 4], &mut rng_from_seed(seed)).unwrap();
        prop_assert!(s.action.normalized(&arch).iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn recurrent_state_stays_bounded(seed in any::<u64>(), steps in 1usize..40) {
        let arch = small(1);
        let p = random_params(&arch, seed, 5.0);
        let obs: Vec<f64> = (0..steps as u64).flat_map(|t| random_obs(&arch, seed.wrapping_add(t))).collect();
        let tape = actor_forward_seq(&p, &obs, &vec![false; steps], &RecurrentState::zeros(&arch));
        let s = tape.final_state(&p);
        prop_assert!(s.hidden.iter().all(|h| h.abs() < 1.0));
        prop_assert!(s.cell.iter().all(|c| c.abs() <= steps as f64));
    }
}
