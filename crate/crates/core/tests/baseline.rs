use proptest::prelude::*;
use rand::Rng;
use teleforge_core::baseline::*;
use teleforge_core::kinematics::*;
use teleforge_core::sim::*;
use teleforge_core::tasks::TargetCommand;

const HOME: [f64; 4] = [-0.5, 1.2, 0.8, 0.3];

fn chain4() -> ChainModel {
    ChainModel::default()
}

fn controller() -> IkPdController {
    IkPdController::new(chain4(), PdGains::default_for(4), IkConfig::default())
}

/// Closed loop at the control rate with a constant command and wrench.
/// Returns the final state.
fn run(ctl: &mut IkPdController, cmd: &TargetCommand, wrench: ExternalWrench, seconds: f64) -> SimState {
    let chain = chain4();
    let params = DynamicsParams::nominal(4);
    let mut s = SimState::at_rest(HOME.to_vec());
    for _ in 0..(seconds / CONTROL_DT).round() as usize {
        let tau = ctl.act(cmd, &s).unwrap();
        for _ in 0..SUBSTEPS {
            s = step(&s, &tau, &wrench, &params, SIM_DT, &chain).unwrap();
        }
    }
    s
}

fn ee_error(s: &SimState, target: &Pose2) -> f64 {
    let p = forward_kinematics(&chain4(), &s.q).unwrap();
    (p.p[0] - target.p[0]).hypot(p.p[1] - target.p[1])
}

#[test]
fn reachable_targets_converge_from_a_neutral_seed() {
    let chain = chain4();
    let mut rng = rng_from_seed(42);
    let mut converged = 0;
    for _ in 0..100 {
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-2.9..2.9)).collect();
        let target = forward_kinematics(&chain, &q).unwrap();
        let sol = solve_ik(&chain, &HOME, &target, &IkConfig::default()).unwrap();
        assert!(sol.iterations <= 200);
        if sol.converged && sol.residual < 1e-3 {
            converged += 1;
        }
    }
    assert!(converged >= 99, "{converged} of 100");
}

#[test]
fn far_target_straightens_the_arm_toward_it() {
    let chain = chain4();
    let dir: f64 = 0.7;
    let target = Pose2::new(2.4 * dir.cos(), 2.4 * dir.sin(), 0.0);
    let sol = solve_ik(&chain, &HOME, &target, &IkConfig::default()).unwrap();
    assert!(!sol.converged);
    let p = forward_kinematics(&chain, &sol.q).unwrap();
    let bearing = p.p[1].atan2(p.p[0]);
    assert!(wrap_angle(bearing - dir).abs() < 5f64.to_radians(), "bearing {bearing}");
}

#[test]
fn pd_torque_vanishes_at_target_and_matches_hand_value() {
    let s = SimState::at_rest(HOME.to_vec());
    let g = PdGains::default_for(4);
    assert!(pd_torque(&g, &HOME, &[0.0; 4], &s).unwrap().iter().all(|t| *t == 0.0));
    let g = PdGains { kp: vec![10.0; 4], kd: vec![0.0; 4] };
    let mut target = HOME;
    target[2] += 0.1;
    let tau = pd_torque(&g, &target, &[0.0; 4], &s).unwrap();
    assert!((tau[2] - 1.0).abs() < 1e-12 && tau[0] == 0.0);
}

#[test]
fn released_grip_settles_at_hold_pose() {
    let mut ctl = controller();
    let cmd = TargetCommand::new(Pose2::new(0.5, 0.5, 0.0), false);
    let s = run(&mut ctl, &cmd, ExternalWrench::ZERO, 3.0);
    assert!(s.qdot.iter().all(|v| v.abs() < 1e-3), "{:?}", s.qdot);
    assert_eq!(ctl.q_target(), &HOME);
}

#[test]
fn engaged_static_target_is_reached_within_two_seconds() {
    let start = forward_kinematics(&chain4(), &HOME).unwrap();
    let target = Pose2::new(start.p[0] + 0.1, start.p[1] - 0.05, start.theta);
    let s = run(&mut controller(), &TargetCommand::new(target, true), ExternalWrench::ZERO, 2.0);
    assert!(ee_error(&s, &target) < 0.02, "{}", ee_error(&s, &target));
}

#[test]
fn lateral_force_increases_steady_state_error() {
    let start = forward_kinematics(&chain4(), &HOME).unwrap();
    let target = Pose2::new(start.p[0] + 0.1, start.p[1] - 0.05, start.theta);
    let cmd = TargetCommand::new(target, true);
    let free = ee_error(&run(&mut controller(), &cmd, ExternalWrench::ZERO, 4.0), &target);
    let pushed = ee_error(&run(&mut controller(), &cmd, ExternalWrench::from_force(0.0, 15.0), 4.0), &target);
    assert!(pushed > free, "{pushed} <= {free}");
    assert!(pushed > 0.05, "{pushed}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ik_never_reports_worse_than_its_seed(seed_q in proptest::collection::vec(-2.9..2.9f64, 4), x in -1.5..1.5f64, y in -1.5..1.5f64, th in -3.0..3.0f64) {
        let chain = chain4();
        let target = Pose2::new(x, y, th);
        let sol = solve_ik(&chain, &seed_q, &target, &IkConfig::default()).unwrap();
        let p0 = forward_kinematics(&chain, &seed_q).unwrap();
        let e0 = [target.p[0] - p0.p[0], target.p[1] - p0.p[1], wrap_angle(target.theta - p0.theta)];
        let e1 = [sol.residual, 0.0, sol.rot_residual];
        let n = |e: [f64; 3]| (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
        prop_assert!(n(e1) <= n([e0[0].hypot(e0[1]), 0.0, e0[2]]) + 1e-12);
        prop_assert!(sol.q.iter().all(|v| v.is_finite()));
        prop_assert!(chain.within_limits(&sol.q));
    }

    #[test]
    fn pd_torque_is_linear_in_errors(e in proptest::collection::vec(-1.0..1.0f64, 4), v in proptest::collection::vec(-3.0..3.0f64, 4)) {
        let g = PdGains::default_for(4);
        let s = SimState { q: vec![0.0; 4], qdot: v.iter().map(|x| -x).collect(), time: 0.0 };
        let s2 = SimState { q: vec![0.0; 4], qdot: v.iter().map(|x| -2.0 * x).collect(), time: 0.0 };
        let t1 = pd_torque(&g, &e, &[0.0; 4], &s).unwrap();
        let e2: Vec<f64> = e.iter().map(|x| 2.0 * x).collect();
        let t2 = pd_torque(&g, &e2, &[0.0; 4], &s2).unwrap();
        for i in 0..4 {
            prop_assert_eq!(t2[i], 2.0 * t1[i]);
            prop_assert_eq!(t1[i], g.kp[i] * e[i] + g.kd[i] * v[i]);
        }
    }
}
