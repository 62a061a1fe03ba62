use std::f64::consts::PI;

use proptest::prelude::*;
use teleforge_core::kinematics::*;

fn chain4() -> ChainModel {
    ChainModel::default()
}

/// Product of homogeneous 3x3 transforms `Rot(q_i) * Trans(l_i, 0)`.
fn fk_oracle(links: &[f64], q: &[f64]) -> ([f64; 2], f64) {
    let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for (l, qi) in links.iter().zip(q) {
        let (s, c) = qi.sin_cos();
        let t = [[c, -s, c * l], [s, c, s * l], [0.0, 0.0, 1.0]];
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| m[i][k] * t[k][j]).sum();
            }
        }
        m = out;
    }
    ([m[0][2], m[1][2]], m[1][0].atan2(m[0][0]))
}

fn q_in_limits() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.9..2.9f64, 4)
}

fn pose() -> impl Strategy<Value = Pose2> {
    (-2.0..2.0f64, -2.0..2.0f64, -PI..PI).prop_map(|(x, y, t)| Pose2::new(x, y, t))
}

fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

fn pose_close(a: &Pose2, b: &Pose2, tol: f64) -> bool {
    (a.p[0] - b.p[0]).abs() < tol && (a.p[1] - b.p[1]).abs() < tol && angle_diff(a.theta, b.theta) < tol
}

#[test]
fn straight_arm_reaches_full_length() {
    let p = forward_kinematics(&chain4(), &[0.0; 4]).unwrap();
    assert!((p.p[0] - 1.2).abs() < 1e-12 && p.p[1].abs() < 1e-12 && p.theta == 0.0);
    assert!((chain4().reach() - 1.2).abs() < 1e-12);
}

#[test]
fn jacobian_third_row_is_all_ones() {
    let j = jacobian(&chain4(), &[0.3, -1.0, 2.0, 0.1]).unwrap();
    assert!(j.row(2).iter().all(|v| *v == 1.0));
}

#[test]
fn malformed_chains_are_rejected() {
    assert!(ChainModel::new(vec![], vec![], vec![]).is_err());
    assert!(ChainModel::new(vec![0.3, -0.1], vec![(-1.0, 1.0); 2], vec![1.0; 2]).is_err());
    assert!(ChainModel::new(vec![0.3], vec![(1.0, -1.0)], vec![1.0]).is_err());
    assert!(ChainModel::new(vec![0.3], vec![(-1.0, 1.0)], vec![0.0]).is_err());
}

#[test]
fn non_finite_joints_are_rejected() {
    assert!(forward_kinematics(&chain4(), &[0.0, f64::NAN, 0.0, 0.0]).is_err());
    assert!(jacobian(&chain4(), &[0.0, 0.0, f64::INFINITY, 0.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fk_matches_transform_product(q in q_in_limits()) {
        let chain = chain4();
        let p = forward_kinematics(&chain, &q).unwrap();
        let (xy, theta) = fk_oracle(&chain.link_lengths, &q);
        prop_assert!((p.p[0] - xy[0]).abs() < 1e-12 && (p.p[1] - xy[1]).abs() < 1e-12);
        prop_assert!(angle_diff(p.theta, theta) < 1e-12);
        prop_assert!(p.p[0].hypot(p.p[1]) <= chain.reach() + 1e-12);
    }

    #[test]
    fn jacobian_matches_central_differences(q in q_in_limits()) {
        let chain = chain4();
        let j = jacobian(&chain, &q).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            let a = forward_kinematics(&chain, &qp).unwrap();
            let b = forward_kinematics(&chain, &qm).unwrap();
            let fd = [
                (a.p[0] - b.p[0]) / (2.0 * h),
                (a.p[1] - b.p[1]) / (2.0 * h),
                wrap_angle(a.theta - b.theta) / (2.0 * h),
            ];
            let col = j.column(i);
            for r in 0..3 {
                prop_assert!((col[r] - fd[r]).abs() < 1e-6, "joint {i} row {r}: {} vs {}", col[r], fd[r]);
            }
        }
    }

    #[test]
    fn wrapped_angles_lie_in_half_open_interval(theta in -1e3..1e3f64) {
        let w = wrap_angle(theta);
        prop_assert!(w > -PI && w <= PI);
        prop_assert!(((theta - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((theta - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
    }

    #[test]
    fn relative_pose_is_frame_invariant(a in pose(), b in pose(), g in pose()) {
        let r = relative_pose(&a, &b);
        let r2 = relative_pose(&g.compose(&a), &g.compose(&b));
        prop_assert!(pose_close(&r, &r2, 1e-12), "{r:?} vs {r2:?}");
    }

    #[test]
    fn relative_poses_form_an_inverse_pair(a in pose(), b in pose()) {
        let id = relative_pose(&a, &b).compose(&relative_pose(&b, &a));
        prop_assert!(pose_close(&id, &Pose2::IDENTITY, 1e-12), "{id:?}");
        prop_assert!(pose_close(&relative_pose(&a, &a), &Pose2::IDENTITY, 1e-12));
    }
}
