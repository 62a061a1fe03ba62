mod common;

use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;
use teleforge::protocol::*;
use teleforge::server::{serve, ServeConfig, ServerHandle, TeleopClient};
use teleforge_core::policy::PolicyParams;

fn start(policy: Option<Arc<PolicyParams>>) -> ServerHandle {
    let config = ServeConfig::from_experiment(&teleforge::ExperimentConfig::default(), policy, 0).unwrap();
    serve(config).unwrap()
}

fn hello(client: &mut TeleopClient) -> Hello {
    match client.next().unwrap() {
        ServerMessage::Hello(h) => h,
        other => panic!("expected hello, got {other:?}"),
    }
}

fn next_error(client: &mut TeleopClient) -> String {
    for _ in 0..200 {
        if let ServerMessage::Error { reason } = client.next().unwrap() {
            return reason;
        }
    }
    panic!("no error frame");
}

fn state(client: &mut TeleopClient) -> StateFrame {
    loop {
        if let ServerMessage::State(f) = client.next().unwrap() {
            return f;
        }
    }
}

#[test]
fn hello_announces_schema_geometry_and_viewport() {
    let server = start(None);
    let mut c = TeleopClient::connect(&server.url()).unwrap();
    let h = hello(&mut c);
    assert_eq!(h.schema, SCHEMA_VERSION);
    assert_eq!(h.link_lengths, vec![0.3; 4]);
    assert!((h.workspace_radius - 0.95 * 1.2).abs() < 1e-12);
    assert_eq!(h.viewport.pixel(0.0, 0.0), (320.0, 320.0));
    assert!(!h.policy_available);
    assert_eq!((h.control_hz, h.sim_hz), (50.0, 100.0));
}

#[test]
fn other_paths_are_refused() {
    let server = start(None);
    let url = server.url().replace("/teleop", "/other");
    assert!(TeleopClient::connect(&url).is_err());
}

#[test]
fn grip_move_release_session() {
    let server = start(None);
    let mut c = TeleopClient::connect(&server.url()).unwrap();
    hello(&mut c);
    let idle = state(&mut c);
    c.send(&ClientMessage::Grip { value: true }).unwrap();
    let target = TargetPose {
        x: idle.ee.x + 0.2,
        y: idle.ee.y,
        theta: None,
    };
    c.send(&ClientMessage::SetTarget { pose: target }).unwrap();
    let frames = c.collect_states(Duration::from_millis(1500)).unwrap();
    c.send(&ClientMessage::Grip { value: false }).unwrap();
    let after = c.collect_states(Duration::from_millis(300)).unwrap();
    c.close();

    let times: Vec<f64> = frames.iter().map(|(_, f)| f.time).collect();
    assert!(times.windows(2).all(|w| w[1] > w[0]), "time not monotone");
    let wall = frames.last().unwrap().0 - frames.first().unwrap().0;
    let rate = (frames.len() - 1) as f64 / wall.as_secs_f64();
    assert!(rate >= 30.0, "{rate} Hz");

    let moved: Vec<&StateFrame> = frames
        .iter()
        .map(|(_, f)| f)
        .filter(|f| f.grip && (f.target.x - target.x).abs() < 1e-9)
        .collect();
    assert!(moved.len() > 40, "{} frames after the move", moved.len());
    let first = moved[0].metrics.e_track;
    let one_second_later = moved[45.min(moved.len() - 1)].metrics.e_track;
    assert!(first > 0.15, "{first}");
    assert!(one_second_later < 0.5 * first, "{first} -> {one_second_later}");
    assert!(after.iter().any(|(_, f)| !f.grip));
}

#[test]
fn malformed_frames_get_error_replies_and_keep_the_connection() {
    let server = start(None);
    let mut c = TeleopClient::connect(&server.url()).unwrap();
    hello(&mut c);
    c.send_raw(r#"{"v":1,"value":true}"#).unwrap();
    assert_eq!(next_error(&mut c), "missing kind");
    c.send_raw(r#"{"v":7,"kind":"reset"}"#).unwrap();
    assert!(next_error(&mut c).contains("expected v=1"));
    c.send_raw(r#"{"v":1,"kind":"teleport"}"#).unwrap();
    assert!(next_error(&mut c).contains("unknown kind"));
    c.send_raw("not json").unwrap();
    assert!(next_error(&mut c).contains("invalid json"));
    c.send(&ClientMessage::SetController {
        controller: ControllerChoice::Policy,
    })
    .unwrap();
    assert!(next_error(&mut c).contains("policy controller unavailable"));
    // still serving
    c.send(&ClientMessage::SetForce { force: [3.0, -1.0] }).unwrap();
    let mut seen = false;
    for _ in 0..50 {
        if state(&mut c).wrench[..2] == [3.0, -1.0] {
            seen = true;
            break;
        }
    }
    assert!(seen);
}

#[test]
fn policy_controller_runs_when_a_checkpoint_is_loaded() {
    let arch = teleforge::ExperimentConfig::default().policy;
    let server = start(Some(Arc::new(PolicyParams::zeros(&arch).unwrap())));
    let mut c = TeleopClient::connect(&server.url()).unwrap();
    assert!(hello(&mut c).policy_available);
    c.send(&ClientMessage::SetController {
        controller: ControllerChoice::Policy,
    })
    .unwrap();
    let frames = c.collect_states(Duration::from_millis(300)).unwrap();
    assert!(frames.iter().any(|(_, f)| f.controller == ControllerChoice::Policy));
    assert!(frames.iter().all(|(_, f)| f.q.iter().all(|q| q.is_finite())));
}

#[test]
fn idle_server_holds_without_clients() {
    let server = start(None);
    std::thread::sleep(Duration::from_millis(300));
    let mut c = TeleopClient::connect(&server.url()).unwrap();
    hello(&mut c);
    let f = state(&mut c);
    assert!(f.time > 0.2, "{}", f.time);
    assert!(!f.grip);
    assert!(f.qdot.iter().all(|v| v.abs() < 1e-6), "{:?}", f.qdot);
    c.close();
    server.shutdown();
}

fn finite() -> impl Strategy<Value = f64> {
    -1e3..1e3f64
}

fn client_message() -> impl Strategy<Value = ClientMessage> {
    prop_oneof![
        (finite(), finite(), proptest::option::of(finite()))
            .prop_map(|(x, y, theta)| ClientMessage::SetTarget { pose: TargetPose { x, y, theta } }),
        any::<bool>().prop_map(|value| ClientMessage::Grip { value }),
        any::<bool>().prop_map(|value| ClientMessage::Trigger { value }),
        prop_oneof![Just(ControllerChoice::Ik), Just(ControllerChoice::Policy)]
            .prop_map(|controller| ClientMessage::SetController { controller }),
        (finite(), finite()).prop_map(|(a, b)| ClientMessage::SetForce { force: [a, b] }),
        Just(ClientMessage::Reset),
    ]
}

fn pose() -> impl Strategy<Value = Pose> {
    (finite(), finite(), finite()).prop_map(|(x, y, theta)| Pose { x, y, theta })
}

fn state_frame() -> impl Strategy<Value = StateFrame> {
    (
        (0.0..1e6f64, proptest::collection::vec(finite(), 1..8), pose(), pose()),
        (any::<bool>(), any::<bool>(), any::<bool>(), [finite(), finite(), finite()], finite(), finite()),
    )
        .prop_map(|((time, q, ee, target), (grip, trigger, pol, wrench, e, a))| StateFrame {
            time,
            qdot: q.iter().map(|v| -v).collect(),
            q,
            ee,
            target,
            grip,
            trigger,
            controller: if pol { ControllerChoice::Policy } else { ControllerChoice::Ik },
            wrench,
            metrics: LiveMetrics { e_track: e, qddot_norm: a },
        })
}

proptest! {
    #[test]
    fn client_messages_round_trip(m in client_message()) {
        let text = encode_client(&m);
        prop_assert!(text.contains("\"v\":1"));
        prop_assert_eq!(decode_client(&text).unwrap(), m);
    }

    #[test]
    fn state_frames_round_trip(f in state_frame()) {
        let m = ServerMessage::State(f);
        prop_assert_eq!(decode_server(&encode_server(&m)).unwrap(), m);
    }

    #[test]
    fn decoding_never_panics(s in ".{0,64}") {
        let _ = decode_client(&s);
    }
}
