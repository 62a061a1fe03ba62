//! JSON frames exchanged on the `/teleop` WebSocket.
//!
//! Every frame is one object carrying `"v": 1` and a `"kind"` tag. Fields a
//! decoder does not know are ignored.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use teleforge_core::kinematics::{ChainModel, Pose2};
use thiserror::Error;

pub const SCHEMA_VERSION: u64 = 1;

/// Commands are clamped to this fraction of the arm's reach.
pub const WORKSPACE_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{0}")]
pub struct CodecError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl From<Pose2> for Pose {
    fn from(p: Pose2) -> Self {
        Pose {
            x: p.p[0],
            y: p.p[1],
            theta: p.theta,
        }
    }
}

impl From<Pose> for Pose2 {
    fn from(p: Pose) -> Self {
        Pose2::new(p.x, p.y, p.theta)
    }
}

/// Commanded pose; without `theta` the current target heading is kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetPose {
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerChoice {
    Ik,
    Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientMessage {
    SetTarget { pose: TargetPose },
    Grip { value: bool },
    Trigger { value: bool },
    SetController { controller: ControllerChoice },
    /// End-effector force in N.
    SetForce { force: [f64; 2] },
    Reset,
}

impl ClientMessage {
    pub const KINDS: [&'static str; 6] = ["set_target", "grip", "trigger", "set_controller", "set_force", "reset"];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiveMetrics {
    /// End-effector distance to the target (m).
    pub e_track: f64,
    /// Joint-acceleration norm over the last control tick (rad/s^2).
    pub qddot_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub time: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub ee: Pose,
    pub target: Pose,
    pub grip: bool,
    pub trigger: bool,
    pub controller: ControllerChoice,
    /// `[fx, fy, torque]` applied at the end-effector.
    pub wrench: [f64; 3],
    pub metrics: LiveMetrics,
}

/// Fixed affine map from workspace meters to canvas pixels:
/// `px = a x + b y + c`, `py = d x + e y + f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewport {
    pub width: u32,
    pub height: u32,
    pub to_pixel: [f64; 6],
}

impl Viewport {
    /// Square canvas centred on the base with +y up and a 5% margin.
    pub fn for_reach(reach: f64) -> Self {
        let size = 640u32;
        let half = size as f64 / 2.0;
        let s = half / (1.05 * reach);
        Viewport {
            width: size,
            height: size,
            to_pixel: [s, 0.0, half, 0.0, -s, half],
        }
    }

    pub fn pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.to_pixel;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }

    pub fn workspace(&self, px: f64, py: f64) -> (f64, f64) {
        let m = &self.to_pixel;
        let det = m[0] * m[4] - m[1] * m[3];
        let (u, v) = (px - m[2], py - m[5]);
        ((m[4] * u - m[1] * v) / det, (m[0] * v - m[3] * u) / det)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub schema: u64,
    pub link_lengths: Vec<f64>,
    pub joint_limits: Vec<(f64, f64)>,
    pub reach: f64,
    /// Radius commands are clamped to (m).
    pub workspace_radius: f64,
    pub viewport: Viewport,
    pub control_hz: f64,
    pub sim_hz: f64,
    pub frame_hz: f64,
    pub policy_available: bool,
}

impl Hello {
    pub fn new(chain: &ChainModel, frame_hz: f64, policy_available: bool) -> Self {
        let reach = chain.reach();
        Hello {
            schema: SCHEMA_VERSION,
            link_lengths: chain.link_lengths.clone(),
            joint_limits: chain.joint_limits.clone(),
            reach,
            workspace_radius: WORKSPACE_FRACTION * reach,
            viewport: Viewport::for_reach(reach),
            control_hz: 1.0 / teleforge_core::sim::CONTROL_DT,
            sim_hz: 1.0 / teleforge_core::sim::SIM_DT,
            frame_hz,
            policy_available,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello(Hello),
    State(StateFrame),
    Error { reason: String },
}

impl ServerMessage {
    pub const KINDS: [&'static str; 3] = ["hello", "state", "error"];

    pub fn error(reason: impl Into<String>) -> Self {
        ServerMessage::Error { reason: reason.into() }
    }
}

fn encode_tagged<T: Serialize>(msg: &T) -> String {
    let mut value = serde_json::to_value(msg).expect("frames are plain data");
    if let Value::Object(map) = &mut value {
        map.insert("v".into(), Value::from(SCHEMA_VERSION));
    }
    value.to_string()
}

/// Checks the envelope and returns the object with its kind.
fn envelope(text: &str, kinds: &[&str]) -> Result<(Map<String, Value>, String), CodecError> {
    let value: Value = serde_json::from_str(text).map_err(|e| CodecError(format!("invalid json: {e}")))?;
    let Value::Object(map) = value else {
        return Err(CodecError("frame must be a json object".into()));
    };
    match map.get("v") {
        None => return Err(CodecError(format!("missing v, expected v={SCHEMA_VERSION}"))),
        Some(v) if v.as_u64() != Some(SCHEMA_VERSION) => {
            return Err(CodecError(format!("unsupported version {v}, expected v={SCHEMA_VERSION}")))
        }
        _ => {}
    }
    let kind = match map.get("kind") {
        None => return Err(CodecError("missing kind".into())),
        Some(Value::String(k)) => k.clone(),
        Some(_) => return Err(CodecError("kind must be a string".into())),
    };
    if !kinds.contains(&kind.as_str()) {
        return Err(CodecError(format!("unknown kind \"{kind}\"")));
    }
    Ok((map, kind))
}

fn decode_tagged<T: for<'de> Deserialize<'de>>(text: &str, kinds: &[&str]) -> Result<T, CodecError> {
    let (map, kind) = envelope(text, kinds)?;
    serde_json::from_value(Value::Object(map)).map_err(|e| CodecError(format!("bad {kind} frame: {e}")))
}

pub fn encode_client(msg: &ClientMessage) -> String {
    encode_tagged(msg)
}

pub fn decode_client(text: &str) -> Result<ClientMessage, CodecError> {
    decode_tagged(text, &ClientMessage::KINDS)
}

pub fn encode_server(msg: &ServerMessage) -> String {
    encode_tagged(msg)
}

pub fn decode_server(text: &str) -> Result<ServerMessage, CodecError> {
    decode_tagged(text, &ServerMessage::KINDS)
}

/// Pulls `(x, y)` radially inside `WORKSPACE_FRACTION * reach`.
pub fn clamp_to_workspace(x: f64, y: f64, reach: f64) -> (f64, f64) {
    let r = x.hypot(y);
    let limit = WORKSPACE_FRACTION * reach;
    if r > limit {
        (x * limit / r, y * limit / r)
    } else {
        (x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_kind_is_reported_as_such() {
        assert_eq!(decode_client(r#"{"v":1,"value":true}"#).unwrap_err().0, "missing kind");
    }

    #[test]
    fn version_mismatch_names_expected_version() {
        let e = decode_client(r#"{"v":2,"kind":"reset"}"#).unwrap_err().0;
        assert!(e.contains("expected v=1"), "{e}");
    }

    #[test]
    fn unknown_kind_and_bad_payload_are_errors() {
        assert!(decode_client(r#"{"v":1,"kind":"fly"}"#).unwrap_err().0.contains("unknown kind"));
        assert!(decode_client(r#"{"v":1,"kind":"grip"}"#).unwrap_err().0.contains("bad grip frame"));
        assert!(decode_client("[1,2]").is_err());
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let m = decode_client(r#"{"v":1,"kind":"grip","value":true,"extra":[1,2]}"#).unwrap();
        assert_eq!(m, ClientMessage::Grip { value: true });
    }

    #[test]
    fn target_heading_is_optional() {
        let m = decode_client(r#"{"v":1,"kind":"set_target","pose":{"x":0.1,"y":0.2}}"#).unwrap();
        assert_eq!(m, ClientMessage::SetTarget { pose: TargetPose { x: 0.1, y: 0.2, theta: None } });
    }

    #[test]
    fn clamping_keeps_direction_and_inner_points() {
        let (x, y) = clamp_to_workspace(3.0, 4.0, 1.0);
        assert!((x.hypot(y) - 0.95).abs() < 1e-12 && (y / x - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(clamp_to_workspace(0.1, -0.2, 1.0), (0.1, -0.2));
    }

    #[test]
    fn viewport_maps_base_to_centre_and_inverts() {
        let v = Viewport::for_reach(1.2);
        assert_eq!(v.pixel(0.0, 0.0), (320.0, 320.0));
        let (px, py) = v.pixel(0.3, -0.7);
        let (x, y) = v.workspace(px, py);
        assert!((x - 0.3).abs() < 1e-12 && (y + 0.7).abs() < 1e-12);
        assert!(v.pixel(0.0, 1.0).1 < 320.0);
    }
}
