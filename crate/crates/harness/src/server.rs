//! Live teleoperation over WebSocket.
//!
//! One thread owns the simulated arm and runs the 50 Hz control loop in
//! real time. Each client gets a reader/writer thread; incoming commands
//! land in a latest-value-per-kind slot that the loop drains once per tick,
//! and outgoing frames go through a small per-client queue that drops its
//! oldest entry when full, so a slow client never holds up the loop.

use std::collections::VecDeque;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use teleforge_core::baseline::{IkConfig, IkPdController, PdGains};
use teleforge_core::kinematics::{forward_kinematics, ChainModel, Pose2};
use teleforge_core::policy::{PolicyController, PolicyParams};
use teleforge_core::sim::{step, DynamicsParams, ExternalWrench, SimState, CONTROL_DT, SIM_DT, SUBSTEPS};
use teleforge_core::tasks::{default_home, Controller, TargetCommand};
use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::{Message, WebSocket};

use crate::protocol::{
    clamp_to_workspace, decode_client, decode_server, encode_client, encode_server, ClientMessage, CodecError,
    ControllerChoice, Hello, LiveMetrics, Pose, ServerMessage, StateFrame,
};
use crate::{ExperimentConfig, HarnessError};

pub const DEFAULT_PORT: u16 = 8787;
pub const ENDPOINT: &str = "/teleop";

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub chain: ChainModel,
    pub nominal: DynamicsParams,
    pub home_q: Vec<f64>,
    pub gains: PdGains,
    pub ik: IkConfig,
    pub policy: Option<Arc<PolicyParams>>,
    pub host: String,
    /// 0 picks a free port.
    pub port: u16,
    /// Frames buffered per client before the oldest is dropped.
    pub queue_capacity: usize,
}

impl ServeConfig {
    pub fn from_experiment(config: &ExperimentConfig, policy: Option<Arc<PolicyParams>>, port: u16) -> Result<Self, HarnessError> {
        let p = config.pipeline()?;
        if let Some(params) = &policy {
            if params.arch.n_joints != p.chain.n() {
                return Err(HarnessError::Config("checkpoint and chain joint counts differ".into()));
            }
        }
        Ok(ServeConfig {
            home_q: p.home_q,
            nominal: p.nominal,
            gains: p.gains,
            ik: p.ik,
            chain: p.chain,
            policy,
            host: "127.0.0.1".into(),
            port,
            queue_capacity: 8,
        })
    }
}

/// The simulated arm and its controllers, advanced one control tick at a
/// time. No I/O; the server loop wraps it.
pub struct LiveSim {
    chain: ChainModel,
    params: DynamicsParams,
    home_q: Vec<f64>,
    state: SimState,
    ik: IkPdController,
    policy: Option<PolicyController>,
    active: ControllerChoice,
    command: TargetCommand,
    force: [f64; 2],
    qddot_norm: f64,
}

impl LiveSim {
    pub fn new(config: &ServeConfig) -> Result<Self, HarnessError> {
        let home_q = if config.home_q.is_empty() {
            default_home(config.chain.n())
        } else {
            config.home_q.clone()
        };
        let home_pose = forward_kinematics(&config.chain, &home_q)?;
        Ok(LiveSim {
            chain: config.chain.clone(),
            params: config.nominal.clone(),
            state: SimState::at_rest(home_q.clone()),
            home_q,
            ik: IkPdController::new(config.chain.clone(), config.gains.clone(), config.ik.clone()),
            policy: config.policy.clone().map(PolicyController::new),
            active: ControllerChoice::Ik,
            command: TargetCommand::new(home_pose, false),
            force: [0.0; 2],
            qddot_norm: 0.0,
        })
    }

    pub fn policy_available(&self) -> bool {
        self.policy.is_some()
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn command(&self) -> &TargetCommand {
        &self.command
    }

    fn ee(&self) -> Pose2 {
        forward_kinematics(&self.chain, &self.state.q).expect("state stays finite")
    }

    fn reset(&mut self) {
        self.state = SimState::at_rest(self.home_q.clone());
        self.command = TargetCommand::new(self.ee(), false);
        self.force = [0.0; 2];
        self.qddot_norm = 0.0;
        self.reset_controllers();
    }

    fn reset_controllers(&mut self) {
        Controller::reset(&mut self.ik);
        if let Some(p) = self.policy.as_mut() {
            Controller::reset(p);
        }
    }

    /// Applies one decoded command. A grip press moves the command to the
    /// current end-effector pose, as in the training scripts where the
    /// operator engages at the settled arm; targets that follow are absolute.
    pub fn apply(&mut self, msg: &ClientMessage) {
        match *msg {
            ClientMessage::Reset => self.reset(),
            ClientMessage::SetController { controller } => {
                if controller != self.active && (controller == ControllerChoice::Ik || self.policy.is_some()) {
                    self.active = controller;
                    self.reset_controllers();
                }
            }
            ClientMessage::SetForce { force } => {
                if force.iter().all(|f| f.is_finite()) {
                    self.force = force;
                }
            }
            ClientMessage::Trigger { value } => self.command.trigger = value,
            ClientMessage::Grip { value } => {
                if value && !self.command.grip {
                    self.command.pose = self.ee();
                }
                self.command.grip = value;
            }
            ClientMessage::SetTarget { pose } => {
                if pose.x.is_finite() && pose.y.is_finite() {
                    let (x, y) = clamp_to_workspace(pose.x, pose.y, self.chain.reach());
                    let theta = pose.theta.filter(|t| t.is_finite()).unwrap_or(self.command.pose.theta);
                    self.command.pose = Pose2::new(x, y, theta);
                }
            }
        }
    }

    pub fn wrench(&self) -> ExternalWrench {
        ExternalWrench::from_force(self.force[0], self.force[1])
    }

    /// One control tick: controller, then `SUBSTEPS` physics steps.
    pub fn tick(&mut self) -> StateFrame {
        let observed = self.state.clone();
        let torque = match (self.active, self.policy.as_mut()) {
            (ControllerChoice::Policy, Some(p)) => Controller::act(p, &observed, &self.command),
            _ => Controller::act(&mut self.ik, &observed, &self.command),
        }
        .ok()
        .filter(|t| t.iter().all(|v| v.is_finite()))
        .unwrap_or_else(|| vec![0.0; self.chain.n()]);
        let wrench = self.wrench();
        let before = self.state.qdot.clone();
        let mut next = self.state.clone();
        for _ in 0..SUBSTEPS {
            match step(&next, &torque, &wrench, &self.params, SIM_DT, &self.chain) {
                Ok(s) => next = s,
                Err(_) => {
                    // a blown-up state is not recoverable; start over
                    self.reset();
                    return self.frame();
                }
            }
        }
        self.qddot_norm = next
            .qdot
            .iter()
            .zip(&before)
            .map(|(a, b)| ((a - b) / CONTROL_DT).powi(2))
            .sum::<f64>()
            .sqrt();
        self.state = next;
        self.frame()
    }

    pub fn frame(&self) -> StateFrame {
        let ee = self.ee();
        let w = self.wrench();
        StateFrame {
            time: self.state.time,
            q: self.state.q.clone(),
            qdot: self.state.qdot.clone(),
            ee: ee.into(),
            target: self.command.pose.into(),
            grip: self.command.grip,
            trigger: self.command.trigger,
            controller: self.active,
            wrench: w.as_array(),
            metrics: LiveMetrics {
                e_track: ee.distance(&self.command.pose),
                qddot_norm: self.qddot_norm,
            },
        }
    }
}

/// Latest command of each kind since the last tick.
#[derive(Debug, Default)]
struct Pending {
    reset: bool,
    controller: Option<ControllerChoice>,
    force: Option<[f64; 2]>,
    trigger: Option<bool>,
    grip: Option<bool>,
    target: Option<ClientMessage>,
}

impl Pending {
    fn put(&mut self, msg: ClientMessage) {
        match msg {
            ClientMessage::Reset => *self = Pending { reset: true, ..Pending::default() },
            ClientMessage::SetController { controller } => self.controller = Some(controller),
            ClientMessage::SetForce { force } => self.force = Some(force),
            ClientMessage::Trigger { value } => self.trigger = Some(value),
            ClientMessage::Grip { value } => self.grip = Some(value),
            m @ ClientMessage::SetTarget { .. } => self.target = Some(m),
        }
    }

    /// In application order: reset first, grip before target so a press
    /// and a move in the same tick engage first and then move.
    fn drain(&mut self) -> Vec<ClientMessage> {
        let p = std::mem::take(self);
        let mut out = Vec::new();
        if p.reset {
            out.push(ClientMessage::Reset);
        }
        out.extend(p.controller.map(|controller| ClientMessage::SetController { controller }));
        out.extend(p.force.map(|force| ClientMessage::SetForce { force }));
        out.extend(p.trigger.map(|value| ClientMessage::Trigger { value }));
        out.extend(p.grip.map(|value| ClientMessage::Grip { value }));
        out.extend(p.target);
        out
    }
}

/// Bounded frame queue for one client; pushing onto a full queue drops
/// the oldest frame.
#[derive(Debug)]
pub struct Outbox {
    queue: Mutex<VecDeque<String>>,
    ready: Condvar,
    capacity: usize,
    closed: AtomicBool,
}

impl Outbox {
    pub fn new(capacity: usize) -> Self {
        Outbox {
            queue: Mutex::new(VecDeque::with_capacity(capacity)),
            ready: Condvar::new(),
            capacity: capacity.max(1),
            closed: AtomicBool::new(false),
        }
    }

    pub fn push(&self, frame: String) {
        let mut q = self.queue.lock().unwrap();
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(frame);
        self.ready.notify_one();
    }

    /// Everything queued, waiting up to `timeout` for the first frame.
    pub fn drain(&self, timeout: Duration) -> Vec<String> {
        let q = self.queue.lock().unwrap();
        let (mut q, _) = self.ready.wait_timeout_while(q, timeout, |q| q.is_empty()).unwrap();
        q.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.queue.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Shared {
    pending: Mutex<Pending>,
    clients: Mutex<Vec<Arc<Outbox>>>,
    shutdown: AtomicBool,
    hello: String,
    policy_available: bool,
    queue_capacity: usize,
}

/// A running server; dropping it shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}{}", self.addr, ENDPOINT)
    }

    pub fn client_count(&self) -> usize {
        self.shared.clients.lock().unwrap().len()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    /// Blocks until another thread calls for shutdown (or forever).
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `config.host:config.port` and starts the control loop.
pub fn serve(config: ServeConfig) -> Result<ServerHandle, HarnessError> {
    let listener = TcpListener::bind((config.host.as_str(), config.port)).map_err(|source| HarnessError::Bind {
        port: config.port,
        source,
    })?;
    listener
        .set_nonblocking(true)
        .map_err(|e| HarnessError::io("listener", e))?;
    let addr = listener.local_addr().map_err(|e| HarnessError::io("listener", e))?;
    let sim = LiveSim::new(&config)?;
    let hello = Hello::new(&config.chain, 1.0 / CONTROL_DT, sim.policy_available());
    let shared = Arc::new(Shared {
        pending: Mutex::new(Pending::default()),
        clients: Mutex::new(Vec::new()),
        shutdown: AtomicBool::new(false),
        hello: encode_server(&ServerMessage::Hello(hello)),
        policy_available: sim.policy_available(),
        queue_capacity: config.queue_capacity,
    });
    let loop_shared = shared.clone();
    let accept_shared = shared.clone();
    let threads = vec![
        std::thread::Builder::new()
            .name("teleop-loop".into())
            .spawn(move || control_loop(sim, loop_shared))
            .map_err(|e| HarnessError::io("spawn", e))?,
        std::thread::Builder::new()
            .name("teleop-accept".into())
            .spawn(move || accept_loop(listener, accept_shared))
            .map_err(|e| HarnessError::io("spawn", e))?,
    ];
    Ok(ServerHandle { addr, shared, threads })
}

fn control_loop(mut sim: LiveSim, shared: Arc<Shared>) {
    let period = Duration::from_secs_f64(CONTROL_DT);
    let mut deadline = Instant::now();
    while !shared.shutdown.load(Ordering::SeqCst) {
        let msgs = shared.pending.lock().unwrap().drain();
        for m in &msgs {
            sim.apply(m);
        }
        let frame = encode_server(&ServerMessage::State(sim.tick()));
        {
            let mut clients = shared.clients.lock().unwrap();
            clients.retain(|c| !c.closed.load(Ordering::SeqCst));
            for c in clients.iter() {
                c.push(frame.clone());
            }
        }
        deadline += period;
        let now = Instant::now();
        if deadline > now {
            std::thread::sleep(deadline - now);
        } else if now - deadline > 5 * period {
            // fell far behind (debugger, suspended host); do not try to catch up
            deadline = now;
        }
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let shared = shared.clone();
                if let Ok(h) = std::thread::Builder::new()
                    .name("teleop-client".into())
                    .spawn(move || client_session(stream, shared))
                {
                    workers.push(h);
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(10)),
            Err(_) => std::thread::sleep(Duration::from_millis(10)),
        }
        workers.retain(|h| !h.is_finished());
    }
    for h in workers {
        let _ = h.join();
    }
}

fn reject_other_paths(req: &Request, resp: Response) -> Result<Response, ErrorResponse> {
    if req.uri().path() == ENDPOINT {
        Ok(resp)
    } else {
        let mut err = ErrorResponse::new(Some(format!("websocket endpoint is {ENDPOINT}")));
        *err.status_mut() = tungstenite::http::StatusCode::NOT_FOUND;
        Err(err)
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

fn client_session(stream: TcpStream, shared: Arc<Shared>) {
    if stream.set_nonblocking(false).is_err() {
        return;
    }
    let _ = stream.set_nodelay(true);
    let Ok(mut ws) = tungstenite::accept_hdr(stream, reject_other_paths) else {
        return;
    };
    if ws.get_ref().set_read_timeout(Some(Duration::from_millis(5))).is_err() {
        return;
    }
    let outbox = Arc::new(Outbox::new(shared.queue_capacity));
    outbox.push(shared.hello.clone());
    shared.clients.lock().unwrap().push(outbox.clone());
    session_loop(&mut ws, &outbox, &shared);
    outbox.closed.store(true, Ordering::SeqCst);
    let _ = ws.close(None);
    let _ = ws.flush();
}

fn session_loop(ws: &mut WebSocket<TcpStream>, outbox: &Outbox, shared: &Shared) {
    while !shared.shutdown.load(Ordering::SeqCst) {
        for frame in outbox.drain(Duration::from_millis(5)) {
            if ws.send(Message::text(frame)).is_err() {
                return;
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => match decode_client(text.as_str()) {
                Ok(msg) => {
                    if let Some(reason) = refusal(&msg, shared) {
                        outbox.push(encode_server(&ServerMessage::error(reason)));
                    } else {
                        shared.pending.lock().unwrap().put(msg);
                    }
                }
                Err(CodecError(reason)) => outbox.push(encode_server(&ServerMessage::error(reason))),
            },
            Ok(Message::Binary(_)) => outbox.push(encode_server(&ServerMessage::error("frames must be text"))),
            Ok(Message::Close(_)) => return,
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(_) => return,
        }
    }
}

/// Commands that decode but cannot be honoured.
fn refusal(msg: &ClientMessage, shared: &Shared) -> Option<String> {
    match msg {
        ClientMessage::SetController {
            controller: ControllerChoice::Policy,
        } if !shared.policy_available => Some("policy controller unavailable: server started without a checkpoint".into()),
        ClientMessage::SetTarget { pose } if !(pose.x.is_finite() && pose.y.is_finite()) => {
            Some("set_target pose must be finite".into())
        }
        ClientMessage::SetForce { force } if !force.iter().all(|f| f.is_finite()) => {
            Some("set_force must be finite".into())
        }
        _ => None,
    }
}

/// Blocking client for scripted sessions and tests.
pub struct TeleopClient {
    ws: WebSocket<tungstenite::stream::MaybeTlsStream<TcpStream>>,
}

impl TeleopClient {
    pub fn connect(url: &str) -> Result<Self, tungstenite::Error> {
        let (ws, _) = tungstenite::connect(url)?;
        if let tungstenite::stream::MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_read_timeout(Some(Duration::from_secs(2)))?;
        }
        Ok(TeleopClient { ws })
    }

    pub fn send(&mut self, msg: &ClientMessage) -> Result<(), tungstenite::Error> {
        self.send_raw(&encode_client(msg))
    }

    pub fn send_raw(&mut self, text: &str) -> Result<(), tungstenite::Error> {
        self.ws.send(Message::text(text))
    }

    /// Next decodable server frame.
    pub fn next(&mut self) -> Result<ServerMessage, tungstenite::Error> {
        loop {
            if let Message::Text(text) = self.ws.read()? {
                if let Ok(m) = decode_server(text.as_str()) {
                    return Ok(m);
                }
            }
        }
    }

    /// State frames received over the next `duration`, with the arrival
    /// instant of each.
    pub fn collect_states(&mut self, duration: Duration) -> Result<Vec<(Instant, StateFrame)>, tungstenite::Error> {
        let end = Instant::now() + duration;
        let mut out = Vec::new();
        while Instant::now() < end {
            if let ServerMessage::State(f) = self.next()? {
                out.push((Instant::now(), f));
            }
        }
        Ok(out)
    }

    pub fn close(mut self) {
        let _ = self.ws.close(None);
        let _ = self.ws.flush();
    }
}

/// Converts a wire pose for kinematic helpers.
pub fn pose2(p: &Pose) -> Pose2 {
    (*p).into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::TargetPose;

    fn sim() -> LiveSim {
        LiveSim::new(&ServeConfig::from_experiment(&ExperimentConfig::default(), None, 0).unwrap()).unwrap()
    }

    #[test]
    fn outbox_drops_oldest_when_full() {
        let o = Outbox::new(3);
        for i in 0..5 {
            o.push(i.to_string());
        }
        assert_eq!(o.drain(Duration::ZERO), vec!["2", "3", "4"]);
        assert!(o.is_empty());
    }

    #[test]
    fn latest_command_per_kind_wins() {
        let mut p = Pending::default();
        p.put(ClientMessage::SetForce { force: [1.0, 0.0] });
        p.put(ClientMessage::SetTarget { pose: TargetPose { x: 0.1, y: 0.1, theta: None } });
        p.put(ClientMessage::SetForce { force: [2.0, 0.0] });
        p.put(ClientMessage::Grip { value: true });
        let out = p.drain();
        assert_eq!(out.len(), 3);
        assert!(out.contains(&ClientMessage::SetForce { force: [2.0, 0.0] }));
        let grip = out.iter().position(|m| matches!(m, ClientMessage::Grip { .. })).unwrap();
        let target = out.iter().position(|m| matches!(m, ClientMessage::SetTarget { .. })).unwrap();
        assert!(grip < target);
        assert!(p.drain().is_empty());
    }

    #[test]
    fn idle_arm_stays_at_home() {
        let mut s = sim();
        let home = s.state().q.clone();
        let mut last = 0.0;
        for _ in 0..200 {
            let f = s.tick();
            assert!(f.time > last);
            last = f.time;
        }
        for (a, b) in s.state().q.iter().zip(&home) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn targets_are_clamped_to_workspace() {
        let mut s = sim();
        s.apply(&ClientMessage::SetTarget { pose: TargetPose { x: 5.0, y: 0.0, theta: Some(0.0) } });
        assert!((s.command().pose.p[0] - 0.95 * 1.2).abs() < 1e-12);
    }

    #[test]
    fn grip_press_engages_at_end_effector() {
        let mut s = sim();
        s.apply(&ClientMessage::SetTarget { pose: TargetPose { x: 0.1, y: 0.1, theta: None } });
        s.apply(&ClientMessage::Grip { value: true });
        let f = s.frame();
        assert!(f.metrics.e_track < 1e-12);
        assert!(f.grip);
    }

    #[test]
    fn policy_switch_without_checkpoint_is_ignored() {
        let mut s = sim();
        s.apply(&ClientMessage::SetController { controller: ControllerChoice::Policy });
        assert_eq!(s.frame().controller, ControllerChoice::Ik);
    }
}
