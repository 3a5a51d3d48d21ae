//! Wire types for the live session. Every message is one JSON object per
//! line, `{"type": ..., "tick": ..., "payload": ...}`. See PROTOCOL.md.

use rehab_core::motion::Pose;
use rehab_core::safety::SafetyMode;
use rehab_core::sim::{DirectiveKind, RunState, TraceRecord};
use rehab_core::tunnel::Modality;
use serde::{Deserialize, Serialize};

pub const PROTOCOL_NAME: &str = "rehab-telemetry";
pub const PROTOCOL_VERSION: u32 = 1;
/// Commanded forces are limited to this magnitude per component, N.
pub const MAX_COMMAND_FORCE: f64 = 100.0;

/// Outgoing envelope. `tick` is the next tick the loop will execute, except
/// for snapshots where it is the tick the snapshot describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    #[serde(rename = "type")]
    pub kind: String,
    pub tick: u64,
    pub payload: T,
}

impl<T: Serialize> Envelope<T> {
    pub fn new(kind: &str, tick: u64, payload: T) -> Self {
        Self {
            kind: kind.to_string(),
            tick,
            payload,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("protocol types serialize")
    }
}

/// Sent by the server as soon as a client connects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerHello {
    pub protocol: String,
    pub version: u32,
    pub scenario: String,
    pub dt: f64,
    pub decimation: u32,
    pub force_timeout_s: f64,
    pub n_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientHello {
    pub version: u32,
    #[serde(default)]
    pub client: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Right,
    Down,
    Left,
}

impl Direction {
    /// Angle about the tangent, measured from up toward right.
    pub fn angle_deg(self) -> f64 {
        match self {
            Direction::Up => 0.0,
            Direction::Right => 90.0,
            Direction::Down => 180.0,
            Direction::Left => 270.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetForce {
    pub tangential: f64,
    #[serde(default)]
    pub orthogonal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_deg: Option<f64>,
}

impl SetForce {
    pub fn angle(&self) -> f64 {
        self.angle_deg.or(self.direction.map(Direction::angle_deg)).unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::new(ErrorCode::OutOfRange, m));
        for (name, v) in [("tangential", self.tangential), ("orthogonal", self.orthogonal)] {
            if !v.is_finite() || v.abs() > MAX_COMMAND_FORCE {
                return bad(format!("{name} force {v} outside [-{MAX_COMMAND_FORCE}, {MAX_COMMAND_FORCE}] N"));
            }
        }
        if self.direction.is_some() && self.angle_deg.is_some() {
            return Err(ProtocolError::new(ErrorCode::BadMessage, "give either direction or angle_deg".into()));
        }
        if self.angle_deg.is_some_and(|a| !a.is_finite()) {
            return bad("angle_deg must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetModality {
    pub mode: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

/// Client-to-server messages. `tick` is accepted and ignored on input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello(ClientHello),
    SetForce(SetForce),
    SetModality(SetModality),
    Pause,
    Resume,
    Estop,
    Reset,
}

impl ClientMessage {
    pub fn name(&self) -> &'static str {
        match self {
            ClientMessage::Hello(_) => "hello",
            ClientMessage::SetForce(_) => "set_force",
            ClientMessage::SetModality(_) => "set_modality",
            ClientMessage::Pause => "pause",
            ClientMessage::Resume => "resume",
            ClientMessage::Estop => "estop",
            ClientMessage::Reset => "reset",
        }
    }

    pub fn parse(line: &str) -> Result<Self, ProtocolError> {
        serde_json::from_str(line).map_err(|e| ProtocolError::new(ErrorCode::BadMessage, e.to_string()))
    }

    pub fn to_line(&self, tick: u64) -> String {
        let mut v = serde_json::to_value(self).expect("protocol types serialize");
        v["tick"] = tick.into();
        v.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    VersionMismatch,
    HandshakeRequired,
    OutOfRange,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolError {
    pub code: ErrorCode,
    pub message: String,
}

impl ProtocolError {
    pub fn new(code: ErrorCode, message: String) -> Self {
        Self { code, message }
    }
}

impl std::fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.code, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub command: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMode {
    pub modality: Modality,
    pub safety: SafetyMode,
    pub run_state: RunState,
    pub directive: DirectiveKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub mu: f64,
    pub sigma: f64,
    pub n_sigma: f64,
    pub in_corridor: bool,
}

/// One tick of the live session, a projection of its trace record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub tick: u64,
    pub time: f64,
    pub progress: f64,
    pub s: f64,
    pub mode: SnapshotMode,
    pub f_t: f64,
    pub f_o_norm: f64,
    pub deviation: f64,
    /// Absent without a safety corridor and on ticks that evaluate none
    /// (paused, stopped or finished).
    pub corridor: Option<Corridor>,
    pub pose_ref: Pose,
    pub tcp: Pose,
}

impl SessionSnapshot {
    pub fn from_record(r: &TraceRecord, n_sigma: Option<f64>) -> Self {
        Self {
            tick: r.tick,
            time: r.time,
            progress: r.progress,
            s: r.s,
            mode: SnapshotMode {
                modality: r.modality,
                safety: r.safety,
                run_state: r.run_state,
                directive: r.directive,
            },
            f_t: r.f_t,
            f_o_norm: r.f_o_norm,
            deviation: r.deviation,
            corridor: n_sigma.filter(|_| r.corridor_mu.is_finite()).map(|n_sigma| Corridor {
                mu: r.corridor_mu,
                sigma: r.corridor_sigma,
                n_sigma,
                in_corridor: r.in_corridor,
            }),
            pose_ref: r.pose_ref,
            tcp: r.tcp,
        }
    }
}
