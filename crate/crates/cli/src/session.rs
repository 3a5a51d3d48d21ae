//! The live control loop. [`Session`] is the deterministic core, driven one
//! tick at a time; [`run_loop`] paces it against the wall clock and talks to
//! connected clients through channels only.

use std::collections::BTreeMap;
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rehab_core::sim::{ForceInput, SimTrace, Simulation, TraceRecord};
use rehab_core::tunnel::{modality_preset, ModalityParams};

use crate::protocol::{
    Ack, ClientMessage, Envelope, ErrorCode, ProtocolError, ServerHello, SessionSnapshot, SetForce, PROTOCOL_NAME,
    PROTOCOL_VERSION,
};

pub const DEFAULT_DECIMATION: u32 = 5;
/// A `set_force` stays in effect for this many ticks unless refreshed.
pub const FORCE_TIMEOUT_TICKS: u64 = 20;

pub type ClientId = u64;

/// Messages into the control loop from the transports.
#[derive(Debug)]
pub enum Inbound {
    /// A new connection; `tx` carries outgoing lines back to it.
    Connect { client: ClientId, tx: Sender<Arc<str>> },
    /// One raw line received from a client.
    Line { client: ClientId, line: String },
    Disconnect(ClientId),
}

struct Peer {
    tx: Sender<Arc<str>>,
    greeted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ActiveForce {
    cmd: SetForce,
    since: u64,
}

pub struct Session {
    sim: Simulation,
    n_sigma: Option<f64>,
    force: Option<ActiveForce>,
    pub decimation: u32,
    records: Option<Vec<TraceRecord>>,
}

impl Session {
    pub fn new(sim: Simulation, decimation: u32, keep_trace: bool) -> Self {
        Self {
            n_sigma: sim.setup().safety.as_ref().map(|s| s.config.n_sigma),
            sim,
            force: None,
            decimation: decimation.max(1),
            records: keep_trace.then(Vec::new),
        }
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    /// The tick the next call to [`step`](Self::step) will execute.
    pub fn next_tick(&self) -> u64 {
        (self.sim.time() / self.sim.setup().dt).round() as u64
    }

    pub fn hello(&self) -> ServerHello {
        let setup = self.sim.setup();
        ServerHello {
            protocol: PROTOCOL_NAME.into(),
            version: PROTOCOL_VERSION,
            scenario: setup.name.clone(),
            dt: setup.dt,
            decimation: self.decimation,
            force_timeout_s: FORCE_TIMEOUT_TICKS as f64 * setup.dt,
            n_sigma: self.n_sigma,
        }
    }

    /// Applies one command between ticks.
    pub fn apply(&mut self, msg: &ClientMessage) -> Result<(), ProtocolError> {
        let tick = self.next_tick();
        match msg {
            ClientMessage::Hello(_) => {}
            ClientMessage::SetForce(f) => {
                f.validate()?;
                self.force = Some(ActiveForce { cmd: *f, since: tick });
            }
            ClientMessage::SetModality(m) => {
                // tunnel gains stay as configured; only the phase law changes
                let preset = modality_preset(m.mode);
                let params = ModalityParams {
                    mode: m.mode,
                    gamma: m.gamma.unwrap_or(preset.gamma),
                    epsilon: m.epsilon.unwrap_or(preset.epsilon),
                    ..self.sim.params()
                };
                self.sim
                    .set_modality(params)
                    .map_err(|e| ProtocolError::new(ErrorCode::Rejected, e.to_string()))?;
            }
            ClientMessage::Pause => self.sim.pause(),
            ClientMessage::Resume => self.sim.resume(),
            ClientMessage::Estop => {
                self.sim.estop();
                self.force = None;
            }
            ClientMessage::Reset => {
                self.sim
                    .reset()
                    .map_err(|e| ProtocolError::new(ErrorCode::Rejected, e.to_string()))?;
                self.force = None;
            }
        }
        Ok(())
    }

    /// The force applied on the next tick; zero once the last `set_force`
    /// is older than the fail-safe timeout.
    pub fn force_input(&self) -> ForceInput {
        let tick = self.next_tick();
        match self.force {
            Some(a) if tick - a.since < FORCE_TIMEOUT_TICKS => ForceInput::TangentFrame {
                tangential: a.cmd.tangential,
                orthogonal: a.cmd.orthogonal,
                angle_deg: a.cmd.angle(),
            },
            _ => ForceInput::TangentFrame {
                tangential: 0.0,
                orthogonal: 0.0,
                angle_deg: 0.0,
            },
        }
    }

    /// Runs one tick and returns its record plus a snapshot when this tick is
    /// on the publishing grid.
    pub fn step(&mut self) -> (TraceRecord, Option<SessionSnapshot>) {
        let rec = self.sim.step(self.force_input());
        if let Some(r) = self.records.as_mut() {
            r.push(rec);
        }
        let publish = rec.tick.is_multiple_of(self.decimation as u64);
        (rec, publish.then(|| SessionSnapshot::from_record(&rec, self.n_sigma)))
    }

    /// The recorded session, when recording was requested.
    pub fn trace(&self) -> Option<SimTrace> {
        let records = self.records.clone()?;
        let mut meta: BTreeMap<String, String> = self.sim.trace_meta();
        meta.insert("source".into(), "session".into());
        Some(SimTrace { meta, records })
    }
}

/// Pacing and stopping rules for [`run_loop`].
#[derive(Debug, Clone, Copy)]
pub struct LoopConfig {
    /// Wall-clock pacing; off runs the loop as fast as possible.
    pub realtime: bool,
    pub max_ticks: Option<u64>,
}

fn send(tx: &Sender<Arc<str>>, line: String) -> bool {
    tx.send(Arc::from(line)).is_ok()
}

/// Owns the session until `max_ticks`, or without a limit until every
/// inbound sender is gone. Commands are drained and applied between ticks,
/// so each tick sees one coherent command set.
pub fn run_loop(mut session: Session, inbox: Receiver<Inbound>, cfg: LoopConfig) -> Session {
    let dt = Duration::from_secs_f64(session.sim.setup().dt);
    let mut peers: BTreeMap<ClientId, Peer> = BTreeMap::new();
    let mut deadline = Instant::now();
    let mut executed = 0u64;
    while cfg.max_ticks.is_none_or(|m| executed < m) {
        if cfg.realtime {
            let now = Instant::now();
            if now > deadline + dt * 10 {
                log::warn!("control loop fell {:?} behind; resynchronizing", now - deadline);
                deadline = now;
            }
            while let Some(left) = deadline.checked_duration_since(Instant::now()) {
                match inbox.recv_timeout(left) {
                    Ok(m) => handle(&mut session, &mut peers, m),
                    Err(RecvTimeoutError::Timeout) => break,
                    Err(RecvTimeoutError::Disconnected) => {
                        std::thread::sleep(deadline.saturating_duration_since(Instant::now()));
                        break;
                    }
                }
            }
            deadline += dt;
        }
        loop {
            match inbox.try_recv() {
                Ok(m) => handle(&mut session, &mut peers, m),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) if cfg.max_ticks.is_none() => return session,
                Err(TryRecvError::Disconnected) => break,
            }
        }
        let (_, snapshot) = session.step();
        executed += 1;
        if let Some(snap) = snapshot {
            let line = Envelope::new("snapshot", snap.tick, snap).to_line();
            peers.retain(|_, p| !p.greeted || send(&p.tx, line.clone()));
        }
    }
    session
}

fn handle(session: &mut Session, peers: &mut BTreeMap<ClientId, Peer>, m: Inbound) {
    let tick = session.next_tick();
    let (client, line) = match m {
        Inbound::Connect { client, tx } => {
            let hello = Envelope::new("hello", tick, session.hello()).to_line();
            if send(&tx, hello) {
                peers.insert(client, Peer { tx, greeted: false });
            }
            return;
        }
        Inbound::Disconnect(client) => {
            peers.remove(&client);
            return;
        }
        Inbound::Line { client, line } => (client, line),
    };
    let Some(peer) = peers.get_mut(&client) else { return };
    let (reply, keep) = match reply_to(session, peer, &line) {
        Ok(command) => (Envelope::new("ack", tick, Ack { command: command.into() }).to_line(), true),
        Err(e) => {
            log::warn!("client {client}: {e}");
            let fatal = e.code == ErrorCode::VersionMismatch;
            (Envelope::new("error", tick, e).to_line(), !fatal)
        }
    };
    if !send(&peer.tx, reply) || !keep {
        // dropping the sender closes the connection once the reply is out
        peers.remove(&client);
    }
}

fn reply_to(session: &mut Session, peer: &mut Peer, line: &str) -> Result<&'static str, ProtocolError> {
    let msg = ClientMessage::parse(line)?;
    match (&msg, peer.greeted) {
        (ClientMessage::Hello(h), _) if h.version != PROTOCOL_VERSION => Err(ProtocolError::new(
            ErrorCode::VersionMismatch,
            format!("server speaks version {PROTOCOL_VERSION}, client sent {}", h.version),
        )),
        (ClientMessage::Hello(_), _) => {
            peer.greeted = true;
            Ok(msg.name())
        }
        (_, false) => Err(ProtocolError::new(
            ErrorCode::HandshakeRequired,
            "send hello before any command".into(),
        )),
        _ => session.apply(&msg).map(|()| msg.name()),
    }
}
