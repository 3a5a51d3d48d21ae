use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::PathBuf;
use std::time::Duration;

use rehab_cli::protocol::{ClientMessage, Envelope, ErrorCode, ProtocolError, ServerHello, SessionSnapshot, PROTOCOL_VERSION};
use rehab_cli::server::Server;
use rehab_cli::session::{LoopConfig, Session, FORCE_TIMEOUT_TICKS};
use rehab_core::sim::{RunState, Scenario, Simulation};
use serde_json::Value;

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.toml"));
    Scenario::load(path, &[]).unwrap()
}

fn start(name: &str, ticks: u64, ws: bool) -> Server {
    let sim = Simulation::new(scenario(name).setup().unwrap()).unwrap();
    let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
    Server::start(
        Session::new(sim, 5, true),
        any,
        ws.then_some(any),
        LoopConfig {
            realtime: true,
            max_ticks: Some(ticks),
        },
    )
    .unwrap()
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(addr: SocketAddr) -> (Self, Envelope<ServerHello>) {
        let stream = TcpStream::connect(addr).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
        let mut c = Client {
            writer: stream.try_clone().unwrap(),
            reader: BufReader::new(stream),
        };
        let hello = serde_json::from_value(c.next().unwrap()).unwrap();
        (c, hello)
    }

    fn greet(addr: SocketAddr) -> Self {
        let (mut c, _) = Self::connect(addr);
        c.send(r#"{"type":"hello","tick":0,"payload":{"version":1,"client":"test"}}"#);
        let ack = c.next_non_snapshot().unwrap();
        assert_eq!(ack["type"], "ack", "{ack}");
        c
    }

    fn send(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }

    fn command(&mut self, msg: &ClientMessage) {
        self.send(&msg.to_line(0));
    }

    fn next(&mut self) -> Option<Value> {
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) | Err(_) => None,
            Ok(_) => Some(serde_json::from_str(&line).unwrap()),
        }
    }

    fn next_non_snapshot(&mut self) -> Option<Value> {
        std::iter::from_fn(|| self.next()).find(|m| m["type"] != "snapshot")
    }

    /// Reads until the server closes, splitting snapshots from replies.
    fn drain(&mut self) -> (Vec<SessionSnapshot>, Vec<Value>) {
        let mut snaps = Vec::new();
        let mut other = Vec::new();
        while let Some(m) = self.next() {
            if m["type"] == "snapshot" {
                let env: Envelope<SessionSnapshot> = serde_json::from_value(m).unwrap();
                assert_eq!(env.tick, env.payload.tick);
                snaps.push(env.payload);
            } else {
                other.push(m);
            }
        }
        (snaps, other)
    }
}

fn set_force(t: f64, o: f64, dir: &str) -> String {
    format!(r#"{{"type":"set_force","payload":{{"tangential":{t},"orthogonal":{o},"direction":"{dir}"}}}}"#)
}

#[test]
fn hello_announces_version_and_session_parameters() {
    let server = start("spasm", 30, false);
    let (_, hello) = Client::connect(server.tcp_addr);
    assert_eq!(hello.kind, "hello");
    let h = hello.payload;
    assert_eq!((h.protocol.as_str(), h.version), ("rehab-telemetry", PROTOCOL_VERSION));
    assert_eq!((h.scenario.as_str(), h.dt, h.decimation), ("spasm", 0.01, 5));
    assert_eq!(h.n_sigma, Some(5.0));
    assert!((h.force_timeout_s - 0.2).abs() < 1e-12);
    server.join();
}

#[test]
fn snapshots_are_projections_of_the_session_trace() {
    let server = start("spasm", 150, false);
    let mut c = Client::greet(server.tcp_addr);
    c.send(&set_force(8.0, 4.0, "right"));
    let (snaps, _) = c.drain();
    let session = server.join();
    let trace = session.trace().unwrap();
    assert_eq!(trace.records.len(), 150);
    assert!(snaps.len() >= 5, "{}", snaps.len());
    let n_sigma = Some(5.0);
    for w in snaps.windows(2) {
        assert_eq!(w[1].tick - w[0].tick, 5);
    }
    for snap in &snaps {
        let rec = &trace.records[snap.tick as usize];
        assert_eq!(*snap, SessionSnapshot::from_record(rec, n_sigma), "tick {}", snap.tick);
    }
    // the commanded force reached the loop in tangent-frame form
    assert!(trace.records.iter().any(|r| (r.f_t - 8.0).abs() < 1e-9 && (r.f_o_norm - 4.0).abs() < 1e-9));
}

#[test]
fn commands_before_hello_are_refused() {
    let server = start("baseline_passive", 40, false);
    let (mut c, _) = Client::connect(server.tcp_addr);
    c.send(r#"{"type":"estop"}"#);
    let reply = c.next_non_snapshot().unwrap();
    let err: ProtocolError = serde_json::from_value(reply["payload"].clone()).unwrap();
    assert_eq!(err.code, ErrorCode::HandshakeRequired);
    let session = server.join();
    assert!(session.trace().unwrap().records.iter().all(|r| r.run_state == RunState::Running));
}

#[test]
fn version_mismatch_closes_the_connection() {
    let server = start("baseline_passive", 200, false);
    let (mut c, _) = Client::connect(server.tcp_addr);
    c.send(r#"{"type":"hello","payload":{"version":99}}"#);
    let reply = c.next().unwrap();
    assert_eq!(reply["type"], "error");
    assert_eq!(reply["payload"]["code"], "version_mismatch");
    assert!(c.next().is_none(), "server must hang up");
    server.join();
}

#[test]
fn bad_commands_get_errors_and_the_session_continues() {
    let server = start("baseline_passive", 100, false);
    let mut c = Client::greet(server.tcp_addr);
    c.send(&set_force(150.0, 0.0, "up"));
    c.send("{oops");
    c.send(r#"{"type":"set_modality","payload":{"mode":"passive","gamma":0.5}}"#);
    let codes: Vec<String> = (0..3)
        .map(|_| c.next_non_snapshot().unwrap()["payload"]["code"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(codes, ["out_of_range", "bad_message", "rejected"]);
    let (snaps, _) = c.drain();
    assert!(!snaps.is_empty());
    assert_eq!(server.join().trace().unwrap().records.len(), 100);
}

#[test]
fn estop_freezes_the_tcp_from_the_acknowledged_tick() {
    let server = start("assisted_stop", 120, false);
    let mut c = Client::greet(server.tcp_addr);
    c.command(&ClientMessage::Estop);
    c.command(&ClientMessage::Estop);
    let (snaps, replies) = c.drain();
    let acks: Vec<u64> = replies.iter().filter(|m| m["type"] == "ack").map(|m| m["tick"].as_u64().unwrap()).collect();
    assert_eq!(acks.len(), 2);
    let records = server.join().trace().unwrap().records;
    let from = acks[0] as usize;
    assert!(records[from..].iter().all(|r| r.run_state == RunState::Estop));
    assert!(records[from..].windows(2).all(|w| w[0].tcp == w[1].tcp));
    assert!(snaps.iter().filter(|s| s.tick as usize >= from).all(|s| s.mode.run_state == RunState::Estop));
}

#[test]
fn dropped_client_force_lapses_within_the_timeout() {
    let server = start("assisted_effort", 150, false);
    let mut c = Client::greet(server.tcp_addr);
    let mut last_ack = 0;
    for _ in 0..4 {
        c.send(&set_force(10.0, 0.0, "up"));
        last_ack = c.next_non_snapshot().unwrap()["tick"].as_u64().unwrap();
        std::thread::sleep(Duration::from_millis(30));
    }
    drop(c);
    let records = server.join().trace().unwrap().records;
    let cutoff = (last_ack + FORCE_TIMEOUT_TICKS) as usize;
    assert!(cutoff < records.len());
    assert!((records[cutoff - 1].f_t - 10.0).abs() < 1e-9);
    assert!(records[cutoff..].iter().all(|r| r.f_t == 0.0));
    assert_eq!(records.len(), 150, "session keeps running after the drop");
}

#[test]
fn websocket_clients_speak_the_same_messages() {
    use tungstenite::Message;
    let server = start("assisted_effort", 120, true);
    let url = format!("ws://{}/", server.ws_addr.unwrap());
    let (mut ws, _) = tungstenite::connect(url).unwrap();
    let text = |m: Message| m.into_text().unwrap().to_string();
    let hello: Envelope<ServerHello> = serde_json::from_str(&text(ws.read().unwrap())).unwrap();
    assert_eq!(hello.payload.version, PROTOCOL_VERSION);
    ws.send(Message::text(r#"{"type":"hello","payload":{"version":1}}"#)).unwrap();
    ws.send(Message::text(set_force(5.0, 0.0, "down"))).unwrap();
    let mut kinds = Vec::new();
    let mut snaps = 0;
    loop {
        match ws.read() {
            Ok(Message::Text(t)) => {
                let v: Value = serde_json::from_str(&t).unwrap();
                if v["type"] == "snapshot" {
                    snaps += 1;
                } else {
                    kinds.push(v["payload"]["command"].as_str().unwrap().to_string());
                }
            }
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => {}
        }
    }
    assert_eq!(kinds, ["hello", "set_force"]);
    assert!(snaps >= 5, "{snaps}");
    let records = server.join().trace().unwrap().records;
    assert!(records.iter().any(|r| (r.f_t - 5.0).abs() < 1e-9));
}
