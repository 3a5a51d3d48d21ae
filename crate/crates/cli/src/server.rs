//! Socket transports for the live session: newline-delimited JSON over plain
//! TCP, and the same messages as WebSocket text frames for browsers.

use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use tungstenite::Message;

use crate::session::{run_loop, ClientId, Inbound, LoopConfig, Session};

const WS_POLL: Duration = Duration::from_millis(5);

static NEXT_CLIENT: AtomicU64 = AtomicU64::new(1);

pub struct Server {
    pub tcp_addr: SocketAddr,
    pub ws_addr: Option<SocketAddr>,
    control: JoinHandle<Session>,
}

impl Server {
    /// Binds the listeners and starts the control loop and acceptors.
    pub fn start(session: Session, tcp: SocketAddr, ws: Option<SocketAddr>, cfg: LoopConfig) -> io::Result<Self> {
        let tcp_listener = TcpListener::bind(tcp)?;
        let ws_listener = ws.map(TcpListener::bind).transpose()?;
        let (inbox_tx, inbox) = mpsc::channel();
        let server = Server {
            tcp_addr: tcp_listener.local_addr()?,
            ws_addr: ws_listener.as_ref().map(TcpListener::local_addr).transpose()?,
            control: thread::Builder::new()
                .name("control".into())
                .spawn(move || run_loop(session, inbox, cfg))?,
        };
        spawn_acceptor(tcp_listener, inbox_tx.clone(), serve_tcp)?;
        if let Some(l) = ws_listener {
            spawn_acceptor(l, inbox_tx, serve_ws)?;
        }
        Ok(server)
    }

    /// Waits for the control loop to stop and returns its final state.
    pub fn join(self) -> Session {
        self.control.join().expect("control loop panicked")
    }
}

fn spawn_acceptor(
    listener: TcpListener,
    inbox: Sender<Inbound>,
    serve: fn(TcpStream, ClientId, Sender<Inbound>) -> io::Result<()>,
) -> io::Result<()> {
    thread::Builder::new().name("accept".into()).spawn(move || {
        for stream in listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let id = NEXT_CLIENT.fetch_add(1, Ordering::Relaxed);
            let inbox = inbox.clone();
            let spawned = thread::Builder::new().name(format!("client-{id}")).spawn(move || {
                let peer = stream.peer_addr().ok();
                log::info!("client {id} connected from {peer:?}");
                if let Err(e) = serve(stream, id, inbox.clone()) {
                    log::info!("client {id}: {e}");
                }
                let _ = inbox.send(Inbound::Disconnect(id));
            });
            if let Err(e) = spawned {
                log::warn!("could not start client thread: {e}");
            }
        }
    })?;
    Ok(())
}

fn serve_tcp(stream: TcpStream, id: ClientId, inbox: Sender<Inbound>) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let (tx, rx) = mpsc::channel::<Arc<str>>();
    let mut writer = stream.try_clone()?;
    let closer = stream.try_clone()?;
    thread::spawn(move || {
        for line in rx {
            if writer.write_all(line.as_bytes()).and_then(|_| writer.write_all(b"\n")).is_err() {
                break;
            }
        }
        // the loop dropped us (or the peer went away): close both halves
        let _ = closer.shutdown(std::net::Shutdown::Both);
    });
    if inbox.send(Inbound::Connect { client: id, tx }).is_err() {
        return Ok(());
    }
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if inbox.send(Inbound::Line { client: id, line }).is_err() {
            break;
        }
    }
    Ok(())
}

fn serve_ws(stream: TcpStream, id: ClientId, inbox: Sender<Inbound>) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
    ws.get_mut().set_read_timeout(Some(WS_POLL))?;
    let (tx, rx): (Sender<Arc<str>>, Receiver<Arc<str>>) = mpsc::channel();
    if inbox.send(Inbound::Connect { client: id, tx }).is_err() {
        return Ok(());
    }
    let ws_err = |e: tungstenite::Error| io::Error::other(e.to_string());
    loop {
        loop {
            match rx.try_recv() {
                Ok(line) => ws.send(Message::text(line.to_string())).map_err(ws_err)?,
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    return Ok(());
                }
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    if inbox.send(Inbound::Line { client: id, line: line.to_string() }).is_err() {
                        return Ok(());
                    }
                }
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed) => return Ok(()),
            Err(e) => return Err(ws_err(e)),
        }
    }
}
