//! WebSocket control channel.
//!
//! Each text message carries one or more newline-separated JSON requests;
//! every request gets exactly one reply. Monitor frames are batched at most
//! 30 times a second and pushed to every connected client.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tungstenite::{Message, WebSocket};

use duet_core::cue::{encode_frames, parse_request, MonitorCoalescer, MonitorFrame, Reply, MONITOR_INTERVAL_US};
use duet_core::engine::{Input, Monitor};

const REPLY_TIMEOUT: Duration = Duration::from_secs(2);
const READ_POLL: Duration = Duration::from_millis(10);
const MONITOR_BACKLOG: usize = 4096;

type Subscribers = Arc<Mutex<Vec<Sender<String>>>>;

pub struct ControlServer {
    pub local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    frames: Sender<MonitorFrame>,
}

impl ControlServer {
    /// Starts accepting on an already bound listener.
    pub fn spawn(listener: TcpListener, engine: Sender<Input>) -> io::Result<Self> {
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let subs: Subscribers = Arc::default();
        let (frames, frame_rx) = mpsc::channel();

        let (s, st) = (subs.clone(), stop.clone());
        let hub = std::thread::Builder::new().name("monitor-hub".into()).spawn(move || hub(frame_rx, s, st))?;
        let st = stop.clone();
        let accept = std::thread::Builder::new()
            .name("control-accept".into())
            .spawn(move || accept_loop(listener, engine, subs, st))?;
        Ok(ControlServer { local_addr, stop, threads: vec![hub, accept], frames })
    }

    /// An engine monitor that feeds this server's broadcasts.
    pub fn monitor(&self) -> Monitor {
        let tx = self.frames.clone();
        Box::new(move |f| {
            let _ = tx.send(f);
        })
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ControlServer {
    fn drop(&mut self) {
        self.halt();
    }
}

fn hub(rx: Receiver<MonitorFrame>, subs: Subscribers, stop: Arc<AtomicBool>) {
    let start = Instant::now();
    let mut co = MonitorCoalescer::new(MONITOR_BACKLOG);
    while !stop.load(Ordering::Relaxed) {
        match rx.recv_timeout(Duration::from_micros(MONITOR_INTERVAL_US)) {
            Ok(f) => {
                co.push(f);
                while let Ok(f) = rx.try_recv() {
                    co.push(f);
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
        if let Some(batch) = co.poll(start.elapsed().as_micros() as u64) {
            let text = encode_frames(&batch);
            subs.lock().expect("subscriber list poisoned").retain(|s| s.send(text.clone()).is_ok());
        }
    }
}

fn accept_loop(listener: TcpListener, engine: Sender<Input>, subs: Subscribers, stop: Arc<AtomicBool>) {
    let mut conns = Vec::new();
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let (tx, rx) = mpsc::channel();
                subs.lock().expect("subscriber list poisoned").push(tx);
                let (eng, st) = (engine.clone(), stop.clone());
                let h = std::thread::Builder::new().name(format!("control-{peer}")).spawn(move || {
                    if let Err(e) = serve(stream, eng, rx, st) {
                        tracing::debug!(%peer, error = %e, "control client dropped");
                    }
                });
                match h {
                    Ok(h) => conns.push(h),
                    Err(e) => tracing::warn!(error = %e, "could not start control connection"),
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(READ_POLL),
            Err(e) => {
                tracing::warn!(error = %e, "control accept failed");
                std::thread::sleep(READ_POLL);
            }
        }
    }
    for h in conns {
        let _ = h.join();
    }
}

fn handle_line(line: &str, engine: &Sender<Input>) -> Reply {
    let req = match parse_request(line) {
        Ok(r) => r,
        Err(reply) => return reply,
    };
    let (tx, rx) = mpsc::channel();
    let id = req.id.clone();
    if engine.send(Input::Command { id: req.id, cmd: req.cmd, reply: Some(tx) }).is_err() {
        return Reply::error(id, "engine is shutting down");
    }
    rx.recv_timeout(REPLY_TIMEOUT).unwrap_or_else(|_| Reply::error(id, "engine did not answer"))
}

fn serve(
    stream: TcpStream,
    engine: Sender<Input>,
    frames: Receiver<String>,
    stop: Arc<AtomicBool>,
) -> tungstenite::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut ws: WebSocket<TcpStream> = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::Io(io::ErrorKind::TimedOut.into()),
    })?;
    ws.get_ref().set_read_timeout(Some(READ_POLL))?;
    loop {
        if stop.load(Ordering::Relaxed) {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                for line in text.as_str().lines().filter(|l| !l.trim().is_empty()) {
                    let reply = handle_line(line, &engine);
                    let body = serde_json::to_string(&reply).expect("reply serializes");
                    ws.send(Message::text(body))?;
                }
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e),
        }
        while let Ok(batch) = frames.try_recv() {
            ws.send(Message::text(batch))?;
        }
    }
}
