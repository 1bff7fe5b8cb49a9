//! Session log: a header line followed by one JSON record per line.
//!
//! Records are written by a dedicated thread fed through an unbounded
//! channel, so the pipeline never waits on the disk. A write failure turns
//! the recorder off (and says so) while the performance carries on.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cue::{ControlCommand, CueSheet};
use crate::event::{EngineEvent, Timestamp};
use crate::metrics::Onset;
use crate::scheduler::{ClockKind, Emitted};
use crate::sim::SimConfig;

pub const LOG_FORMAT: &str = "duet-session/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
    Command,
}

/// Everything a replay needs to rebuild the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSetup {
    pub clock: ClockKind,
    pub tick_us: u64,
    pub queue_capacity: usize,
    pub cues: CueSheet,
    /// Present when the input came from the simulator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub format: String,
    /// Wall-clock start, RFC 3339. Informational only.
    pub started: String,
    pub config_hash: String,
    #[serde(default)]
    pub cue_sheet_hash: Option<String>,
    pub setup: SessionSetup,
}

impl SessionHeader {
    /// `cue_file` is the cue sheet as read from disk, if there was one.
    pub fn new(setup: SessionSetup, cue_file: Option<&[u8]>) -> Self {
        let canonical = serde_json::to_vec(&setup).expect("setup serializes");
        SessionHeader {
            format: LOG_FORMAT.to_owned(),
            started: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            config_hash: sha256_hex(&canonical),
            cue_sheet_hash: cue_file.map(sha256_hex),
            setup,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A command record's payload. Shutdown is logged so a replay ends the same way.
#[derive(Debug, Clone, PartialEq)]
pub enum LoggedCommand {
    Control(ControlCommand),
    Shutdown,
}

impl Serialize for LoggedCommand {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            LoggedCommand::Control(c) => c.serialize(s),
            LoggedCommand::Shutdown => serde_json::json!({ "cmd": "shutdown" }).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for LoggedCommand {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        if v.get("cmd").and_then(Value::as_str) == Some("shutdown") {
            return Ok(LoggedCommand::Shutdown);
        }
        ControlCommand::deserialize(v).map(LoggedCommand::Control).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dir", rename_all = "lowercase")]
pub enum Record {
    In { seq: u64, t: Timestamp, payload: EngineEvent },
    Out { seq: u64, t: Timestamp, deadline: Timestamp, payload: EngineEvent },
    Command { seq: u64, t: Timestamp, payload: LoggedCommand, ok: bool, detail: Value },
}

impl Record {
    pub fn seq(&self) -> u64 {
        match self {
            Record::In { seq, .. } | Record::Out { seq, .. } | Record::Command { seq, .. } => *seq,
        }
    }

    pub fn t(&self) -> Timestamp {
        match self {
            Record::In { t, .. } | Record::Out { t, .. } | Record::Command { t, .. } => *t,
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            Record::In { .. } => Direction::In,
            Record::Out { .. } => Direction::Out,
            Record::Command { .. } => Direction::Command,
        }
    }
}

enum Msg {
    Line(String),
    Flush(mpsc::SyncSender<io::Result<()>>),
}

/// Appends records to a session log from a background thread.
pub struct Recorder {
    tx: Option<mpsc::Sender<Msg>>,
    worker: Option<JoinHandle<()>>,
    degraded: Arc<AtomicBool>,
    seq: u64,
}

impl Recorder {
    /// A recorder that numbers records but writes nothing.
    pub fn disabled() -> Self {
        Recorder { tx: None, worker: None, degraded: Arc::new(AtomicBool::new(false)), seq: 0 }
    }

    pub fn create(path: &Path, header: &SessionHeader) -> io::Result<Self> {
        Recorder::from_writer(Box::new(File::create(path)?), header)
    }

    /// Writes the header synchronously, then hands the writer to the thread.
    pub fn from_writer(out: Box<dyn Write + Send>, header: &SessionHeader) -> io::Result<Self> {
        let mut out = BufWriter::new(out);
        serde_json::to_writer(&mut out, header)?;
        out.write_all(b"\n")?;
        out.flush()?;
        let degraded = Arc::new(AtomicBool::new(false));
        let flag = degraded.clone();
        let (tx, rx) = mpsc::channel();
        let worker = std::thread::Builder::new().name("recorder".into()).spawn(move || write_loop(out, rx, flag))?;
        Ok(Recorder { tx: Some(tx), worker: Some(worker), degraded, seq: 0 })
    }

    pub fn is_degraded(&self) -> bool {
        self.degraded.load(Ordering::Relaxed)
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn push(&mut self, r: &Record) {
        let Some(tx) = &self.tx else { return };
        let line = serde_json::to_string(r).expect("record serializes");
        if tx.send(Msg::Line(line)).is_err() {
            self.degraded.store(true, Ordering::Relaxed);
        }
    }

    pub fn record_in(&mut self, t: Timestamp, event: &EngineEvent) {
        let r = Record::In { seq: self.next_seq(), t, payload: event.clone() };
        self.push(&r);
    }

    pub fn record_out(&mut self, e: &Emitted) {
        let r = Record::Out { seq: self.next_seq(), t: e.event.t(), deadline: e.deadline, payload: e.event.clone() };
        self.push(&r);
    }

    pub fn record_command(&mut self, t: Timestamp, cmd: LoggedCommand, ok: bool, detail: Value) {
        let r = Record::Command { seq: self.next_seq(), t, payload: cmd, ok, detail };
        self.push(&r);
    }

    /// Blocks until every record handed over so far is on disk.
    pub fn flush(&self) -> io::Result<()> {
        let Some(tx) = &self.tx else { return Ok(()) };
        let (ack_tx, ack_rx) = mpsc::sync_channel(1);
        tx.send(Msg::Flush(ack_tx)).map_err(|_| io::Error::other("recorder thread gone"))?;
        ack_rx.recv().map_err(|_| io::Error::other("recorder thread gone"))?
    }

    /// Flushes and stops the writer thread.
    pub fn close(mut self) -> io::Result<()> {
        let res = self.flush();
        self.shutdown();
        res
    }

    fn shutdown(&mut self) {
        self.tx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for Recorder {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn write_loop(mut out: BufWriter<Box<dyn Write + Send>>, rx: mpsc::Receiver<Msg>, degraded: Arc<AtomicBool>) {
    let mut failed: Option<io::ErrorKind> = None;
    for msg in rx {
        match msg {
            Msg::Line(line) => {
                if failed.is_some() {
                    continue;
                }
                if let Err(e) = out.write_all(line.as_bytes()).and_then(|_| out.write_all(b"\n")) {
                    tracing::warn!(error = %e, "session recording stopped");
                    degraded.store(true, Ordering::Relaxed);
                    failed = Some(e.kind());
                }
            }
            Msg::Flush(ack) => {
                let res = match failed {
                    Some(kind) => Err(io::Error::new(kind, "session recording failed earlier")),
                    None => out.flush(),
                };
                let _ = ack.send(res);
            }
        }
    }
    let _ = out.flush();
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("session log is empty")]
    Empty,
    #[error("bad session header: {0}")]
    Header(String),
    #[error("bad record at line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A session log read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub header: SessionHeader,
    pub records: Vec<Record>,
    /// The raw text of each record, parallel to `records`.
    pub lines: Vec<String>,
    /// Whether an incomplete final line was discarded.
    pub truncated: bool,
}

impl SessionLog {
    pub fn read(mut r: impl Read) -> Result<Self, LogError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let text = String::from_utf8_lossy(&bytes);
        let complete = text.ends_with('\n');
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(LogError::Empty)?;
        let header: SessionHeader = serde_json::from_str(first).map_err(|e| LogError::Header(e.to_string()))?;
        if header.format != LOG_FORMAT {
            return Err(LogError::Header(format!("unsupported format {:?}", header.format)));
        }
        let rest: Vec<(usize, &str)> = lines.collect();
        let mut log = SessionLog { header, records: Vec::new(), lines: Vec::new(), truncated: false };
        let last = rest.len().saturating_sub(1);
        for (i, (n, line)) in rest.into_iter().enumerate() {
            match serde_json::from_str::<Record>(line) {
                Ok(r) => {
                    log.records.push(r);
                    log.lines.push(line.to_owned());
                }
                Err(_) if i == last && !complete => log.truncated = true,
                Err(e) => return Err(LogError::Record { line: n + 1, msg: e.to_string() }),
            }
        }
        Ok(log)
    }

    pub fn open(path: &Path) -> Result<Self, LogError> {
        SessionLog::read(BufReader::new(File::open(path)?))
    }

    /// Raw lines of the out records, in log order.
    pub fn out_lines(&self) -> Vec<&str> {
        self.records
            .iter()
            .zip(&self.lines)
            .filter(|(r, _)| r.direction() == Direction::Out)
            .map(|(_, l)| l.as_str())
            .collect()
    }

    /// Note-on times and pitches in one direction.
    pub fn onsets(&self, dir: Direction) -> Vec<Onset> {
        self.records
            .iter()
            .filter(|r| r.direction() == dir)
            .filter_map(|r| match r {
                Record::In { payload, .. } | Record::Out { payload, .. } => payload.as_note().copied(),
                Record::Command { .. } => None,
            })
            .filter(|n| n.is_on())
            .map(|n| (n.t, n.pitch))
            .collect()
    }

    /// Emission lateness of each out record in µs.
    pub fn lateness_us(&self) -> Vec<u64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Out { t, deadline, .. } => Some(t.saturating_sub(*deadline)),
                _ => None,
            })
            .collect()
    }
}
