//! `engine`: perform live, simulate a transcribed performance, replay a
//! session log, or score one.

mod config;
mod control;

use std::io::{self, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener, UdpSocket};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use duet_core::cue::ControlCommand;
use duet_core::engine::{replay_steps, run_live, run_steps, run_virtual, Engine, Input};
use duet_core::event::{EngineEvent, Source, Timestamp};
use duet_core::metrics::{attributed_latencies, latency_stats, onset_f1, DEFAULT_TOLERANCE_MS};
use duet_core::net::{ntp_now, send_paced, stream_end, Listener};
use duet_core::osc::{message_to_event, TimeTagBase};
use duet_core::scheduler::{Clock, ClockKind, MidiMessage, RealClock, SinkLine, SinkSpec, VirtualClock};
use duet_core::session::{Direction, Recorder, SessionHeader, SessionLog, SessionSetup};
use duet_core::sim::{parse_smf, simulate, ReferenceScore, TimedMessage};

use config::{EngineConfig, Overrides};
use control::ControlServer;

/// Extra virtual time after the last input before a simulation shuts down.
const DEFAULT_TAIL_MS: u64 = 60_000;
/// Extra real time after the last input in a real-clock simulation.
const REAL_TAIL_MS: u64 = 2_000;

#[derive(Parser)]
#[command(name = "engine", version, about = "Interactive piano engine driven by a live transcription stream")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run live: OSC in over UDP, piano out, control channel up
    Perform(Overrides),
    /// Feed a MIDI file through the transcription simulator into the engine
    Simulate(SimulateArgs),
    /// Re-run a session log under the virtual clock
    Replay(ReplayArgs),
    /// Score a session log against a reference MIDI file
    Metrics(MetricsArgs),
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Overrides,
    /// Reference score (Standard MIDI File)
    #[arg(long)]
    score: PathBuf,
    /// Write the simulated stream in sink-line format instead of running the engine
    #[arg(long)]
    dry_run: bool,
    /// Operator commands, one JSON object per line: {"t_ms", "cmd", "args"}
    #[arg(long)]
    script: Option<PathBuf>,
    /// Stop at this engine time (ms); default is the last input plus 60 s
    #[arg(long)]
    until_ms: Option<u64>,
    /// Mean transcription latency [default: 350]
    #[arg(long)]
    latency_ms: Option<f64>,
    /// Latency standard deviation [default: 30]
    #[arg(long)]
    jitter_ms: Option<f64>,
    /// Chance that a note is missed entirely [default: 0.05]
    #[arg(long)]
    drop_prob: Option<f64>,
    /// Velocity standard deviation [default: 4]
    #[arg(long)]
    velocity_noise: Option<f64>,
    /// Chance of a semitone or octave error [default: 0]
    #[arg(long)]
    pitch_error_prob: Option<f64>,
}

#[derive(clap::Args)]
struct ReplayArgs {
    /// Session log to replay
    #[arg(long)]
    log: PathBuf,
    /// Output sink: midi:NAME, file:PATH or null
    #[arg(long, default_value = "null")]
    sink: String,
    /// Write the replayed session log here
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(clap::Args)]
struct MetricsArgs {
    /// Session log to score
    #[arg(long)]
    log: PathBuf,
    /// Reference score (Standard MIDI File)
    #[arg(long)]
    score: PathBuf,
    /// Onset matching tolerance
    #[arg(long, default_value_t = DEFAULT_TOLERANCE_MS)]
    tol_ms: f64,
    /// Latency subtracted from logged input times before matching; defaults
    /// to the simulator's mean latency when the log has one
    #[arg(long)]
    latency_ms: Option<f64>,
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("ENGINE_LOG_LEVEL")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(io::stderr).init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Perform(o) => perform(&o),
        Cmd::Simulate(a) => simulate_cmd(&a),
        Cmd::Replay(a) => replay(&a),
        Cmd::Metrics(a) => metrics(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_score(path: &Path) -> Result<ReferenceScore> {
    let bytes = std::fs::read(path).with_context(|| format!("reading score {}", path.display()))?;
    let score = parse_smf(&bytes).with_context(|| format!("parsing score {}", path.display()))?;
    score.notes().with_context(|| format!("score {}", path.display()))?;
    Ok(score)
}

fn open_recorder(path: Option<&Path>, setup: &SessionSetup, cue_bytes: Option<&[u8]>) -> Result<Recorder> {
    match path {
        Some(p) => Recorder::create(p, &SessionHeader::new(setup.clone(), cue_bytes))
            .with_context(|| format!("creating session log {}", p.display())),
        None => Ok(Recorder::disabled()),
    }
}

/// Everything a live run binds, acquired up front so that a failure leaves
/// nothing half started.
struct LiveResources {
    udp: UdpSocket,
    control: Option<TcpListener>,
}

fn bind_live(cfg: &EngineConfig) -> Result<LiveResources> {
    let udp = UdpSocket::bind(cfg.listen).with_context(|| format!("binding OSC listener on {}", cfg.listen))?;
    let control = match cfg.control {
        Some(a) => Some(TcpListener::bind(a).with_context(|| format!("binding control channel on {a}"))?),
        None => None,
    };
    Ok(LiveResources { udp, control })
}

/// Runs a real-clock engine on this thread until shutdown. `feeder` gets a
/// sender, the clock and the bound OSC address, and may drive input.
fn live_session(
    res: LiveResources,
    setup: SessionSetup,
    recorder: Recorder,
    sink: Box<dyn duet_core::scheduler::Sink>,
    feeder: impl FnOnce(mpsc::Sender<Input>, RealClock, SocketAddr) + Send + 'static,
) -> Result<()> {
    let clock = RealClock::new();
    let base = TimeTagBase::new(ntp_now());
    let mut engine = Engine::new(&setup, Box::new(clock), sink, recorder)?;
    let (tx, rx) = mpsc::channel();
    let server = res.control.map(|l| ControlServer::spawn(l, tx.clone())).transpose()?;
    if let Some(s) = &server {
        engine.set_monitor(s.monitor());
        eprintln!("control channel on ws://{}", s.local_addr);
    }
    let listener = Listener::spawn(res.udp, clock, base, tx.clone())?;
    eprintln!("listening for OSC on udp://{}", listener.local_addr);
    let stop_tx = tx.clone();
    ctrlc::set_handler(move || {
        let _ = stop_tx.send(Input::Shutdown);
    })
    .context("installing the interrupt handler")?;
    let target = loopback(listener.local_addr);
    let feed = std::thread::Builder::new().name("feeder".into()).spawn(move || feeder(tx, clock, target))?;
    let outcome = run_live(&mut engine, &rx);
    listener.stop();
    if let Some(s) = server {
        s.stop();
    }
    let _ = feed.join();
    if engine.recorder().is_degraded() {
        eprintln!("warning: session recording failed part way; the log is incomplete");
    }
    let stats = engine.scheduler().stats();
    engine.close().context("closing sink and session log")?;
    eprintln!(
        "shut down cleanly: {} events emitted, {} late (max {} us)",
        stats.emitted, stats.late, stats.max_lateness_us
    );
    outcome.map_err(|p| anyhow!("engine panicked ({p}); all notes were released"))
}

fn loopback(a: SocketAddr) -> SocketAddr {
    if a.ip().is_unspecified() {
        SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), a.port())
    } else {
        a
    }
}

fn perform(o: &Overrides) -> Result<()> {
    let cfg = EngineConfig::resolve(o)?;
    if cfg.virtual_clock {
        bail!("--virtual-clock is only valid with simulate or replay");
    }
    let (cues, cue_bytes) = cfg.load_cues()?;
    let res = bind_live(&cfg)?;
    let sink = cfg.sink.open().with_context(|| format!("opening sink {}", cfg.sink))?;
    let setup = SessionSetup {
        clock: ClockKind::RealMonotonic,
        tick_us: cfg.tick_us,
        queue_capacity: cfg.queue_capacity,
        cues,
        sim: None,
    };
    let recorder = open_recorder(cfg.record.as_deref(), &setup, cue_bytes.as_deref())?;
    live_session(res, setup, recorder, sink, |_tx, _clock, _addr| {})
}

fn load_script(path: &Path) -> Result<Vec<(Timestamp, ControlCommand)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading script {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).with_context(|| format!("script line {}", i + 1))?;
        let t = v
            .get("t_ms")
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| anyhow!("script line {}: missing numeric t_ms", i + 1))?;
        let cmd = v.get("cmd").and_then(serde_json::Value::as_str).unwrap_or_default();
        let args = v.get("args").cloned().unwrap_or_default();
        let cmd = ControlCommand::from_parts(cmd, &args).map_err(|e| anyhow!("script line {}: {e}", i + 1))?;
        out.push((Timestamp(duet_core::event::ms_to_us(t)), cmd));
    }
    out.sort_by_key(|(t, _)| *t);
    Ok(out)
}

fn stream_events(stream: &[TimedMessage]) -> Result<Vec<EngineEvent>> {
    stream
        .iter()
        .map(|m| {
            let e = message_to_event(&m.msg, m.t)?;
            Ok(match e {
                EngineEvent::Note(n) => n.with_source(Source::Simulator).into(),
                other => other,
            })
        })
        .collect()
}

fn write_dry_run(stream: &[TimedMessage], sink: &SinkSpec) -> Result<()> {
    let mut out: Box<dyn Write> = match sink {
        SinkSpec::File(p) => {
            Box::new(io::BufWriter::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        _ => Box::new(io::BufWriter::new(io::stdout().lock())),
    };
    for e in stream_events(stream)? {
        if let Some(msg) = MidiMessage::from_event(&e) {
            writeln!(out, "{}", SinkLine { t: e.t(), msg })?;
        }
    }
    out.flush()?;
    Ok(())
}

fn simulate_cmd(a: &SimulateArgs) -> Result<()> {
    let mut cfg = EngineConfig::resolve(&a.common)?;
    let s = &mut cfg.sim;
    s.latency_mean_ms = a.latency_ms.unwrap_or(s.latency_mean_ms);
    s.latency_jitter_ms = a.jitter_ms.unwrap_or(s.latency_jitter_ms);
    s.drop_prob = a.drop_prob.unwrap_or(s.drop_prob);
    s.velocity_noise = a.velocity_noise.unwrap_or(s.velocity_noise);
    s.pitch_error_prob = a.pitch_error_prob.unwrap_or(s.pitch_error_prob);
    s.validate()?;
    let (cues, cue_bytes) = cfg.load_cues()?;
    let score = load_score(&a.score)?;
    let script = a.script.as_deref().map(load_script).transpose()?.unwrap_or_default();
    let stream = simulate(&score, &cfg.sim)?;
    if a.dry_run {
        return write_dry_run(&stream, &cfg.sink);
    }
    let last_input = stream_end(&stream).max(script.last().map(|(t, _)| *t).unwrap_or_default());
    if cfg.virtual_clock {
        let until = a.until_ms.map(Timestamp::from_millis).unwrap_or(last_input + DEFAULT_TAIL_MS * 1000);
        let sink = cfg.sink.open().with_context(|| format!("opening sink {}", cfg.sink))?;
        let setup = SessionSetup {
            clock: ClockKind::Virtual,
            tick_us: cfg.tick_us,
            queue_capacity: cfg.queue_capacity,
            cues,
            sim: Some(cfg.sim),
        };
        let recorder = open_recorder(cfg.record.as_deref(), &setup, cue_bytes.as_deref())?;
        let mut engine = Engine::new(&setup, Box::new(VirtualClock::new()), sink, recorder)?;
        run_virtual(&mut engine, &stream_events(&stream)?, &script, until)?;
        let stats = engine.scheduler().stats();
        let end = engine.now();
        let inputs = engine.stats().inputs;
        engine.close().context("closing sink and session log")?;
        println!("{}", json!({ "inputs": inputs, "emitted": stats.emitted, "end_ms": end.millis_f64() }));
        return Ok(());
    }
    let res = bind_live(&cfg)?;
    let sink = cfg.sink.open().with_context(|| format!("opening sink {}", cfg.sink))?;
    let setup = SessionSetup {
        clock: ClockKind::RealMonotonic,
        tick_us: cfg.tick_us,
        queue_capacity: cfg.queue_capacity,
        cues,
        sim: Some(cfg.sim),
    };
    let recorder = open_recorder(cfg.record.as_deref(), &setup, cue_bytes.as_deref())?;
    let until = a.until_ms.map(Timestamp::from_millis).unwrap_or(last_input + REAL_TAIL_MS * 1000);
    live_session(res, setup, recorder, sink, move |tx, clock, target| {
        let stop = AtomicBool::new(false);
        let sock = match UdpSocket::bind(SocketAddr::new(target.ip(), 0)) {
            Ok(s) => s,
            Err(e) => {
                tracing::error!(error = %e, "simulator could not open a socket");
                let _ = tx.send(Input::Shutdown);
                return;
            }
        };
        let mut script = script.into_iter().peekable();
        let mut rest: &[TimedMessage] = &stream;
        // interleave scripted commands with the paced stream
        loop {
            let next_cmd = script.peek().map(|(t, _)| *t);
            let split = match next_cmd {
                Some(t) => rest.partition_point(|m| m.t <= t),
                None => rest.len(),
            };
            if let Err(e) = send_paced(&sock, target, &rest[..split], &clock, &stop) {
                tracing::error!(error = %e, "simulator send failed");
                break;
            }
            rest = &rest[split..];
            match script.next() {
                Some((t, cmd)) => {
                    while clock.now() < t {
                        std::thread::sleep(std::time::Duration::from_micros(200));
                    }
                    let _ = tx.send(Input::Command { id: serde_json::Value::Null, cmd, reply: None });
                }
                None => break,
            }
        }
        while clock.now() < until {
            std::thread::sleep(std::time::Duration::from_millis(5));
        }
        let _ = tx.send(Input::Shutdown);
    })
}

/// An in-memory log target shared with the replay comparison.
#[derive(Clone, Default)]
struct SharedBuf(Arc<Mutex<Vec<u8>>>);

impl Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.lock().expect("buffer poisoned").extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let log = SessionLog::open(&a.log).with_context(|| format!("reading session log {}", a.log.display()))?;
    let sink_spec: SinkSpec = a.sink.parse().map_err(anyhow::Error::msg)?;
    let sink = sink_spec.open().with_context(|| format!("opening sink {sink_spec}"))?;
    let mut setup = log.header.setup.clone();
    let recorded_clock = setup.clock;
    setup.clock = ClockKind::Virtual;
    let mut header = SessionHeader::new(setup.clone(), None);
    header.cue_sheet_hash = log.header.cue_sheet_hash.clone();
    let buf = SharedBuf::default();
    let recorder = Recorder::from_writer(Box::new(buf.clone()), &header)?;
    let mut engine = Engine::new(&setup, Box::new(VirtualClock::new()), sink, recorder)?;
    run_steps(&mut engine, &replay_steps(&log))?;
    engine.close().context("closing sink")?;
    let bytes = buf.0.lock().expect("buffer poisoned").clone();
    if let Some(p) = &a.record {
        std::fs::write(p, &bytes).with_context(|| format!("writing {}", p.display()))?;
    }
    let replayed = SessionLog::read(bytes.as_slice())?;
    let (orig, new) = (log.out_lines(), replayed.out_lines());
    let identical = orig == new;
    let first_diff = orig
        .iter()
        .zip(&new)
        .position(|(x, y)| x != y)
        .or((orig.len() != new.len()).then(|| orig.len().min(new.len())));
    println!(
        "{}",
        json!({
            "records": log.records.len(),
            "truncated": log.truncated,
            "out_original": orig.len(),
            "out_replayed": new.len(),
            "identical": identical,
            "first_difference": first_diff,
        })
    );
    if !identical && recorded_clock == ClockKind::Virtual {
        bail!("replayed out records differ from the log (first at out record {})", first_diff.unwrap_or(0));
    }
    Ok(())
}

fn metrics(a: &MetricsArgs) -> Result<()> {
    let log = SessionLog::open(&a.log).with_context(|| format!("reading session log {}", a.log.display()))?;
    let score = load_score(&a.score)?;
    let comp_ms = a.latency_ms.or(log.header.setup.sim.map(|s| s.latency_mean_ms)).unwrap_or(0.0);
    let comp = duet_core::event::ms_to_us(comp_ms);
    let inputs = log.onsets(Direction::In);
    let transcribed: Vec<_> = inputs.iter().map(|&(t, p)| (Timestamp(t.0.saturating_sub(comp)), p)).collect();
    let report = onset_f1(&score.onsets(), &transcribed, a.tol_ms);
    let outputs = log.onsets(Direction::Out);
    let lateness: Vec<i64> = log.lateness_us().into_iter().map(|v| v as i64).collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
            "matches": report.matches,
            "reference": report.reference,
            "transcribed": report.transcribed,
            "tolerance_ms": a.tol_ms,
            "latency_compensation_ms": comp_ms,
            "output_latency": latency_stats(&attributed_latencies(&inputs, &outputs)),
            "emission_lateness": latency_stats(&lateness),
        }))?
    );
    Ok(())
}
