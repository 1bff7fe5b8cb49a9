use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, UdpSocket};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use duet_core::event::Timestamp;
use duet_core::osc::{encode_message, event_to_message};
use duet_core::scheduler::{MidiMessage, SinkLine};
use duet_core::session::{Direction, SessionLog};
use duet_core::sim::{write_score, ScoreNote};
use duet_core::NoteEvent;
use serde_json::Value;
use tungstenite::Message;

fn engine() -> Command {
    Command::new(env!("CARGO_BIN_EXE_engine"))
}

fn score(dir: &Path, n: u64) -> PathBuf {
    let notes: Vec<ScoreNote> = (0..n)
        .map(|i| ScoreNote {
            pitch: 40 + (i * 7 % 40) as u8,
            velocity: 30 + (i * 13 % 90) as u8,
            on: Timestamp::from_millis(i * 300),
            off: Timestamp::from_millis(i * 300 + 250),
        })
        .collect();
    let path = dir.join("score.mid");
    std::fs::write(&path, write_score(&notes)).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn sink_lines(path: &Path) -> Vec<SinkLine> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| l.parse().unwrap()).collect()
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn simulate_twice_gives_identical_sink_logs() {
    let dir = tempfile::tempdir().unwrap();
    let score = score(dir.path(), 120);
    let run = |name: &str| {
        let out = dir.path().join(name);
        run_ok(
            engine()
                .args(["simulate", "--virtual-clock", "--control", "off", "--seed", "7"])
                .arg("--score")
                .arg(&score)
                .arg("--sink")
                .arg(&out),
        );
        std::fs::read(out).unwrap()
    };
    let a = run("a.log");
    assert!(!a.is_empty());
    assert_eq!(a, run("b.log"));
    let other = {
        let out = dir.path().join("c.log");
        run_ok(
            engine()
                .args(["simulate", "--virtual-clock", "--control", "off", "--seed", "8"])
                .arg("--score")
                .arg(&score)
                .arg("--sink")
                .arg(&out),
        );
        std::fs::read(out).unwrap()
    };
    assert_ne!(a, other);
}

#[test]
fn replay_reproduces_out_records() {
    let dir = tempfile::tempdir().unwrap();
    let score = score(dir.path(), 60);
    let script = dir.path().join("script.ndjson");
    std::fs::write(
        &script,
        concat!(
            "{\"t_ms\": 1000, \"cmd\": \"loop_start_capture\"}\n",
            "{\"t_ms\": 2500, \"cmd\": \"loop_stop_capture\"}\n",
            "{\"t_ms\": 3000, \"cmd\": \"set_param\", \"args\": {\"path\": \"delay_ms\", \"value\": 1000}}\n",
            "{\"t_ms\": 4000, \"cmd\": \"set_param\", \"args\": {\"path\": \"speed\", \"value\": 1.5}}\n",
            "{\"t_ms\": 5000, \"cmd\": \"next_cue\"}\n",
            "{\"t_ms\": 6000, \"cmd\": \"set_param\", \"args\": {\"path\": \"velocity.scale\", \"value\": 0.7}}\n",
            "{\"t_ms\": 9000, \"cmd\": \"stop\"}\n",
            "{\"t_ms\": 9500, \"cmd\": \"reset\"}\n",
        ),
    )
    .unwrap();
    let log = dir.path().join("session.ndjson");
    run_ok(
        engine()
            .args(["simulate", "--virtual-clock", "--control", "off", "--seed", "3", "--until-ms", "30000"])
            .arg("--score")
            .arg(&score)
            .arg("--script")
            .arg(&script)
            .arg("--record")
            .arg(&log),
    );
    let replayed = dir.path().join("replayed.ndjson");
    let out = run_ok(engine().arg("replay").arg("--log").arg(&log).arg("--record").arg(&replayed));
    let summary: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(summary["identical"], Value::Bool(true), "{summary}");
    let a = SessionLog::open(&log).unwrap();
    let b = SessionLog::open(&replayed).unwrap();
    assert!(a.out_lines().len() > 100);
    assert_eq!(a.out_lines(), b.out_lines());
    // the rejected next_cue (single-cue sheet) is logged as such
    assert!(a.lines.iter().any(|l| l.contains("\"next_cue\"") && l.contains("\"ok\":false")));
}

#[test]
fn replay_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let score = score(dir.path(), 20);
    let log = dir.path().join("session.ndjson");
    run_ok(
        engine()
            .args(["simulate", "--virtual-clock", "--control", "off"])
            .arg("--score")
            .arg(&score)
            .arg("--record")
            .arg(&log),
    );
    let text = std::fs::read_to_string(&log).unwrap();
    let tampered = text.replacen("\"dir\":\"out\",\"seq\":", "\"dir\":\"out\",\"seq\":9", 1);
    assert_ne!(text, tampered);
    std::fs::write(&log, tampered).unwrap();
    let out = engine().arg("replay").arg("--log").arg(&log).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn perform_with_bad_cue_sheet_fails_before_binding() {
    let dir = tempfile::tempdir().unwrap();
    let cues = dir.path().join("cues.json");
    std::fs::write(&cues, r#"[{"name": "Coda", "speed": 9.0}]"#).unwrap();
    let port = free_port();
    let out = engine()
        .arg("perform")
        .arg("--listen")
        .arg(format!("127.0.0.1:{port}"))
        .arg("--control")
        .arg("off")
        .arg("--cues")
        .arg(&cues)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("speed out of range in cue 'Coda'"), "{err}");
    assert!(!err.contains("listening"));
    UdpSocket::bind(("127.0.0.1", port)).expect("port stayed free");
}

#[test]
fn perform_fails_when_port_is_taken() {
    let taken = UdpSocket::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap();
    let out =
        engine().arg("perform").arg("--listen").arg(addr.to_string()).args(["--control", "off"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("binding OSC listener"));
    let out = engine().args(["perform", "--virtual-clock", "--control", "off"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn dry_run_writes_the_simulated_stream() {
    let dir = tempfile::tempdir().unwrap();
    let score = score(dir.path(), 10);
    let out = dir.path().join("dry.log");
    run_ok(
        engine()
            .args(["simulate", "--dry-run", "--jitter-ms", "0", "--drop-prob", "0", "--velocity-noise", "0"])
            .arg("--score")
            .arg(&score)
            .arg("--sink")
            .arg(&out),
    );
    let lines = sink_lines(&out);
    assert_eq!(lines.len(), 20);
    let ons: Vec<u64> = lines.iter().filter(|l| matches!(l.msg, MidiMessage::NoteOn { .. })).map(|l| l.t.0).collect();
    assert_eq!(ons, (0..10).map(|i| i * 300_000 + 350_000).collect::<Vec<_>>());
}

#[test]
fn metrics_scores_a_session() {
    let dir = tempfile::tempdir().unwrap();
    let score = score(dir.path(), 100);
    let log = dir.path().join("s.ndjson");
    run_ok(
        engine()
            .args(["simulate", "--virtual-clock", "--control", "off", "--drop-prob", "0", "--jitter-ms", "10"])
            .arg("--score")
            .arg(&score)
            .arg("--record")
            .arg(&log),
    );
    let out = run_ok(engine().arg("metrics").arg("--log").arg(&log).arg("--score").arg(&score));
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["f1"], 1.0);
    assert_eq!(v["latency_compensation_ms"], 350.0);
    assert_eq!(v["output_latency"]["median_ms"], 0.0);
    let log_in = SessionLog::open(&log).unwrap();
    assert_eq!(log_in.onsets(Direction::In).len(), 100);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.mid");
    std::fs::write(&bogus, b"RIFF....").unwrap();
    let out =
        engine().args(["simulate", "--virtual-clock", "--control", "off"]).arg("--score").arg(&bogus).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("at byte 0"));
    let out = engine().args(["replay", "--log"]).arg(dir.path().join("missing")).output().unwrap();
    assert!(!out.status.success());
    let score = score(dir.path(), 3);
    let out = engine().args(["simulate", "--drop-prob", "2"]).arg("--score").arg(&score).output().unwrap();
    assert!(!out.status.success());
}

fn wait_for_line(reader: &mut impl BufRead, needle: &str) -> String {
    let deadline = Instant::now() + Duration::from_secs(10);
    let mut line = String::new();
    while Instant::now() < deadline {
        line.clear();
        if reader.read_line(&mut line).unwrap() == 0 {
            break;
        }
        if line.contains(needle) {
            return line;
        }
    }
    panic!("never saw {needle:?}");
}

#[test]
fn websocket_control_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sink = dir.path().join("live.log");
    let log = dir.path().join("live.ndjson");
    let mut child = engine()
        .args(["perform", "--listen", "127.0.0.1:0", "--control", "127.0.0.1:0"])
        .arg("--sink")
        .arg(format!("file:{}", sink.display()))
        .arg("--record")
        .arg(&log)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut err = BufReader::new(child.stderr.take().unwrap());
    let control = wait_for_line(&mut err, "control channel on");
    let url = control.trim().rsplit(' ').next().unwrap().to_owned();
    let osc = wait_for_line(&mut err, "listening for OSC on");
    let osc_addr = osc.trim().rsplit("udp://").next().unwrap().to_owned();

    let (mut ws, _) = tungstenite::connect(url.as_str()).unwrap();
    let mut replies = Vec::new();
    let mut frames = Vec::new();
    let mut read_until = |ws: &mut tungstenite::WebSocket<_>, pred: &dyn Fn(&Vec<Value>, &Vec<Value>) -> bool| {
        while !pred(&replies, &frames) {
            let Message::Text(t) = ws.read().unwrap() else { continue };
            for line in t.as_str().lines() {
                let v: Value = serde_json::from_str(line).unwrap();
                if v.get("ok").is_some() {
                    replies.push(v);
                } else {
                    frames.push(v);
                }
            }
        }
        (replies.clone(), frames.clone())
    };

    ws.send(Message::text(r#"{"id": 1, "cmd": "set_param", "args": {"path": "delay_ms", "value": 20}}"#)).unwrap();
    let (r, _) = read_until(&mut ws, &|r, _| !r.is_empty());
    assert_eq!(r[0]["id"], 1);
    assert_eq!(r[0]["ok"], true);
    assert_eq!(r[0]["detail"]["value"], 20.0);

    ws.send(Message::text("{\"id\": 2, \"cmd\": \"set_param\", \"args\": {\"path\": \"speed\", \"value\": 9}}\n{\"id\": 3, \"cmd\": \"nope\"}")).unwrap();
    let (r, _) = read_until(&mut ws, &|r, _| r.len() >= 3);
    assert_eq!((r[1]["id"].clone(), r[1]["ok"].clone()), (Value::from(2), Value::Bool(false)));
    assert_eq!((r[2]["id"].clone(), r[2]["ok"].clone()), (Value::from(3), Value::Bool(false)));

    let udp = UdpSocket::bind("127.0.0.1:0").unwrap();
    let on = encode_message(&event_to_message(&NoteEvent::on(60, 100, Timestamp(0)).into())).unwrap();
    udp.send_to(&on, &osc_addr).unwrap();
    let (_, f) = read_until(&mut ws, &|_, f| f.iter().any(|v| v["direction"] == "out"));
    let inbound = f.iter().find(|v| v["direction"] == "in").unwrap();
    let outbound = f.iter().find(|v| v["direction"] == "out").unwrap();
    assert_eq!(outbound["event"]["pitch"], 60);
    let lat = outbound["t"].as_u64().unwrap() - inbound["t"].as_u64().unwrap();
    assert!((20_000..40_000).contains(&lat), "{lat}");

    ws.send(Message::text(r#"{"id": 4, "cmd": "stop"}"#)).unwrap();
    let (r, _) = read_until(&mut ws, &|r, _| r.len() >= 4);
    assert_eq!(r[3]["ok"], true);
    assert_eq!(r[3]["detail"]["released"], 1);

    Command::new("kill").arg("-INT").arg(child.id().to_string()).status().unwrap();
    let status = child.wait().unwrap();
    assert!(status.success());
    let lines = sink_lines(&sink);
    assert_eq!(lines[0].msg, MidiMessage::NoteOn { pitch: 60, velocity: 100 });
    assert_eq!(lines.last().unwrap().msg, MidiMessage::Sustain { value: 0 });
    let s = SessionLog::open(&log).unwrap();
    assert!(!s.truncated);
    assert_eq!(s.onsets(Direction::In).len(), 1);
    let _ = std::io::stderr().flush();
}
