//! Record a virtual session to disk, read it back and replay it.

use duet_core::cue::ControlCommand;
use duet_core::engine::{replay_steps, run_steps, run_virtual};
use duet_core::pipeline::Repeats;
use duet_core::scheduler::{ClockKind, CollectSink, VirtualClock, DEFAULT_TICK_US};
use duet_core::session::{Direction, Recorder, SessionHeader, SessionLog, SessionSetup};
use duet_core::sim::{simulate_events, ReferenceScore, ScoreNote};
use duet_core::{ChainParams, CueSheet, Engine, SimConfig, Timestamp};
use serde_json::json;

const CUES: &str = r#"[
  {"name": "Dry"},
  {"name": "Echo", "delay_ms": 400, "velocity": {"scale": 0.8, "offset": 0}},
  {"name": "Wash", "pedal_mode": "force_on", "speed": 0.5, "loop": {"min_period_ms": 2000}}
]"#;

fn record(path: &std::path::Path, setup: &SessionSetup) -> Vec<String> {
    let notes: Vec<ScoreNote> = (0..80u64)
        .map(|i| {
            let on = Timestamp::from_millis(i * 250);
            ScoreNote { pitch: 48 + (i * 5 % 24) as u8, velocity: 50 + (i % 60) as u8, on, off: on + 300_000 }
        })
        .collect();
    let sim = setup.sim.unwrap();
    let events = simulate_events(&ReferenceScore::from_notes(&notes), &sim).unwrap();
    let commands = vec![
        (Timestamp::from_millis(1000), ControlCommand::NextCue),
        (Timestamp::from_millis(3000), ControlCommand::LoopStartCapture),
        (Timestamp::from_millis(5000), ControlCommand::LoopStopCapture),
        (Timestamp::from_millis(6000), ControlCommand::NextCue),
        (Timestamp::from_millis(7000), ControlCommand::SetParam { path: "speed".into(), value: json!(2.5) }),
        (Timestamp::from_millis(9000), ControlCommand::LoopPlay { repeats: Repeats::Count(2) }),
        (Timestamp::from_millis(12000), ControlCommand::GotoCue { index: 7 }),
        (Timestamp::from_millis(15000), ControlCommand::Stop),
        (Timestamp::from_millis(16000), ControlCommand::Reset),
    ];
    let sink = CollectSink::new();
    let rec = Recorder::create(path, &SessionHeader::new(setup.clone(), Some(CUES.as_bytes()))).unwrap();
    let mut engine = Engine::new(setup, Box::new(VirtualClock::new()), Box::new(sink.clone()), rec).unwrap();
    run_virtual(&mut engine, &events, &commands, Timestamp::from_millis(40_000)).unwrap();
    engine.close().unwrap();
    sink.lines().iter().map(|l| l.to_string()).collect()
}

#[test]
fn recorded_session_replays_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.ndjson");
    let setup = SessionSetup {
        clock: ClockKind::Virtual,
        tick_us: DEFAULT_TICK_US,
        queue_capacity: 4096,
        cues: CueSheet::parse(CUES).unwrap(),
        sim: Some(SimConfig { seed: 5, ..SimConfig::default() }),
    };
    let sink_lines = record(&path, &setup);
    let log = SessionLog::open(&path).unwrap();
    assert!(!log.truncated);
    assert_eq!(log.header.setup, setup);
    assert_eq!(log.header.cue_sheet_hash.as_deref(), Some(duet_core::session::sha256_hex(CUES.as_bytes()).as_str()));
    assert!(log.lines.iter().any(|l| l.contains("\"goto_cue\"") && l.contains("\"ok\":false")));
    assert_eq!(log.records.iter().filter(|r| r.direction() == Direction::Out).count(), log.out_lines().len());
    // the out records and the sink saw the same events at the same times
    assert_eq!(log.onsets(Direction::Out).len(), sink_lines.iter().filter(|l| l.contains(" ON ")).count());

    let replay_path = dir.path().join("replay.ndjson");
    let rec = Recorder::create(&replay_path, &SessionHeader::new(log.header.setup.clone(), None)).unwrap();
    let sink = CollectSink::new();
    let mut engine =
        Engine::new(&log.header.setup, Box::new(VirtualClock::new()), Box::new(sink.clone()), rec).unwrap();
    run_steps(&mut engine, &replay_steps(&log)).unwrap();
    engine.close().unwrap();
    let again = SessionLog::open(&replay_path).unwrap();
    assert_eq!(log.out_lines(), again.out_lines());
    let replayed: Vec<String> = sink.lines().iter().map(|l| l.to_string()).collect();
    assert_eq!(replayed, sink_lines);
}

#[test]
fn cue_change_applies_between_events() {
    let setup = SessionSetup {
        clock: ClockKind::Virtual,
        tick_us: DEFAULT_TICK_US,
        queue_capacity: 4096,
        cues: CueSheet::parse(CUES).unwrap(),
        sim: None,
    };
    let sink = CollectSink::new();
    let mut engine =
        Engine::new(&setup, Box::new(VirtualClock::new()), Box::new(sink.clone()), Recorder::disabled()).unwrap();
    engine.input(duet_core::NoteEvent::on(60, 100, Timestamp(0)).into());
    engine.command(&ControlCommand::NextCue).unwrap();
    assert_eq!(*engine.params(), setup.cues.cues()[1].params);
    engine.input(duet_core::NoteEvent::on(62, 100, Timestamp(0)).into());
    engine.advance_to(Timestamp::from_millis(500)).unwrap();
    let lines: Vec<String> = sink.lines().iter().map(|l| l.to_string()).collect();
    assert_eq!(lines, ["0 ON 60 100", "400000 ON 62 80"]);
    assert_ne!(*engine.params(), ChainParams::default());
}
