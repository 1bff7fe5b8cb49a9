//! Deadline scheduling against a pluggable clock, sounding-note bookkeeping
//! and output sinks.
//!
//! Every sink receives the same channel-1 MIDI messages: `0x90` note-on,
//! `0x80` note-off and `0xB0 64` for the sustain pedal. The file sink writes
//! them one per line as `<t_us> <ON|OFF|CC64> <pitch|value> <velocity>`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{EngineEvent, NoteKind, OrderKey, Timestamp};

/// Real-clock polling interval.
pub const DEFAULT_TICK_US: u64 = 1000;
pub const DEFAULT_QUEUE_CAPACITY: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    RealMonotonic,
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClockError {
    #[error("a real clock cannot be advanced explicitly")]
    NotVirtual,
}

pub trait Clock: Send {
    fn now(&self) -> Timestamp;
    fn kind(&self) -> ClockKind;
    /// Moves a virtual clock forward; never moves it back.
    fn advance_to(&mut self, t: Timestamp) -> Result<(), ClockError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VirtualClock {
    now: Timestamp,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&mut self, us: u64) {
        self.now = self.now + us;
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Timestamp {
        self.now
    }

    fn kind(&self) -> ClockKind {
        ClockKind::Virtual
    }

    fn advance_to(&mut self, t: Timestamp) -> Result<(), ClockError> {
        self.now = self.now.max(t);
        Ok(())
    }
}

/// Monotonic time since the engine epoch. Copies share the epoch.
#[derive(Debug, Clone, Copy)]
pub struct RealClock {
    epoch: Instant,
}

impl RealClock {
    pub fn new() -> Self {
        RealClock { epoch: Instant::now() }
    }

    pub fn epoch(&self) -> Instant {
        self.epoch
    }
}

impl Default for RealClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for RealClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.epoch.elapsed().as_micros() as u64)
    }

    fn kind(&self) -> ClockKind {
        ClockKind::RealMonotonic
    }

    fn advance_to(&mut self, _t: Timestamp) -> Result<(), ClockError> {
        Err(ClockError::NotVirtual)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MidiMessage {
    NoteOn { pitch: u8, velocity: u8 },
    NoteOff { pitch: u8 },
    Sustain { value: u8 },
}

impl MidiMessage {
    /// Markers have no MIDI form.
    pub fn from_event(e: &EngineEvent) -> Option<MidiMessage> {
        match e {
            EngineEvent::Note(n) if n.kind == NoteKind::On => {
                Some(MidiMessage::NoteOn { pitch: n.pitch, velocity: n.velocity })
            }
            EngineEvent::Note(n) => Some(MidiMessage::NoteOff { pitch: n.pitch }),
            EngineEvent::Pedal(p) => Some(MidiMessage::Sustain { value: p.value }),
            EngineEvent::Marker(_) => None,
        }
    }

    pub fn bytes(&self) -> [u8; 3] {
        match *self {
            MidiMessage::NoteOn { pitch, velocity } => [0x90, pitch & 0x7F, velocity & 0x7F],
            MidiMessage::NoteOff { pitch } => [0x80, pitch & 0x7F, 0],
            MidiMessage::Sustain { value } => [0xB0, 64, value & 0x7F],
        }
    }

    pub fn from_bytes(b: [u8; 3]) -> Option<MidiMessage> {
        match b {
            [0x90, p, 0] => Some(MidiMessage::NoteOff { pitch: p }),
            [0x90, p, v] => Some(MidiMessage::NoteOn { pitch: p, velocity: v }),
            [0x80, p, _] => Some(MidiMessage::NoteOff { pitch: p }),
            [0xB0, 64, v] => Some(MidiMessage::Sustain { value: v }),
            _ => None,
        }
    }
}

/// One line of the sink file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SinkLine {
    pub t: Timestamp,
    pub msg: MidiMessage,
}

impl fmt::Display for SinkLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.t.0;
        match self.msg {
            MidiMessage::NoteOn { pitch, velocity } => write!(f, "{t} ON {pitch} {velocity}"),
            MidiMessage::NoteOff { pitch } => write!(f, "{t} OFF {pitch} 0"),
            MidiMessage::Sustain { value } => write!(f, "{t} CC64 {value} 0"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad sink line {line:?}")]
pub struct SinkLineError {
    pub line: String,
}

impl FromStr for SinkLine {
    type Err = SinkLineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || SinkLineError { line: s.to_owned() };
        let parts: Vec<&str> = s.split_whitespace().collect();
        let [t, kind, a, b] = parts.as_slice() else { return Err(err()) };
        let t = Timestamp(t.parse().map_err(|_| err())?);
        let a: u8 = a.parse().map_err(|_| err())?;
        let b: u8 = b.parse().map_err(|_| err())?;
        let msg = match *kind {
            "ON" => MidiMessage::NoteOn { pitch: a, velocity: b },
            "OFF" => MidiMessage::NoteOff { pitch: a },
            "CC64" => MidiMessage::Sustain { value: a },
            _ => return Err(err()),
        };
        Ok(SinkLine { t, msg })
    }
}

/// Ordered consumer of output messages. Called only from the scheduler thread.
pub trait Sink: Send {
    fn send(&mut self, t: Timestamp, msg: &MidiMessage) -> io::Result<()>;

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

pub struct NullSink;

impl Sink for NullSink {
    fn send(&mut self, _t: Timestamp, _msg: &MidiMessage) -> io::Result<()> {
        Ok(())
    }
}

/// Line-format log, used for golden files.
pub struct FileSink<W: Write + Send> {
    out: W,
}

impl FileSink<BufWriter<File>> {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(FileSink { out: BufWriter::new(File::create(path)?) })
    }
}

impl<W: Write + Send> FileSink<W> {
    pub fn new(out: W) -> Self {
        FileSink { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write + Send> Sink for FileSink<W> {
    fn send(&mut self, t: Timestamp, msg: &MidiMessage) -> io::Result<()> {
        writeln!(self.out, "{}", SinkLine { t, msg: *msg })
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// Raw MIDI bytes, unbuffered, to a device node or FIFO.
pub struct RawMidiSink<W: Write + Send> {
    out: W,
}

impl RawMidiSink<File> {
    pub fn open(path: &Path) -> io::Result<Self> {
        Ok(RawMidiSink { out: std::fs::OpenOptions::new().write(true).open(path)? })
    }
}

impl<W: Write + Send> RawMidiSink<W> {
    pub fn new(out: W) -> Self {
        RawMidiSink { out }
    }
}

impl<W: Write + Send> Sink for RawMidiSink<W> {
    fn send(&mut self, _t: Timestamp, msg: &MidiMessage) -> io::Result<()> {
        self.out.write_all(&msg.bytes())?;
        self.out.flush()
    }
}

/// Shared in-memory collector for tests and monitors.
#[derive(Clone, Default)]
pub struct CollectSink {
    lines: Arc<Mutex<Vec<SinkLine>>>,
}

impl CollectSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lines(&self) -> Vec<SinkLine> {
        self.lines.lock().expect("collector poisoned").clone()
    }
}

impl Sink for CollectSink {
    fn send(&mut self, t: Timestamp, msg: &MidiMessage) -> io::Result<()> {
        self.lines.lock().expect("collector poisoned").push(SinkLine { t, msg: *msg });
        Ok(())
    }
}

/// `midi:NAME`, `file:PATH` or `null`. A bare path means a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SinkSpec {
    Midi(PathBuf),
    File(PathBuf),
    Null,
}

impl FromStr for SinkSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "null" {
            Ok(SinkSpec::Null)
        } else if let Some(p) = s.strip_prefix("file:").filter(|p| !p.is_empty()) {
            Ok(SinkSpec::File(PathBuf::from(p)))
        } else if let Some(p) = s.strip_prefix("midi:").filter(|p| !p.is_empty()) {
            Ok(SinkSpec::Midi(PathBuf::from(p)))
        } else if !s.is_empty() && !s.contains(':') {
            Ok(SinkSpec::File(PathBuf::from(s)))
        } else {
            Err(format!("sink must be midi:NAME, file:PATH or null, got {s:?}"))
        }
    }
}

impl fmt::Display for SinkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SinkSpec::Midi(p) => write!(f, "midi:{}", p.display()),
            SinkSpec::File(p) => write!(f, "file:{}", p.display()),
            SinkSpec::Null => f.write_str("null"),
        }
    }
}

impl SinkSpec {
    pub fn open(&self) -> io::Result<Box<dyn Sink>> {
        Ok(match self {
            SinkSpec::Midi(p) => Box::new(RawMidiSink::open(p)?),
            SinkSpec::File(p) => Box::new(FileSink::create(p)?),
            SinkSpec::Null => Box::new(NullSink),
        })
    }
}

/// Unmatched note-ons per pitch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActiveNoteTable {
    counts: BTreeMap<u8, u32>,
}

impl ActiveNoteTable {
    pub fn apply(&mut self, e: &EngineEvent) {
        if let EngineEvent::Note(n) = e {
            match n.kind {
                NoteKind::On => *self.counts.entry(n.pitch).or_default() += 1,
                NoteKind::Off => {
                    if let Some(c) = self.counts.get_mut(&n.pitch) {
                        *c -= 1;
                        if *c == 0 {
                            self.counts.remove(&n.pitch);
                        }
                    }
                }
            }
        }
    }

    pub fn count(&self, pitch: u8) -> u32 {
        self.counts.get(&pitch).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    /// Each sounding pitch repeated once per unmatched note-on.
    pub fn sounding(&self) -> Vec<u8> {
        self.counts.iter().flat_map(|(&p, &c)| std::iter::repeat_n(p, c as usize)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, u32)> + '_ {
        self.counts.iter().map(|(&p, &c)| (p, c))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedError {
    #[error("scheduler queue full ({0} events)")]
    Overload(usize),
    #[error(transparent)]
    Clock(#[from] ClockError),
}

/// An event as it left the scheduler. `event.t` is the emission time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emitted {
    pub event: EngineEvent,
    pub deadline: Timestamp,
}

impl Emitted {
    pub fn lateness_us(&self) -> u64 {
        self.event.t().saturating_sub(self.deadline)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SchedulerStats {
    pub emitted: u64,
    pub late: u64,
    pub max_lateness_us: u64,
    pub total_lateness_us: u64,
    pub sink_errors: u64,
}

pub struct Scheduler {
    clock: Box<dyn Clock>,
    sink: Box<dyn Sink>,
    queue: BTreeMap<(OrderKey, u64), EngineEvent>,
    seq: u64,
    capacity: usize,
    active: ActiveNoteTable,
    outbox: Vec<Emitted>,
    stats: SchedulerStats,
}

impl Scheduler {
    pub fn new(clock: Box<dyn Clock>, sink: Box<dyn Sink>) -> Self {
        Self::with_capacity(clock, sink, DEFAULT_QUEUE_CAPACITY)
    }

    pub fn with_capacity(clock: Box<dyn Clock>, sink: Box<dyn Sink>, capacity: usize) -> Self {
        Scheduler {
            clock,
            sink,
            queue: BTreeMap::new(),
            seq: 0,
            capacity,
            active: ActiveNoteTable::default(),
            outbox: Vec::new(),
            stats: SchedulerStats::default(),
        }
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn clock_kind(&self) -> ClockKind {
        self.clock.kind()
    }

    pub fn active(&self) -> &ActiveNoteTable {
        &self.active
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn stats(&self) -> SchedulerStats {
        self.stats
    }

    /// Deadline of the earliest pending event.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.queue.keys().next().map(|(k, _)| k.t)
    }

    /// Emits at once when due (late events are clamped to now, never
    /// dropped); otherwise queues in event order.
    pub fn schedule(&mut self, e: EngineEvent) -> Result<(), SchedError> {
        let now = self.clock.now();
        if e.t() <= now {
            self.emit(e, now);
            return Ok(());
        }
        if self.queue.len() >= self.capacity {
            return Err(SchedError::Overload(self.capacity));
        }
        self.seq += 1;
        self.queue.insert((e.order_key(), self.seq), e);
        Ok(())
    }

    /// Drops every pending event; the active-note table is left alone.
    pub fn cancel_all(&mut self) -> usize {
        let n = self.queue.len();
        self.queue.clear();
        n
    }

    /// Virtual clock only: emits every event due at or before `t`, each at
    /// exactly its deadline, then leaves the clock at `t`.
    pub fn run_until(&mut self, t: Timestamp) -> Result<(), SchedError> {
        if self.clock.kind() != ClockKind::Virtual {
            return Err(ClockError::NotVirtual.into());
        }
        while let Some(entry) = self.queue.first_entry() {
            let deadline = entry.key().0.t;
            if deadline > t {
                break;
            }
            let e = entry.remove();
            self.clock.advance_to(deadline)?;
            let now = self.clock.now();
            self.emit(e, now);
        }
        self.clock.advance_to(t)?;
        Ok(())
    }

    /// Emits everything due at the clock's current time.
    pub fn poll(&mut self) {
        let now = self.clock.now();
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0.t > now {
                break;
            }
            let e = entry.remove();
            self.emit(e, now);
        }
    }

    fn emit(&mut self, e: EngineEvent, now: Timestamp) {
        let deadline = e.t();
        let at = deadline.max(now);
        let e = e.with_t(at);
        if let Some(msg) = MidiMessage::from_event(&e) {
            if let Err(err) = self.sink.send(at, &msg) {
                self.stats.sink_errors += 1;
                tracing::warn!(%err, "sink write failed");
            }
        }
        self.active.apply(&e);
        let lateness = at.saturating_sub(deadline);
        self.stats.emitted += 1;
        if lateness > 0 {
            self.stats.late += 1;
            self.stats.total_lateness_us += lateness;
            self.stats.max_lateness_us = self.stats.max_lateness_us.max(lateness);
            tracing::trace!(lateness_us = lateness, "late emission");
        }
        self.outbox.push(Emitted { event: e, deadline });
    }

    /// Everything emitted since the last call, in emission order.
    pub fn take_emitted(&mut self) -> Vec<Emitted> {
        std::mem::take(&mut self.outbox)
    }

    pub fn flush_sink(&mut self) -> io::Result<()> {
        self.sink.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{sort_events, NoteEvent, PedalEvent};
    use proptest::prelude::*;

    fn ms(v: u64) -> Timestamp {
        Timestamp::from_millis(v)
    }

    fn virtual_sched() -> (Scheduler, CollectSink) {
        let sink = CollectSink::new();
        (Scheduler::new(Box::new(VirtualClock::new()), Box::new(sink.clone())), sink)
    }

    #[test]
    fn future_event_emitted_at_deadline() {
        let (mut s, sink) = virtual_sched();
        s.run_until(ms(1000)).unwrap();
        s.schedule(NoteEvent::on(60, 90, ms(1100)).into()).unwrap();
        s.run_until(ms(1099)).unwrap();
        assert!(sink.lines().is_empty());
        s.run_until(ms(5000)).unwrap();
        assert_eq!(sink.lines(), vec![SinkLine { t: ms(1100), msg: MidiMessage::NoteOn { pitch: 60, velocity: 90 } }]);
    }

    #[test]
    fn late_event_clamped_to_now() {
        let (mut s, sink) = virtual_sched();
        s.run_until(ms(1000)).unwrap();
        s.schedule(NoteEvent::on(60, 90, ms(950)).into()).unwrap();
        assert_eq!(sink.lines()[0].t, ms(1000));
        let emitted = s.take_emitted();
        assert_eq!(emitted[0].lateness_us(), 50_000);
        assert_eq!(s.stats().late, 1);
    }

    #[test]
    fn cancel_counts() {
        let (mut s, _) = virtual_sched();
        assert_eq!(s.cancel_all(), 0);
        for i in 0..10 {
            s.schedule(NoteEvent::on(60, 90, ms(10 + i)).into()).unwrap();
        }
        assert_eq!(s.cancel_all(), 10);
        assert_eq!(s.pending(), 0);
        for i in 1..=5 {
            s.schedule(NoteEvent::on(60, 90, ms(i)).into()).unwrap();
        }
        s.run_until(ms(2)).unwrap();
        assert_eq!(s.cancel_all(), 3);
    }

    #[test]
    fn overload() {
        let mut s = Scheduler::with_capacity(Box::new(VirtualClock::new()), Box::new(NullSink), 2);
        s.schedule(NoteEvent::on(60, 90, ms(1)).into()).unwrap();
        s.schedule(NoteEvent::on(60, 90, ms(2)).into()).unwrap();
        assert_eq!(s.schedule(NoteEvent::on(60, 90, ms(3)).into()), Err(SchedError::Overload(2)));
        // due events bypass the queue
        s.schedule(NoteEvent::on(60, 90, ms(0)).into()).unwrap();
    }

    #[test]
    fn run_until_zero_only_emits_time_zero() {
        let (mut s, sink) = virtual_sched();
        s.schedule(NoteEvent::on(60, 90, Timestamp(0)).into()).unwrap();
        s.schedule(NoteEvent::on(61, 90, Timestamp(1)).into()).unwrap();
        s.run_until(Timestamp(0)).unwrap();
        assert_eq!(sink.lines().len(), 1);
    }

    #[test]
    fn real_clock_rejects_run_until() {
        let mut s = Scheduler::new(Box::new(RealClock::new()), Box::new(NullSink));
        assert_eq!(s.run_until(ms(1)), Err(SchedError::Clock(ClockError::NotVirtual)));
    }

    #[test]
    fn sink_line_format() {
        let lines = [
            SinkLine { t: Timestamp(350000), msg: MidiMessage::NoteOn { pitch: 60, velocity: 100 } },
            SinkLine { t: Timestamp(850000), msg: MidiMessage::NoteOff { pitch: 60 } },
            SinkLine { t: Timestamp(900000), msg: MidiMessage::Sustain { value: 0 } },
        ];
        let text: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        assert_eq!(text, vec!["350000 ON 60 100", "850000 OFF 60 0", "900000 CC64 0 0"]);
        for (l, t) in lines.iter().zip(&text) {
            assert_eq!(&t.parse::<SinkLine>().unwrap(), l);
        }
        assert!("12 NOPE 1 2".parse::<SinkLine>().is_err());
    }

    #[test]
    fn midi_bytes() {
        assert_eq!(MidiMessage::NoteOn { pitch: 60, velocity: 100 }.bytes(), [0x90, 60, 100]);
        assert_eq!(MidiMessage::NoteOff { pitch: 60 }.bytes(), [0x80, 60, 0]);
        assert_eq!(MidiMessage::Sustain { value: 127 }.bytes(), [0xB0, 64, 127]);
        let mut raw = RawMidiSink::new(Vec::new());
        raw.send(Timestamp(0), &MidiMessage::NoteOn { pitch: 1, velocity: 2 }).unwrap();
        assert_eq!(raw.out, vec![0x90, 1, 2]);
    }

    #[test]
    fn sink_spec_parse() {
        assert_eq!("null".parse::<SinkSpec>().unwrap(), SinkSpec::Null);
        assert_eq!("file:out.log".parse::<SinkSpec>().unwrap(), SinkSpec::File("out.log".into()));
        assert_eq!("midi:/dev/snd/midiC1D0".parse::<SinkSpec>().unwrap(), SinkSpec::Midi("/dev/snd/midiC1D0".into()));
        assert!("file:".parse::<SinkSpec>().is_err());
        assert!("tcp:1".parse::<SinkSpec>().is_err());
        assert_eq!("out.log".parse::<SinkSpec>().unwrap(), SinkSpec::File("out.log".into()));
    }

    fn arb_events(n: usize) -> impl Strategy<Value = Vec<EngineEvent>> {
        prop::collection::vec((0u64..50_000, any::<bool>(), 50u8..60, any::<bool>()), n).prop_map(|v| {
            v.into_iter()
                .map(|(t, on, p, pedal)| {
                    if pedal {
                        PedalEvent::new(p, Timestamp(t)).into()
                    } else if on {
                        NoteEvent::on(p, 64, Timestamp(t)).into()
                    } else {
                        NoteEvent::off(p, Timestamp(t)).into()
                    }
                })
                .collect()
        })
    }

    fn recount(lines: &[SinkLine]) -> BTreeMap<u8, u32> {
        let mut m: BTreeMap<u8, u32> = BTreeMap::new();
        for l in lines {
            match l.msg {
                MidiMessage::NoteOn { pitch, .. } => *m.entry(pitch).or_default() += 1,
                MidiMessage::NoteOff { pitch } => {
                    let c = m.entry(pitch).or_default();
                    *c = c.saturating_sub(1);
                }
                _ => {}
            }
        }
        m.retain(|_, c| *c > 0);
        m
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn emission_order_is_event_order(events in arb_events(1000)) {
            let (mut s, _) = virtual_sched();
            s.run_until(Timestamp(0)).unwrap();
            let future: Vec<EngineEvent> = events.into_iter().map(|e| { let t = e.t() + 1; e.with_t(t) }).collect();
            for e in &future {
                s.schedule(e.clone()).unwrap();
            }
            s.run_until(Timestamp(1_000_000)).unwrap();
            let got: Vec<EngineEvent> = s.take_emitted().into_iter().map(|x| x.event).collect();
            let mut expected = future;
            sort_events(&mut expected);
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn split_run_equivalence(events in arb_events(200), split in 0u64..60_000) {
            let (mut a, sink_a) = virtual_sched();
            let (mut b, sink_b) = virtual_sched();
            for e in &events {
                a.schedule(e.clone()).unwrap();
                b.schedule(e.clone()).unwrap();
            }
            a.run_until(Timestamp(split)).unwrap();
            a.run_until(Timestamp(60_000)).unwrap();
            b.run_until(Timestamp(60_000)).unwrap();
            prop_assert_eq!(sink_a.lines(), sink_b.lines());
        }

        #[test]
        fn active_table_matches_recount(events in arb_events(300), steps in prop::collection::vec(0u64..50_000, 1..10)) {
            let (mut s, sink) = virtual_sched();
            for e in &events {
                s.schedule(e.clone()).unwrap();
            }
            let mut steps = steps;
            steps.sort();
            for t in steps {
                s.run_until(Timestamp(t)).unwrap();
                let table: BTreeMap<u8, u32> = s.active().iter().collect();
                prop_assert_eq!(table, recount(&sink.lines()));
            }
        }
    }
}
