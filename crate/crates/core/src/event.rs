//! Timestamped performance events and their total ordering.
//!
//! Every stage of the engine (codec, pipeline, scheduler, session log) moves
//! [`EngineEvent`] values around. Times are integer microseconds since the
//! engine epoch; public tolerances are stated in milliseconds.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

/// Microseconds since the engine epoch. Monotonic, never wall-clock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub const fn from_micros(us: u64) -> Self {
        Timestamp(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        Timestamp(ms * 1000)
    }

    pub const fn micros(self) -> u64 {
        self.0
    }

    pub fn millis_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn saturating_sub(self, other: Timestamp) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl Add<u64> for Timestamp {
    type Output = Timestamp;

    fn add(self, us: u64) -> Timestamp {
        Timestamp(self.0.saturating_add(us))
    }
}

impl Sub for Timestamp {
    type Output = i64;

    fn sub(self, other: Timestamp) -> i64 {
        self.0 as i64 - other.0 as i64
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Converts a millisecond duration (possibly fractional) to whole microseconds.
pub fn ms_to_us(ms: f64) -> u64 {
    (ms * 1000.0).round().max(0.0) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoteKind {
    On,
    Off,
}

/// Where an event entered the engine.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Live,
    Loop,
    Simulator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoteEvent {
    pub kind: NoteKind,
    pub pitch: u8,
    pub velocity: u8,
    pub t: Timestamp,
    #[serde(default)]
    pub source: Source,
}

impl NoteEvent {
    pub fn on(pitch: u8, velocity: u8, t: Timestamp) -> Self {
        NoteEvent { kind: NoteKind::On, pitch, velocity, t, source: Source::Live }
    }

    /// Release velocity is not modelled; note-offs always carry 0.
    pub fn off(pitch: u8, t: Timestamp) -> Self {
        NoteEvent { kind: NoteKind::Off, pitch, velocity: 0, t, source: Source::Live }
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    pub fn is_on(&self) -> bool {
        self.kind == NoteKind::On
    }
}

/// Sustain pedal (controller 64). Values of 64 and above hold the pedal down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PedalEvent {
    pub value: u8,
    pub t: Timestamp,
}

impl PedalEvent {
    pub fn new(value: u8, t: Timestamp) -> Self {
        PedalEvent { value, t }
    }

    pub fn is_down(&self) -> bool {
        self.value >= 64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Marker {
    pub label: String,
    pub t: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum EngineEvent {
    Note(NoteEvent),
    Pedal(PedalEvent),
    Marker(Marker),
}

impl EngineEvent {
    pub fn t(&self) -> Timestamp {
        match self {
            EngineEvent::Note(n) => n.t,
            EngineEvent::Pedal(p) => p.t,
            EngineEvent::Marker(m) => m.t,
        }
    }

    pub fn set_t(&mut self, t: Timestamp) {
        match self {
            EngineEvent::Note(n) => n.t = t,
            EngineEvent::Pedal(p) => p.t = t,
            EngineEvent::Marker(m) => m.t = t,
        }
    }

    pub fn with_t(mut self, t: Timestamp) -> Self {
        self.set_t(t);
        self
    }

    pub fn as_note(&self) -> Option<&NoteEvent> {
        match self {
            EngineEvent::Note(n) => Some(n),
            _ => None,
        }
    }

    /// Rank used by [`event_order`] after the timestamp.
    fn kind_rank(&self) -> u8 {
        match self {
            EngineEvent::Note(n) if n.kind == NoteKind::Off => 0,
            EngineEvent::Note(_) => 1,
            EngineEvent::Pedal(_) => 2,
            EngineEvent::Marker(_) => 3,
        }
    }

    /// Sort key equivalent to [`event_order`].
    pub fn order_key(&self) -> OrderKey {
        let pitch = match self {
            EngineEvent::Note(n) => n.pitch,
            _ => 0,
        };
        OrderKey { t: self.t(), rank: self.kind_rank(), pitch }
    }
}

impl From<NoteEvent> for EngineEvent {
    fn from(n: NoteEvent) -> Self {
        EngineEvent::Note(n)
    }
}

impl From<PedalEvent> for EngineEvent {
    fn from(p: PedalEvent) -> Self {
        EngineEvent::Pedal(p)
    }
}

/// `(t, kind rank, pitch)`; kind rank is note-off < note-on < pedal < marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OrderKey {
    pub t: Timestamp,
    pub rank: u8,
    pub pitch: u8,
}

/// Total order over events.
///
/// Timestamp first. At equal time every note-off sorts before every note-on,
/// which lets a loop copy retrigger a pitch the previous copy just released.
/// Notes of the same kind sort by pitch, then pedal events, then markers.
/// Velocity, source, pedal value and marker label do not participate.
pub fn event_order(a: &EngineEvent, b: &EngineEvent) -> Ordering {
    a.order_key().cmp(&b.order_key())
}

/// Sorts a stream in place with [`event_order`]; stable for equal keys.
pub fn sort_events(events: &mut [EngineEvent]) {
    events.sort_by(event_order);
}

/// A field whose invariant does not hold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.detail)
    }
}

impl std::error::Error for Violation {}

pub fn validate_event(e: &EngineEvent) -> Result<(), Violation> {
    match e {
        EngineEvent::Note(n) => {
            if n.pitch > 127 {
                return Err(Violation { field: "pitch", detail: format!("{} exceeds 127", n.pitch) });
            }
            match n.kind {
                NoteKind::On if !(1..=127).contains(&n.velocity) => Err(Violation {
                    field: "velocity",
                    detail: format!("note-on velocity {} outside 1..=127", n.velocity),
                }),
                NoteKind::Off if n.velocity != 0 => {
                    Err(Violation { field: "velocity", detail: format!("note-off velocity {} must be 0", n.velocity) })
                }
                _ => Ok(()),
            }
        }
        EngineEvent::Pedal(p) if p.value > 127 => {
            Err(Violation { field: "value", detail: format!("pedal value {} exceeds 127", p.value) })
        }
        _ => Ok(()),
    }
}
