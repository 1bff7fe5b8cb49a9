//! Phrase looper.
//!
//! Capture records live events relative to the capture start. Playback
//! repeats the segment every `period` microseconds. Segment positions are
//! measured in "loop time" (unscaled); [`LoopState::pull`] maps them to output
//! time through the current playback speed, re-anchoring whenever the speed
//! changes so that a slider move never makes the loop jump.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{EngineEvent, NoteEvent, NoteKind, Source, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopMode {
    Idle,
    Capturing,
    Playing,
}

/// Number of times the segment plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Repeats {
    Count(u32),
    #[default]
    Infinite,
}

impl Repeats {
    fn limit(self) -> Option<u64> {
        match self {
            Repeats::Count(n) => Some(n as u64),
            Repeats::Infinite => None,
        }
    }
}

impl fmt::Display for Repeats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Repeats::Count(n) => write!(f, "{n}"),
            Repeats::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Repeats {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Repeats::Count(n) => s.serialize_u32(*n),
            Repeats::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Repeats {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        Repeats::from_json(&v).map_err(serde::de::Error::custom)
    }
}

impl Repeats {
    pub fn from_json(v: &serde_json::Value) -> Result<Repeats, String> {
        match v {
            serde_json::Value::String(s) if s == "inf" => Ok(Repeats::Infinite),
            serde_json::Value::Null => Ok(Repeats::Infinite),
            serde_json::Value::Number(n) => match n.as_u64() {
                Some(k) if (1..=u32::MAX as u64).contains(&k) => Ok(Repeats::Count(k as u32)),
                _ => Err(format!("repeats must be a positive integer or \"inf\", got {n}")),
            },
            other => Err(format!("repeats must be a positive integer or \"inf\", got {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoopError {
    #[error("loop is {0:?}; expected {1:?}")]
    State(LoopMode, LoopMode),
    #[error("captured segment is empty")]
    EmptyLoop,
    #[error("no captured segment to play")]
    NoSegment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Sounding {
    count: u32,
    last_on: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    mode: LoopMode,
    /// Events with times relative to capture start, sorted by event order.
    segment: Vec<EngineEvent>,
    repeats: Repeats,
    period_us: u64,
    capture_start: Timestamp,
    loop_start: Timestamp,
    speed: f64,
    anchor_out: Timestamp,
    anchor_pos: f64,
    /// Loop positions below this have been handed downstream.
    gen_pos: u64,
    sounding: BTreeMap<u8, Sounding>,
}

impl Default for LoopState {
    fn default() -> Self {
        LoopState {
            mode: LoopMode::Idle,
            segment: Vec::new(),
            repeats: Repeats::Infinite,
            period_us: 0,
            capture_start: Timestamp::ZERO,
            loop_start: Timestamp::ZERO,
            speed: 1.0,
            anchor_out: Timestamp::ZERO,
            anchor_pos: 0.0,
            gen_pos: 0,
            sounding: BTreeMap::new(),
        }
    }
}

impl LoopState {
    /// A playing loop built directly from a relative segment.
    pub fn playing(segment: Vec<EngineEvent>, period_us: u64, repeats: Repeats, loop_start: Timestamp) -> Self {
        let mut s = LoopState { segment, period_us, repeats, ..Default::default() };
        s.segment.sort_by(crate::event::event_order);
        s.start_playback(loop_start, 1.0);
        s
    }

    pub fn mode(&self) -> LoopMode {
        self.mode
    }

    pub fn segment(&self) -> &[EngineEvent] {
        &self.segment
    }

    pub fn period_us(&self) -> u64 {
        self.period_us
    }

    pub fn repeats(&self) -> Repeats {
        self.repeats
    }

    pub fn loop_start(&self) -> Timestamp {
        self.loop_start
    }

    pub fn capture_start(&mut self, now: Timestamp) -> Result<(), LoopError> {
        if self.mode != LoopMode::Idle {
            return Err(LoopError::State(self.mode, LoopMode::Idle));
        }
        self.segment.clear();
        self.sounding.clear();
        self.capture_start = now;
        self.mode = LoopMode::Capturing;
        Ok(())
    }

    /// Appends a live event to the segment while capturing.
    pub fn tap(&mut self, e: &EngineEvent) {
        if self.mode != LoopMode::Capturing {
            return;
        }
        let rel = Timestamp(e.t().saturating_sub(self.capture_start));
        match e {
            EngineEvent::Note(n) if n.source != Source::Loop => self.segment.push(e.clone().with_t(rel)),
            EngineEvent::Pedal(_) => self.segment.push(e.clone().with_t(rel)),
            _ => {}
        }
    }

    /// Ends capture and starts playback.
    ///
    /// The period is `max(segment span, min_period_us)`. Note-offs without a
    /// captured note-on are dropped; note-ons still held when capture stopped
    /// are closed at the period boundary. Playback begins one period after the
    /// capture started, or now if that has already passed.
    pub fn capture_stop(&mut self, now: Timestamp, min_period_us: u64, speed: f64) -> Result<(), LoopError> {
        if self.mode != LoopMode::Capturing {
            return Err(LoopError::State(self.mode, LoopMode::Capturing));
        }
        self.segment.sort_by(crate::event::event_order);
        let mut held: BTreeMap<u8, u32> = BTreeMap::new();
        self.segment.retain(|e| match e {
            EngineEvent::Note(n) if n.is_on() => {
                *held.entry(n.pitch).or_default() += 1;
                true
            }
            EngineEvent::Note(n) => match held.get_mut(&n.pitch) {
                Some(c) if *c > 0 => {
                    *c -= 1;
                    true
                }
                _ => false,
            },
            _ => true,
        });
        if !self.segment.iter().any(|e| matches!(e, EngineEvent::Note(_))) {
            self.segment.clear();
            self.mode = LoopMode::Idle;
            return Err(LoopError::EmptyLoop);
        }
        let span = self.segment.iter().map(|e| e.t().0).max().unwrap_or(0);
        self.period_us = span.max(min_period_us).max(1);
        let boundary = Timestamp(self.period_us);
        for (pitch, count) in held {
            for _ in 0..count {
                self.segment.push(NoteEvent::off(pitch, boundary).into());
            }
        }
        self.segment.sort_by(crate::event::event_order);
        let start = (self.capture_start + self.period_us).max(now);
        self.start_playback(start, speed);
        Ok(())
    }

    /// Restarts playback of the existing segment at `now`.
    pub fn play(&mut self, now: Timestamp, repeats: Repeats, speed: f64) -> Result<Vec<EngineEvent>, LoopError> {
        if self.mode == LoopMode::Capturing {
            return Err(LoopError::State(self.mode, LoopMode::Idle));
        }
        if self.segment.is_empty() {
            return Err(LoopError::NoSegment);
        }
        let offs = self.release(now);
        self.repeats = repeats;
        self.start_playback(now, speed);
        Ok(offs)
    }

    pub fn set_repeats(&mut self, repeats: Repeats) {
        self.repeats = repeats;
    }

    fn start_playback(&mut self, start: Timestamp, speed: f64) {
        self.mode = LoopMode::Playing;
        self.loop_start = start;
        self.anchor_out = start;
        self.anchor_pos = 0.0;
        self.gen_pos = 0;
        self.speed = speed;
    }

    /// Stops playback, keeping the segment. Returns note-offs (in output time,
    /// before downstream stages) for copies still sounding.
    pub fn stop(&mut self, now: Timestamp) -> Vec<EngineEvent> {
        let offs = self.release(now);
        if self.mode == LoopMode::Capturing {
            self.segment.clear();
        }
        self.mode = LoopMode::Idle;
        offs
    }

    /// Drops everything, including the segment.
    pub fn clear(&mut self) {
        *self = LoopState { repeats: self.repeats, ..Default::default() };
    }

    fn release(&mut self, now: Timestamp) -> Vec<EngineEvent> {
        let mut offs = Vec::new();
        for (pitch, s) in std::mem::take(&mut self.sounding) {
            // strictly after the note-on, otherwise the off would sort first
            let t = now.max(s.last_on + 1);
            for _ in 0..s.count {
                offs.push(NoteEvent::off(pitch, t).with_source(Source::Loop).into());
            }
        }
        offs
    }

    pub fn set_speed(&mut self, now: Timestamp, speed: f64) {
        if self.mode == LoopMode::Playing && now > self.anchor_out {
            self.anchor_pos += (now.0 - self.anchor_out.0) as f64 * self.speed;
            self.anchor_out = now;
        }
        self.speed = speed;
    }

    /// True once a finite loop has produced every copy.
    pub fn is_exhausted(&self) -> bool {
        match (self.mode, self.repeats.limit()) {
            (LoopMode::Playing, Some(n)) => self.gen_pos > n * self.period_us,
            (LoopMode::Playing, None) => false,
            _ => true,
        }
    }

    /// Segment copies at loop positions in `[lo, hi)`, stamped with their
    /// position and sorted by event order.
    fn enumerate(&self, lo: u64, hi: u64) -> Vec<EngineEvent> {
        let mut out = Vec::new();
        if self.segment.is_empty() || hi <= lo {
            return out;
        }
        let period = self.period_us;
        let mut k_hi = hi / period;
        if let Some(n) = self.repeats.limit() {
            if n == 0 {
                return out;
            }
            k_hi = k_hi.min(n - 1);
        }
        let k_lo = lo.saturating_sub(period) / period;
        for k in k_lo..=k_hi {
            for e in &self.segment {
                let pos = k * period + e.t().0;
                if pos >= lo && pos < hi {
                    out.push(tag_loop(e.clone().with_t(Timestamp(pos))));
                }
            }
        }
        out.sort_by(crate::event::event_order);
        out
    }

    /// Every copy whose unscaled absolute time `loop_start + k*period + rel`
    /// lies in `[t0, t1)`, for `k < repeats`. Empty unless playing.
    pub fn loop_emit(&self, t0: Timestamp, t1: Timestamp) -> Vec<EngineEvent> {
        if self.mode != LoopMode::Playing {
            return Vec::new();
        }
        let lo = t0.saturating_sub(self.loop_start);
        let hi = t1.saturating_sub(self.loop_start);
        self.enumerate(lo, hi)
            .into_iter()
            .map(|e| {
                let t = self.loop_start + e.t().0;
                e.with_t(t)
            })
            .collect()
    }

    /// Produces the not-yet-generated copies whose output time is before
    /// `until`, timed through the current speed mapping.
    pub fn pull(&mut self, until: Timestamp) -> Vec<EngineEvent> {
        if self.mode != LoopMode::Playing || until <= self.anchor_out {
            return Vec::new();
        }
        let end = self.anchor_pos + (until.0 - self.anchor_out.0) as f64 * self.speed;
        let hi = end.ceil() as u64;
        let lo = self.gen_pos;
        if hi <= lo {
            return Vec::new();
        }
        let copies: Vec<EngineEvent> = self
            .enumerate(lo, hi)
            .into_iter()
            .map(|e| {
                let pos = e.t().0;
                let rel = ((pos as f64 - self.anchor_pos) / self.speed).round().max(0.0) as u64;
                e.with_t(self.anchor_out + rel)
            })
            .collect();
        self.gen_pos = hi;
        for e in &copies {
            if let EngineEvent::Note(n) = e {
                match n.kind {
                    NoteKind::On => {
                        let s = self.sounding.entry(n.pitch).or_insert(Sounding { count: 0, last_on: n.t });
                        s.count += 1;
                        s.last_on = s.last_on.max(n.t);
                    }
                    NoteKind::Off => {
                        if let Some(s) = self.sounding.get_mut(&n.pitch) {
                            s.count -= 1;
                            if s.count == 0 {
                                self.sounding.remove(&n.pitch);
                            }
                        }
                    }
                }
            }
        }
        copies
    }
}

fn tag_loop(e: EngineEvent) -> EngineEvent {
    match e {
        EngineEvent::Note(n) => EngineEvent::Note(n.with_source(Source::Loop)),
        other => other,
    }
}
