//! The effect chain: loop capture tap, velocity, speed, delay, pedal mode and
//! the stop gate, applied in that fixed order.
//!
//! Live events are time-shifted but never time-scaled; speed only affects loop
//! playback. Loop copies pass through velocity, delay, pedal mode and the stop
//! gate exactly like live events.

mod looper;
mod transforms;

pub use looper::{LoopError, LoopMode, LoopState, Repeats};
pub use transforms::{apply_delay, apply_pedal_mode, apply_speed, apply_velocity, PedalMode};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::event::{ms_to_us, EngineEvent, NoteEvent, PedalEvent, Source, Timestamp};

pub const MAX_SCALE: f64 = 4.0;
pub const MAX_DELAY_MS: f64 = 60_000.0;
pub const MIN_SPEED: f64 = 0.25;
pub const MAX_SPEED: f64 = 4.0;
pub const MAX_OFFSET: i32 = 127;
pub const MAX_MIN_PERIOD_MS: f64 = 600_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityParams {
    pub scale: f64,
    pub offset: i32,
}

impl Default for VelocityParams {
    fn default() -> Self {
        VelocityParams { scale: 1.0, offset: 0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopParams {
    #[serde(default)]
    pub min_period_ms: f64,
}

/// The operator-settable part of the chain; what a cue preset stores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainParams {
    #[serde(default)]
    pub velocity: VelocityParams,
    #[serde(default)]
    pub delay_ms: f64,
    #[serde(default = "one")]
    pub speed: f64,
    #[serde(default)]
    pub pedal_mode: PedalMode,
    #[serde(default, rename = "loop")]
    pub looping: LoopParams,
}

fn one() -> f64 {
    1.0
}

impl Default for ChainParams {
    fn default() -> Self {
        ChainParams {
            velocity: VelocityParams::default(),
            delay_ms: 0.0,
            speed: 1.0,
            pedal_mode: PedalMode::Pass,
            looping: LoopParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParamError {
    #[error("{0} out of range")]
    OutOfRange(&'static str),
    #[error("unknown parameter {0:?}")]
    UnknownPath(String),
    #[error("invalid value for {path}: {detail}")]
    BadValue { path: String, detail: String },
}

fn in_range(v: f64, lo: f64, hi: f64) -> bool {
    v.is_finite() && v >= lo && v <= hi
}

impl ChainParams {
    pub const PATHS: [&'static str; 6] =
        ["velocity.scale", "velocity.offset", "delay_ms", "speed", "pedal_mode", "loop.min_period_ms"];

    pub fn validate(&self) -> Result<(), ParamError> {
        if !in_range(self.velocity.scale, 0.0, MAX_SCALE) {
            return Err(ParamError::OutOfRange("velocity.scale"));
        }
        if !(-MAX_OFFSET..=MAX_OFFSET).contains(&self.velocity.offset) {
            return Err(ParamError::OutOfRange("velocity.offset"));
        }
        if !in_range(self.delay_ms, 0.0, MAX_DELAY_MS) {
            return Err(ParamError::OutOfRange("delay_ms"));
        }
        if !in_range(self.speed, MIN_SPEED, MAX_SPEED) {
            return Err(ParamError::OutOfRange("speed"));
        }
        if !in_range(self.looping.min_period_ms, 0.0, MAX_MIN_PERIOD_MS) {
            return Err(ParamError::OutOfRange("loop.min_period_ms"));
        }
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<Value, ParamError> {
        Ok(match path {
            "velocity.scale" => Value::from(self.velocity.scale),
            "velocity.offset" => Value::from(self.velocity.offset),
            "delay_ms" => Value::from(self.delay_ms),
            "speed" => Value::from(self.speed),
            "pedal_mode" => Value::from(self.pedal_mode.as_str()),
            "loop.min_period_ms" => Value::from(self.looping.min_period_ms),
            _ => return Err(ParamError::UnknownPath(path.to_owned())),
        })
    }

    /// Returns a copy with one parameter replaced; `self` is never touched.
    pub fn with(&self, path: &str, value: &Value) -> Result<ChainParams, ParamError> {
        let bad = |detail: &str| ParamError::BadValue { path: path.to_owned(), detail: detail.to_owned() };
        let num = || value.as_f64().ok_or_else(|| bad("expected a number"));
        let mut next = *self;
        match path {
            "velocity.scale" => next.velocity.scale = num()?,
            "velocity.offset" => {
                let v = value.as_i64().ok_or_else(|| bad("expected an integer"))?;
                next.velocity.offset = i32::try_from(v).map_err(|_| ParamError::OutOfRange("velocity.offset"))?;
            }
            "delay_ms" => next.delay_ms = num()?,
            "speed" => next.speed = num()?,
            "pedal_mode" => {
                let s = value.as_str().ok_or_else(|| bad("expected a string"))?;
                next.pedal_mode =
                    PedalMode::parse(s).ok_or_else(|| bad("expected pass|force_on|force_off|suppress"))?;
            }
            "loop.min_period_ms" => next.looping.min_period_ms = num()?,
            _ => return Err(ParamError::UnknownPath(path.to_owned())),
        }
        next.validate()?;
        Ok(next)
    }

    pub fn delay_us(&self) -> u64 {
        ms_to_us(self.delay_ms)
    }
}

/// Live pipeline state: parameters, looper and the stop latch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EffectChain {
    params: ChainParams,
    looper: LoopState,
    stopped: bool,
}

impl EffectChain {
    pub fn new(params: ChainParams) -> Result<Self, ParamError> {
        params.validate()?;
        Ok(EffectChain { params, ..Default::default() })
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn looper(&self) -> &LoopState {
        &self.looper
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    /// Replaces all parameters at once. Speed changes re-anchor loop playback
    /// at `now`.
    pub fn set_params(&mut self, params: ChainParams, now: Timestamp) -> Result<(), ParamError> {
        params.validate()?;
        if params.speed != self.params.speed {
            self.looper.set_speed(now, params.speed);
        }
        self.params = params;
        Ok(())
    }

    /// Runs one live event through every stage.
    pub fn process(&mut self, e: EngineEvent) -> Vec<EngineEvent> {
        self.looper.tap(&e);
        self.finish(e).into_iter().collect()
    }

    /// Loop copies due before `until`, fully processed.
    pub fn pull_loop(&mut self, until: Timestamp) -> Vec<EngineEvent> {
        let copies = self.looper.pull(until);
        copies.into_iter().filter_map(|e| self.finish(e)).collect()
    }

    /// Velocity, delay, pedal mode, stop gate.
    fn finish(&self, e: EngineEvent) -> Option<EngineEvent> {
        let p = &self.params;
        let e = match e {
            EngineEvent::Note(n) => EngineEvent::Note(apply_velocity(n, p.velocity.scale, p.velocity.offset)),
            other => other,
        };
        let e = apply_delay(e, p.delay_us());
        let e = match e {
            EngineEvent::Pedal(ped) => EngineEvent::Pedal(apply_pedal_mode(ped, p.pedal_mode)?),
            other => other,
        };
        if self.stopped {
            return None;
        }
        Some(e)
    }

    pub fn loop_capture_start(&mut self, now: Timestamp) -> Result<(), LoopError> {
        self.looper.capture_start(now)
    }

    pub fn loop_capture_stop(&mut self, now: Timestamp) -> Result<(), LoopError> {
        let min = ms_to_us(self.params.looping.min_period_ms);
        self.looper.capture_stop(now, min, self.params.speed)
    }

    /// Restarts the captured loop at `now`; returns note-offs for copies that
    /// were still sounding.
    pub fn loop_play(&mut self, now: Timestamp, repeats: Repeats) -> Result<Vec<EngineEvent>, LoopError> {
        let offs = self.looper.play(now, repeats, self.params.speed)?;
        Ok(offs.into_iter().filter_map(|e| self.finish(e)).collect())
    }

    pub fn loop_stop(&mut self, now: Timestamp) -> Vec<EngineEvent> {
        let offs = self.looper.stop(now);
        offs.into_iter().filter_map(|e| self.finish(e)).collect()
    }

    /// Panic stop. Latches the gate, idles the looper and returns one note-off
    /// per entry of `sounding` (a pitch appears once per unmatched note-on)
    /// followed by a pedal release, all at `now`.
    pub fn stop_all(&mut self, sounding: &[u8], now: Timestamp) -> Vec<EngineEvent> {
        self.stopped = true;
        self.looper.clear();
        let mut out: Vec<EngineEvent> =
            sounding.iter().map(|&p| NoteEvent::off(p, now).with_source(Source::Live).into()).collect();
        out.push(PedalEvent::new(0, now).into());
        out
    }

    /// Clears the stop latch and installs `params`; the looper restarts idle.
    pub fn reset(&mut self, params: ChainParams) -> Result<(), ParamError> {
        params.validate()?;
        self.params = params;
        self.looper.clear();
        self.stopped = false;
        Ok(())
    }

    /// Whether the looper may still produce events.
    pub fn loop_active(&self) -> bool {
        !self.looper.is_exhausted()
    }
}
