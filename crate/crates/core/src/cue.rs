//! Cue presets and operator commands.
//!
//! A cue sheet is the piece's section list; each cue carries a full chain
//! parameter set. Commands arrive from the control channel as JSON
//! `{id, cmd, args}` objects and are applied to the chain one at a time,
//! between pipeline events.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::event::{EngineEvent, Timestamp};
use crate::pipeline::{
    ChainParams, EffectChain, LoopError, LoopParams, ParamError, PedalMode, Repeats, VelocityParams,
};
use crate::session::Direction;

/// Minimum spacing between monitor broadcasts: at most 30 per second.
pub const MONITOR_INTERVAL_US: u64 = 33_334;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCue", into = "RawCue")]
pub struct CuePreset {
    pub name: String,
    pub params: ChainParams,
    pub notes: String,
}

/// On-disk shape of a cue: chain fields inline next to name and notes.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCue {
    name: String,
    #[serde(default)]
    velocity: VelocityParams,
    #[serde(default)]
    delay_ms: f64,
    #[serde(default = "one")]
    speed: f64,
    #[serde(default)]
    pedal_mode: PedalMode,
    #[serde(default, rename = "loop")]
    looping: LoopParams,
    #[serde(default)]
    notes: String,
}

fn one() -> f64 {
    1.0
}

impl From<RawCue> for CuePreset {
    fn from(r: RawCue) -> Self {
        CuePreset {
            name: r.name,
            params: ChainParams {
                velocity: r.velocity,
                delay_ms: r.delay_ms,
                speed: r.speed,
                pedal_mode: r.pedal_mode,
                looping: r.looping,
            },
            notes: r.notes,
        }
    }
}

impl From<CuePreset> for RawCue {
    fn from(c: CuePreset) -> Self {
        RawCue {
            name: c.name,
            velocity: c.params.velocity,
            delay_ms: c.params.delay_ms,
            speed: c.params.speed,
            pedal_mode: c.params.pedal_mode,
            looping: c.params.looping,
            notes: c.notes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CueError {
    #[error("cue sheet parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("{detail} in cue '{cue}'")]
    Invalid { cue: String, detail: ParamError },
    #[error("duplicate cue name '{0}'")]
    Duplicate(String),
    #[error("cue sheet has no cues")]
    Empty,
}

/// Ordered cue presets plus the operator's position in them.
#[derive(Debug, Clone, PartialEq)]
pub struct CueSheet {
    cues: Vec<CuePreset>,
    current: usize,
}

impl Serialize for CueSheet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.cues.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CueSheet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let cues = Vec::<CuePreset>::deserialize(d)?;
        CueSheet::new(cues).map_err(serde::de::Error::custom)
    }
}

impl CueSheet {
    pub fn new(cues: Vec<CuePreset>) -> Result<Self, CueError> {
        if cues.is_empty() {
            return Err(CueError::Empty);
        }
        let mut seen = HashSet::new();
        for c in &cues {
            c.params.validate().map_err(|detail| CueError::Invalid { cue: c.name.clone(), detail })?;
            if !seen.insert(c.name.as_str()) {
                return Err(CueError::Duplicate(c.name.clone()));
            }
        }
        Ok(CueSheet { cues, current: 0 })
    }

    /// A one-cue sheet, used when no cue file is given.
    pub fn single(params: ChainParams) -> Result<Self, CueError> {
        CueSheet::new(vec![CuePreset { name: "default".into(), params, notes: String::new() }])
    }

    pub fn parse(text: &str) -> Result<Self, CueError> {
        let cues: Vec<CuePreset> = serde_json::from_str(text).map_err(|e| CueError::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        CueSheet::new(cues)
    }

    pub fn cues(&self) -> &[CuePreset] {
        &self.cues
    }

    pub fn len(&self) -> usize {
        self.cues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cues.is_empty()
    }

    pub fn current_index(&self) -> usize {
        self.current
    }

    pub fn current(&self) -> &CuePreset {
        &self.cues[self.current]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlCommand {
    SetParam { path: String, value: Value },
    LoopStartCapture,
    LoopStopCapture,
    LoopPlay { repeats: Repeats },
    LoopStop,
    Stop,
    Reset,
    GotoCue { index: usize },
    NextCue,
    PrevCue,
}

impl ControlCommand {
    pub fn name(&self) -> &'static str {
        match self {
            ControlCommand::SetParam { .. } => "set_param",
            ControlCommand::LoopStartCapture => "loop_start_capture",
            ControlCommand::LoopStopCapture => "loop_stop_capture",
            ControlCommand::LoopPlay { .. } => "loop_play",
            ControlCommand::LoopStop => "loop_stop",
            ControlCommand::Stop => "stop",
            ControlCommand::Reset => "reset",
            ControlCommand::GotoCue { .. } => "goto_cue",
            ControlCommand::NextCue => "next_cue",
            ControlCommand::PrevCue => "prev_cue",
        }
    }

    pub fn args(&self) -> Value {
        match self {
            ControlCommand::SetParam { path, value } => json!({ "path": path, "value": value }),
            ControlCommand::LoopPlay { repeats } => json!({ "repeats": repeats }),
            ControlCommand::GotoCue { index } => json!({ "index": index }),
            _ => Value::Null,
        }
    }

    pub fn from_parts(cmd: &str, args: &Value) -> Result<Self, String> {
        let field = |k: &str| args.get(k).ok_or_else(|| format!("{cmd}: missing argument '{k}'"));
        Ok(match cmd {
            "set_param" => {
                let path = field("path")?.as_str().ok_or("set_param: 'path' must be a string")?.to_owned();
                ControlCommand::SetParam { path, value: field("value")?.clone() }
            }
            "loop_start_capture" => ControlCommand::LoopStartCapture,
            "loop_stop_capture" => ControlCommand::LoopStopCapture,
            "loop_play" => {
                let repeats = Repeats::from_json(args.get("repeats").unwrap_or(&Value::Null))?;
                ControlCommand::LoopPlay { repeats }
            }
            "loop_stop" => ControlCommand::LoopStop,
            "stop" => ControlCommand::Stop,
            "reset" => ControlCommand::Reset,
            "goto_cue" => {
                let index = field("index")?.as_u64().ok_or("goto_cue: 'index' must be a non-negative integer")?;
                ControlCommand::GotoCue { index: index as usize }
            }
            "next_cue" => ControlCommand::NextCue,
            "prev_cue" => ControlCommand::PrevCue,
            other => return Err(format!("unknown command '{other}'")),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct WireCommand {
    cmd: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    args: Value,
}

impl Serialize for ControlCommand {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        WireCommand { cmd: self.name().to_owned(), args: self.args() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ControlCommand {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = WireCommand::deserialize(d)?;
        ControlCommand::from_parts(&w.cmd, &w.args).map_err(serde::de::Error::custom)
    }
}

/// A control-channel request line.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: Value,
    pub cmd: ControlCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub id: Value,
    pub ok: bool,
    pub detail: Value,
}

impl Reply {
    pub fn error(id: Value, msg: impl fmt::Display) -> Self {
        Reply { id, ok: false, detail: Value::String(msg.to_string()) }
    }
}

/// Parses one request line. Failures come back as the reply to send.
pub fn parse_request(line: &str) -> Result<Request, Reply> {
    let v: Value = serde_json::from_str(line).map_err(|e| Reply::error(Value::Null, format!("bad json: {e}")))?;
    let id = v.get("id").cloned().unwrap_or(Value::Null);
    let Some(cmd) = v.get("cmd").and_then(Value::as_str) else {
        return Err(Reply::error(id, "missing 'cmd'"));
    };
    let args = v.get("args").cloned().unwrap_or(Value::Null);
    match ControlCommand::from_parts(cmd, &args) {
        Ok(cmd) => Ok(Request { id, cmd }),
        Err(e) => Err(Reply::error(id, e)),
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommandError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error("cue index {index} out of range (sheet has {len} cues)")]
    CueIndex { index: usize, len: usize },
    #[error("already at the last cue")]
    NoNextCue,
    #[error("already at the first cue")]
    NoPrevCue,
}

/// What a successful command did.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// Echoed to the console and the session log.
    pub detail: Value,
    /// Events to schedule now (note-offs, pedal release).
    pub emit: Vec<EngineEvent>,
    /// Drop everything still queued in the scheduler before scheduling `emit`.
    pub cancel_pending: bool,
}

impl Outcome {
    fn detail(detail: Value) -> Self {
        Outcome { detail, emit: Vec::new(), cancel_pending: false }
    }
}

fn params_json(p: &ChainParams) -> Value {
    serde_json::to_value(p).expect("params serialize")
}

/// Applies `cmd` at engine time `now`. `sounding` lists one entry per note
/// currently held at the sink.
///
/// Either the whole command takes effect or nothing does: work happens on
/// copies that replace the originals only on success.
pub fn apply_command(
    cmd: &ControlCommand,
    chain: &mut EffectChain,
    sheet: &mut CueSheet,
    now: Timestamp,
    sounding: &[u8],
) -> Result<Outcome, CommandError> {
    let mut next = chain.clone();
    let mut cue = sheet.current;
    let out = match cmd {
        ControlCommand::SetParam { path, value } => {
            let before = next.params().get(path)?;
            let params = next.params().with(path, value)?;
            next.set_params(params, now)?;
            Outcome::detail(json!({ "set": path, "value": params.get(path)?, "previous": before }))
        }
        ControlCommand::LoopStartCapture => {
            next.loop_capture_start(now)?;
            Outcome::detail(json!({ "loop": "capturing" }))
        }
        ControlCommand::LoopStopCapture => {
            next.loop_capture_stop(now)?;
            let l = next.looper();
            Outcome::detail(json!({
                "loop": "playing",
                "period_ms": l.period_us() as f64 / 1000.0,
                "events": l.segment().len(),
            }))
        }
        ControlCommand::LoopPlay { repeats } => {
            let emit = next.loop_play(now, *repeats)?;
            Outcome { detail: json!({ "loop": "playing", "repeats": repeats }), emit, cancel_pending: false }
        }
        ControlCommand::LoopStop => {
            let emit = next.loop_stop(now);
            Outcome { detail: json!({ "loop": "idle" }), emit, cancel_pending: false }
        }
        ControlCommand::Stop => {
            let emit = next.stop_all(sounding, now);
            Outcome { detail: json!({ "stopped": true, "released": sounding.len() }), emit, cancel_pending: true }
        }
        ControlCommand::Reset => {
            next.reset(sheet.current().params)?;
            Outcome::detail(json!({ "reset": sheet.current().name, "params": params_json(next.params()) }))
        }
        ControlCommand::GotoCue { .. } | ControlCommand::NextCue | ControlCommand::PrevCue => {
            let len = sheet.len();
            cue = match cmd {
                ControlCommand::GotoCue { index } if *index < len => *index,
                ControlCommand::GotoCue { index } => return Err(CommandError::CueIndex { index: *index, len }),
                ControlCommand::NextCue if cue + 1 < len => cue + 1,
                ControlCommand::NextCue => return Err(CommandError::NoNextCue),
                _ if cue > 0 => cue - 1,
                _ => return Err(CommandError::NoPrevCue),
            };
            let preset = &sheet.cues[cue];
            next.set_params(preset.params, now)?;
            Outcome::detail(json!({
                "cue": { "index": cue, "name": preset.name, "notes": preset.notes },
                "params": params_json(next.params()),
            }))
        }
    };
    *chain = next;
    sheet.current = cue;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorFrame {
    pub t: Timestamp,
    pub direction: Direction,
    pub event: EngineEvent,
}

/// Batches monitor frames so broadcasts go out at most every
/// [`MONITOR_INTERVAL_US`]. Frames beyond `capacity` per batch are counted and
/// dropped, oldest first.
#[derive(Debug)]
pub struct MonitorCoalescer {
    pending: std::collections::VecDeque<MonitorFrame>,
    last_flush: Option<u64>,
    capacity: usize,
    dropped: u64,
}

impl MonitorCoalescer {
    pub fn new(capacity: usize) -> Self {
        MonitorCoalescer { pending: Default::default(), last_flush: None, capacity: capacity.max(1), dropped: 0 }
    }

    pub fn push(&mut self, frame: MonitorFrame) {
        if self.pending.len() == self.capacity {
            self.pending.pop_front();
            self.dropped += 1;
        }
        self.pending.push_back(frame);
    }

    /// The next batch if one is due at `now_us`.
    pub fn poll(&mut self, now_us: u64) -> Option<Vec<MonitorFrame>> {
        if self.pending.is_empty() {
            return None;
        }
        if let Some(last) = self.last_flush {
            if now_us < last + MONITOR_INTERVAL_US {
                return None;
            }
        }
        self.last_flush = Some(now_us);
        Some(self.pending.drain(..).collect())
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

/// One broadcast: a frame per line.
pub fn encode_frames(frames: &[MonitorFrame]) -> String {
    let mut s = String::new();
    for f in frames {
        s.push_str(&serde_json::to_string(f).expect("frame serializes"));
        s.push('\n');
    }
    s
}
