//! Standard MIDI File reading (formats 0 and 1) and a minimal format-0 writer.
//!
//! Tempo changes from every track form one tempo map applied to all tracks.
//! Only note events are kept; a velocity-0 note-on becomes a note-off.

use thiserror::Error;

use crate::event::{sort_events, EngineEvent, NoteEvent, NoteKind, Timestamp};

const DEFAULT_TEMPO_US: u32 = 500_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed MIDI file at byte {offset}: {reason}")]
pub struct SmfError {
    pub offset: usize,
    pub reason: String,
}

fn err(offset: usize, reason: impl Into<String>) -> SmfError {
    SmfError { offset, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Division {
    Ppq(u16),
    /// Microseconds per tick as a rational (numerator, denominator).
    Smpte {
        us_num: u64,
        us_den: u64,
    },
}

/// A parsed score: note events with ideal times, in event order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReferenceScore {
    pub events: Vec<NoteEvent>,
}

/// One on/off pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreNote {
    pub pitch: u8,
    pub velocity: u8,
    pub on: Timestamp,
    pub off: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unbalanced score: pitch {pitch} at {t}")]
pub struct UnbalancedScore {
    pub pitch: u8,
    pub t: Timestamp,
}

impl ReferenceScore {
    pub fn from_notes(notes: &[ScoreNote]) -> Self {
        let mut evs: Vec<EngineEvent> = Vec::with_capacity(notes.len() * 2);
        for n in notes {
            evs.push(NoteEvent::on(n.pitch, n.velocity, n.on).into());
            evs.push(NoteEvent::off(n.pitch, n.off).into());
        }
        sort_events(&mut evs);
        ReferenceScore { events: evs.into_iter().filter_map(|e| e.as_note().copied()).collect() }
    }

    /// Pairs note-ons with note-offs first-in first-out per pitch. Notes are
    /// returned in onset order.
    pub fn notes(&self) -> Result<Vec<ScoreNote>, UnbalancedScore> {
        let mut open: [std::collections::VecDeque<usize>; 128] = std::array::from_fn(|_| Default::default());
        let mut notes: Vec<ScoreNote> = Vec::new();
        for e in &self.events {
            let p = e.pitch as usize & 0x7F;
            match e.kind {
                NoteKind::On => {
                    open[p].push_back(notes.len());
                    notes.push(ScoreNote { pitch: e.pitch, velocity: e.velocity, on: e.t, off: e.t });
                }
                NoteKind::Off => {
                    let i = open[p].pop_front().ok_or(UnbalancedScore { pitch: e.pitch, t: e.t })?;
                    notes[i].off = e.t;
                }
            }
        }
        for (p, q) in open.iter().enumerate() {
            if let Some(&i) = q.front() {
                return Err(UnbalancedScore { pitch: p as u8, t: notes[i].on });
            }
        }
        Ok(notes)
    }

    pub fn onsets(&self) -> Vec<(Timestamp, u8)> {
        self.events.iter().filter(|e| e.is_on()).map(|e| (e.t, e.pitch)).collect()
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn byte(&mut self, what: &str) -> Result<u8, SmfError> {
        let b = *self.buf.get(self.pos).ok_or_else(|| err(self.pos, format!("truncated {what}")))?;
        self.pos += 1;
        Ok(b)
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8], SmfError> {
        if self.buf.len() - self.pos < n {
            return Err(err(self.pos, format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, SmfError> {
        let b = self.bytes(2, what)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, SmfError> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, SmfError> {
        let start = self.pos;
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.byte("variable-length quantity")?;
            v = (v << 7) | (b & 0x7F) as u32;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(err(start, "variable-length quantity longer than 4 bytes"))
    }
}

struct RawNote {
    tick: u64,
    kind: NoteKind,
    pitch: u8,
    velocity: u8,
    /// (track, index) keeps simultaneous events in file order.
    order: (usize, usize),
}

pub fn parse_smf(bytes: &[u8]) -> Result<ReferenceScore, SmfError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.bytes(4, "header chunk id")? != b"MThd" {
        return Err(err(0, "missing MThd header"));
    }
    let hlen = c.u32("header length")? as usize;
    if hlen < 6 {
        return Err(err(4, "header length below 6"));
    }
    let header_at = c.pos;
    let format = c.u16("format")?;
    let ntracks = c.u16("track count")?;
    let div_at = c.pos;
    let raw_div = c.u16("division")?;
    c.bytes(hlen - 6, "header padding")?;
    if format > 1 {
        return Err(err(header_at, format!("unsupported format {format}")));
    }
    if format == 0 && ntracks != 1 {
        return Err(err(header_at + 2, "format 0 requires exactly one track"));
    }
    let division = if raw_div & 0x8000 == 0 {
        if raw_div == 0 {
            return Err(err(div_at, "zero ticks per quarter note"));
        }
        Division::Ppq(raw_div)
    } else {
        let fps = -((raw_div >> 8) as u8 as i8) as i64;
        let tpf = (raw_div & 0xFF) as u64;
        if tpf == 0 {
            return Err(err(div_at, "zero ticks per frame"));
        }
        // 29 means 29.97 drop-frame
        let (num, den) = match fps {
            24 | 25 | 30 => (1_000_000u64, fps as u64 * tpf),
            29 => (100_000_000u64, 2997 * tpf),
            _ => return Err(err(div_at, format!("unsupported SMPTE rate {fps}"))),
        };
        Division::Smpte { us_num: num, us_den: den }
    };

    let mut notes: Vec<RawNote> = Vec::new();
    let mut tempos: Vec<(u64, u32)> = Vec::new();
    let mut track = 0usize;
    while c.pos < bytes.len() {
        let chunk_at = c.pos;
        let id = c.bytes(4, "chunk id")?;
        let len = c.u32("chunk length")? as usize;
        let body_at = c.pos;
        let body = c.bytes(len, "chunk body").map_err(|_| err(chunk_at, "chunk runs past end of file"))?;
        if id != b"MTrk" {
            continue;
        }
        parse_track(body, body_at, track, &mut notes, &mut tempos)?;
        track += 1;
    }
    if track < ntracks as usize {
        return Err(err(bytes.len(), format!("expected {ntracks} tracks, found {track}")));
    }

    tempos.sort_by_key(|&(tick, _)| tick);
    notes.sort_by_key(|n| (n.tick, n.order));
    let map = TempoMap::new(division, &tempos);
    let mut evs: Vec<EngineEvent> = notes
        .iter()
        .map(|n| {
            let t = map.micros(n.tick);
            match n.kind {
                NoteKind::On => NoteEvent::on(n.pitch, n.velocity, t),
                NoteKind::Off => NoteEvent::off(n.pitch, t),
            }
            .into()
        })
        .collect();
    sort_events(&mut evs);
    Ok(ReferenceScore { events: evs.into_iter().filter_map(|e| e.as_note().copied()).collect() })
}

fn parse_track(
    body: &[u8],
    base: usize,
    track: usize,
    notes: &mut Vec<RawNote>,
    tempos: &mut Vec<(u64, u32)>,
) -> Result<(), SmfError> {
    let mut c = Cursor { buf: body, pos: 0 };
    let at = |c: &Cursor| base + c.pos;
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut index = 0usize;
    while c.pos < body.len() {
        tick += c.vlq().map_err(|e| err(base + e.offset, e.reason))? as u64;
        let status_at = at(&c);
        let first = c.byte("event").map_err(|e| err(base + e.offset, e.reason))?;
        let rel = |e: SmfError| err(base + e.offset, e.reason);
        match first {
            0xFF => {
                let kind = c.byte("meta type").map_err(rel)?;
                let len = c.vlq().map_err(rel)? as usize;
                let data = c.bytes(len, "meta data").map_err(rel)?;
                match kind {
                    0x51 => {
                        if len != 3 {
                            return Err(err(status_at, "tempo meta event must have length 3"));
                        }
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        if us == 0 {
                            return Err(err(status_at, "zero tempo"));
                        }
                        tempos.push((tick, us));
                    }
                    0x2F => break,
                    _ => {}
                }
                running = None;
            }
            0xF0 | 0xF7 => {
                let len = c.vlq().map_err(rel)? as usize;
                c.bytes(len, "sysex data").map_err(rel)?;
                running = None;
            }
            0xF1..=0xFE => return Err(err(status_at, format!("unexpected system message {first:#04x} in track"))),
            _ => {
                let (status, d1) = if first & 0x80 != 0 {
                    running = Some(first);
                    (first, c.byte("data byte").map_err(rel)?)
                } else {
                    (running.ok_or_else(|| err(status_at, "data byte without running status"))?, first)
                };
                let d2 = match status & 0xF0 {
                    0xC0 | 0xD0 => None,
                    _ => Some(c.byte("data byte").map_err(rel)?),
                };
                if d1 & 0x80 != 0 || d2.is_some_and(|d| d & 0x80 != 0) {
                    return Err(err(status_at, "data byte with high bit set"));
                }
                let note = match (status & 0xF0, d2) {
                    (0x90, Some(v)) if v > 0 => Some((NoteKind::On, v)),
                    (0x90, Some(_)) | (0x80, Some(_)) => Some((NoteKind::Off, 0)),
                    _ => None,
                };
                if let Some((kind, velocity)) = note {
                    notes.push(RawNote { tick, kind, pitch: d1, velocity, order: (track, index) });
                    index += 1;
                }
            }
        }
    }
    Ok(())
}

struct TempoMap {
    division: Division,
    /// (start tick, start micros, micros per quarter)
    segments: Vec<(u64, u128, u32)>,
}

impl TempoMap {
    fn new(division: Division, tempos: &[(u64, u32)]) -> Self {
        let mut map = TempoMap { division, segments: vec![(0, 0, DEFAULT_TEMPO_US)] };
        for &(tick, us) in tempos {
            let start = map.micros_exact(tick);
            let last = map.segments.last_mut().expect("nonempty");
            if last.0 == tick {
                last.2 = us;
            } else {
                map.segments.push((tick, start, us));
            }
        }
        map
    }

    fn micros_exact(&self, tick: u64) -> u128 {
        match self.division {
            Division::Smpte { us_num, us_den } => tick as u128 * us_num as u128 / us_den as u128,
            Division::Ppq(ppq) => {
                let i = self.segments.partition_point(|s| s.0 <= tick) - 1;
                let (t0, us0, tempo) = self.segments[i];
                us0 + (tick - t0) as u128 * tempo as u128 / ppq as u128
            }
        }
    }

    fn micros(&self, tick: u64) -> Timestamp {
        Timestamp(self.micros_exact(tick) as u64)
    }
}

/// One event for [`write_smf`], in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmfEvent {
    NoteOn { tick: u64, pitch: u8, velocity: u8 },
    NoteOff { tick: u64, pitch: u8 },
    Tempo { tick: u64, us_per_quarter: u32 },
}

impl SmfEvent {
    fn tick(&self) -> u64 {
        match *self {
            SmfEvent::NoteOn { tick, .. } | SmfEvent::NoteOff { tick, .. } | SmfEvent::Tempo { tick, .. } => tick,
        }
    }
}

/// Options for [`write_smf`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOptions {
    pub ppq: u16,
    /// Omit repeated status bytes.
    pub running_status: bool,
    /// Encode note-offs as note-on with velocity 0.
    pub zero_velocity_offs: bool,
}

impl Default for WriteOptions {
    fn default() -> Self {
        WriteOptions { ppq: 480, running_status: false, zero_velocity_offs: false }
    }
}

fn push_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut stack = [0u8; 4];
    let mut n = 0;
    loop {
        stack[n] = (v & 0x7F) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(stack[i] | if i > 0 { 0x80 } else { 0 });
    }
}

/// Writes a single-track format-0 file on channel 1. Events are emitted in
/// tick order (stable).
pub fn write_smf(events: &[SmfEvent], opts: WriteOptions) -> Vec<u8> {
    let mut evs = events.to_vec();
    evs.sort_by_key(|e| e.tick());
    let mut trk = Vec::new();
    let mut last_tick = 0;
    let mut running: Option<u8> = None;
    for e in &evs {
        push_vlq(&mut trk, (e.tick() - last_tick) as u32);
        last_tick = e.tick();
        let (status, d1, d2) = match *e {
            SmfEvent::Tempo { us_per_quarter, .. } => {
                let b = us_per_quarter.to_be_bytes();
                trk.extend_from_slice(&[0xFF, 0x51, 0x03, b[1], b[2], b[3]]);
                running = None;
                continue;
            }
            SmfEvent::NoteOn { pitch, velocity, .. } => (0x90, pitch, velocity),
            SmfEvent::NoteOff { pitch, .. } if opts.zero_velocity_offs => (0x90, pitch, 0),
            SmfEvent::NoteOff { pitch, .. } => (0x80, pitch, 0x40),
        };
        if !(opts.running_status && running == Some(status)) {
            trk.push(status);
        }
        running = Some(status);
        trk.extend_from_slice(&[d1, d2]);
    }
    trk.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(trk.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&opts.ppq.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(trk.len() as u32).to_be_bytes());
    out.extend_from_slice(&trk);
    out
}

/// Writes `notes` at a fixed 1 µs-per-tick resolution (ppq equal to the
/// tempo), so every microsecond time round-trips exactly.
pub fn write_score(notes: &[ScoreNote]) -> Vec<u8> {
    // 480 ticks per quarter at 480 µs per quarter: one tick per microsecond
    let mut evs = vec![SmfEvent::Tempo { tick: 0, us_per_quarter: 480 }];
    for n in notes {
        evs.push(SmfEvent::NoteOn { tick: n.on.0, pitch: n.pitch, velocity: n.velocity });
        evs.push(SmfEvent::NoteOff { tick: n.off.0, pitch: n.pitch });
    }
    // offs first at equal ticks so retriggers stay paired
    evs.sort_by_key(|e| (e.tick(), !matches!(e, SmfEvent::NoteOff { .. } | SmfEvent::Tempo { .. })));
    write_smf(&evs, WriteOptions { ppq: 480, running_status: true, zero_velocity_offs: false })
}
