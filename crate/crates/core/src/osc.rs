//! OSC 1.0 encoding and decoding, plus the mapping from the `/amt/*` wire
//! schema to engine events.
//!
//! Wire schema:
//!
//! | address        | tags | arguments           |
//! |----------------|------|---------------------|
//! | `/amt/noteon`  | `ii` | pitch, velocity     |
//! | `/amt/noteoff` | `i`  | pitch               |
//! | `/amt/pedal`   | `i`  | controller-64 value |
//! | `/amt/marker`  | `s`  | label               |
//!
//! Everything is big-endian and 4-byte aligned. A datagram holds exactly one
//! packet; several messages travel together only inside a `#bundle`.

use thiserror::Error;

use crate::event::{EngineEvent, Marker, NoteEvent, PedalEvent, Source, Timestamp};

pub const ADDR_NOTE_ON: &str = "/amt/noteon";
pub const ADDR_NOTE_OFF: &str = "/amt/noteoff";
pub const ADDR_PEDAL: &str = "/amt/pedal";
pub const ADDR_MARKER: &str = "/amt/marker";

const BUNDLE_TAG: &[u8; 8] = b"#bundle\0";

#[derive(Debug, Clone, PartialEq)]
pub enum OscArg {
    Int(i32),
    Float(f32),
    Str(String),
    Blob(Vec<u8>),
}

impl OscArg {
    fn tag(&self) -> u8 {
        match self {
            OscArg::Int(_) => b'i',
            OscArg::Float(_) => b'f',
            OscArg::Str(_) => b's',
            OscArg::Blob(_) => b'b',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OscMessage {
    pub address: String,
    pub args: Vec<OscArg>,
}

impl OscMessage {
    pub fn new(address: impl Into<String>, args: Vec<OscArg>) -> Self {
        OscMessage { address: address.into(), args }
    }
}

/// 64-bit NTP fixed point: seconds since 1900 in the high word, fraction in
/// the low word. The value 1 means "immediately".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TimeTag(pub u64);

impl TimeTag {
    pub const IMMEDIATE: TimeTag = TimeTag(1);

    pub fn is_immediate(self) -> bool {
        self == TimeTag::IMMEDIATE
    }

    pub fn from_parts(seconds: u32, fraction: u32) -> Self {
        TimeTag(((seconds as u64) << 32) | fraction as u64)
    }

    /// Total microseconds represented, truncating the fraction.
    pub fn to_micros(self) -> u64 {
        let secs = self.0 >> 32;
        let frac = self.0 & 0xFFFF_FFFF;
        secs * 1_000_000 + ((frac * 1_000_000) >> 32)
    }

    pub fn from_micros(us: u64) -> Self {
        let secs = us / 1_000_000;
        let rem = us % 1_000_000;
        // round up so that to_micros(from_micros(x)) == x
        let frac = (rem << 32).div_ceil(1_000_000);
        TimeTag((secs << 32) | frac)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OscBundle {
    pub timetag: TimeTag,
    pub elements: Vec<OscPacket>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OscPacket {
    Message(OscMessage),
    Bundle(OscBundle),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OscError {
    #[error("malformed packet at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: &'static str },
    #[error("cannot encode: {0}")]
    Unencodable(String),
}

fn malformed(offset: usize, reason: &'static str) -> OscError {
    OscError::Malformed { offset, reason }
}

fn pad4(n: usize) -> usize {
    (n + 3) & !3
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(s.as_bytes());
    let padded = pad4(s.len() + 1);
    out.resize(out.len() + padded - s.len(), 0);
}

fn write_message(out: &mut Vec<u8>, m: &OscMessage) -> Result<(), OscError> {
    if !m.address.starts_with('/') {
        return Err(OscError::Unencodable(format!("address {:?} must begin with '/'", m.address)));
    }
    if m.address.contains('\0') {
        return Err(OscError::Unencodable("address contains NUL".into()));
    }
    write_str(out, &m.address);
    let mut tags = String::with_capacity(m.args.len() + 1);
    tags.push(',');
    for a in &m.args {
        tags.push(a.tag() as char);
    }
    write_str(out, &tags);
    for a in &m.args {
        match a {
            OscArg::Int(v) => out.extend_from_slice(&v.to_be_bytes()),
            OscArg::Float(v) => out.extend_from_slice(&v.to_be_bytes()),
            OscArg::Str(s) => {
                if s.contains('\0') {
                    return Err(OscError::Unencodable("string argument contains NUL".into()));
                }
                write_str(out, s);
            }
            OscArg::Blob(b) => {
                let len =
                    i32::try_from(b.len()).map_err(|_| OscError::Unencodable("blob larger than i32::MAX".into()))?;
                out.extend_from_slice(&len.to_be_bytes());
                out.extend_from_slice(b);
                out.resize(out.len() + pad4(b.len()) - b.len(), 0);
            }
        }
    }
    Ok(())
}

pub fn encode_message(m: &OscMessage) -> Result<Vec<u8>, OscError> {
    let mut out = Vec::with_capacity(32);
    write_message(&mut out, m)?;
    Ok(out)
}

pub fn encode_packet(p: &OscPacket) -> Result<Vec<u8>, OscError> {
    let mut out = Vec::with_capacity(64);
    write_packet(&mut out, p)?;
    Ok(out)
}

fn write_packet(out: &mut Vec<u8>, p: &OscPacket) -> Result<(), OscError> {
    match p {
        OscPacket::Message(m) => write_message(out, m),
        OscPacket::Bundle(b) => {
            out.extend_from_slice(BUNDLE_TAG);
            out.extend_from_slice(&b.timetag.0.to_be_bytes());
            for el in &b.elements {
                let len_at = out.len();
                out.extend_from_slice(&[0; 4]);
                write_packet(out, el)?;
                let size = (out.len() - len_at - 4) as u32;
                out[len_at..len_at + 4].copy_from_slice(&size.to_be_bytes());
            }
            Ok(())
        }
    }
}

/// Bounded cursor; every read is checked against the slice end.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Offset of `buf[0]` within the original datagram, for error reporting.
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], base: usize) -> Self {
        Reader { buf, pos: 0, base }
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, reason: &'static str) -> Result<&'a [u8], OscError> {
        if self.remaining() < n {
            return Err(malformed(self.offset(), reason));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, OscError> {
        let b = self.take(4, "truncated 32-bit argument")?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<&'a str, OscError> {
        let start = self.offset();
        let rest = &self.buf[self.pos..];
        let nul = rest.iter().position(|&c| c == 0).ok_or_else(|| malformed(start, "missing NUL terminator"))?;
        let padded = pad4(nul + 1);
        if padded > rest.len() {
            return Err(malformed(start, "string padding runs past end of packet"));
        }
        if rest[nul..padded].iter().any(|&c| c != 0) {
            return Err(malformed(start + nul, "non-NUL byte in string padding"));
        }
        let s = std::str::from_utf8(&rest[..nul]).map_err(|_| malformed(start, "string is not UTF-8"))?;
        self.pos += padded;
        Ok(s)
    }
}

pub fn decode_packet(bytes: &[u8]) -> Result<OscPacket, OscError> {
    decode_at(bytes, 0)
}

fn decode_at(bytes: &[u8], base: usize) -> Result<OscPacket, OscError> {
    if bytes.len() < 4 {
        return Err(malformed(base, "packet shorter than 4 bytes"));
    }
    if !bytes.len().is_multiple_of(4) {
        return Err(malformed(base + bytes.len(), "packet length is not a multiple of 4"));
    }
    if bytes.starts_with(BUNDLE_TAG) {
        decode_bundle(bytes, base).map(OscPacket::Bundle)
    } else if bytes[0] == b'/' {
        decode_message(bytes, base).map(OscPacket::Message)
    } else {
        Err(malformed(base, "packet is neither a message nor a bundle"))
    }
}

fn decode_message(bytes: &[u8], base: usize) -> Result<OscMessage, OscError> {
    let mut r = Reader::new(bytes, base);
    let address = r.string()?.to_owned();
    let tag_at = r.offset();
    let tags = r.string()?;
    let tags = tags.strip_prefix(',').ok_or_else(|| malformed(tag_at, "type tag string must begin with ','"))?;
    let mut args = Vec::with_capacity(tags.len());
    for tag in tags.bytes() {
        let arg = match tag {
            b'i' => OscArg::Int(r.u32()? as i32),
            b'f' => OscArg::Float(f32::from_bits(r.u32()?)),
            b's' => OscArg::Str(r.string()?.to_owned()),
            b'b' => {
                let at = r.offset();
                let len = r.u32()? as i32;
                if len < 0 {
                    return Err(malformed(at, "negative blob length"));
                }
                let len = len as usize;
                let data = r.take(len, "truncated blob")?.to_vec();
                r.take(pad4(len) - len, "truncated blob padding")?;
                OscArg::Blob(data)
            }
            _ => return Err(malformed(tag_at, "unsupported type tag")),
        };
        args.push(arg);
    }
    if r.remaining() != 0 {
        return Err(malformed(r.offset(), "trailing bytes after message (use a bundle)"));
    }
    Ok(OscMessage { address, args })
}

fn decode_bundle(bytes: &[u8], base: usize) -> Result<OscBundle, OscError> {
    let mut r = Reader::new(bytes, base);
    r.take(8, "truncated bundle header")?;
    let tt = r.take(8, "truncated bundle timetag")?;
    let timetag = TimeTag(u64::from_be_bytes(tt.try_into().expect("8 bytes")));
    let mut elements = Vec::new();
    while r.remaining() > 0 {
        let size_at = r.offset();
        let size = r.u32()? as i32;
        if size <= 0 || size % 4 != 0 {
            return Err(malformed(size_at, "bad bundle element size"));
        }
        let elem_base = r.offset();
        let elem = r.take(size as usize, "bundle element runs past end of packet")?;
        elements.push(decode_at(elem, elem_base)?);
    }
    Ok(OscBundle { timetag, elements })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("unknown address {0}")]
    UnknownAddress(String),
    #[error("{address}: expected arguments ({expected}), got {got}")]
    Arity { address: String, expected: &'static str, got: String },
    #[error("{address}: {field} {value} out of range")]
    OutOfRange { address: String, field: &'static str, value: i64 },
}

fn describe_args(args: &[OscArg]) -> String {
    args.iter().map(|a| a.tag() as char).collect()
}

fn int_in(address: &str, field: &'static str, v: i32, lo: i32, hi: i32) -> Result<u8, SchemaError> {
    if (lo..=hi).contains(&v) {
        Ok(v as u8)
    } else {
        Err(SchemaError::OutOfRange { address: address.to_owned(), field, value: v as i64 })
    }
}

/// Maps one wire-schema message to an engine event stamped `t`.
///
/// A note-on with velocity 0 is read as a note-off, as in MIDI.
pub fn message_to_event(m: &OscMessage, t: Timestamp) -> Result<EngineEvent, SchemaError> {
    let addr = m.address.as_str();
    let arity = |expected| SchemaError::Arity { address: addr.to_owned(), expected, got: describe_args(&m.args) };
    match addr {
        ADDR_NOTE_ON => match m.args.as_slice() {
            [OscArg::Int(p), OscArg::Int(v)] => {
                let pitch = int_in(addr, "pitch", *p, 0, 127)?;
                let vel = int_in(addr, "velocity", *v, 0, 127)?;
                let ev = if vel == 0 { NoteEvent::off(pitch, t) } else { NoteEvent::on(pitch, vel, t) };
                Ok(EngineEvent::Note(ev))
            }
            _ => Err(arity("ii")),
        },
        ADDR_NOTE_OFF => match m.args.as_slice() {
            [OscArg::Int(p)] => Ok(EngineEvent::Note(NoteEvent::off(int_in(addr, "pitch", *p, 0, 127)?, t))),
            _ => Err(arity("i")),
        },
        ADDR_PEDAL => match m.args.as_slice() {
            [OscArg::Int(v)] => Ok(PedalEvent::new(int_in(addr, "value", *v, 0, 127)?, t).into()),
            _ => Err(arity("i")),
        },
        ADDR_MARKER => match m.args.as_slice() {
            [OscArg::Str(s)] => Ok(EngineEvent::Marker(Marker { label: s.clone(), t })),
            _ => Err(arity("s")),
        },
        _ => Err(SchemaError::UnknownAddress(addr.to_owned())),
    }
}

/// Inverse of [`message_to_event`]; the event time is not carried.
pub fn event_to_message(e: &EngineEvent) -> OscMessage {
    match e {
        EngineEvent::Note(n) if n.is_on() => {
            OscMessage::new(ADDR_NOTE_ON, vec![OscArg::Int(n.pitch as i32), OscArg::Int(n.velocity as i32)])
        }
        EngineEvent::Note(n) => OscMessage::new(ADDR_NOTE_OFF, vec![OscArg::Int(n.pitch as i32)]),
        EngineEvent::Pedal(p) => OscMessage::new(ADDR_PEDAL, vec![OscArg::Int(p.value as i32)]),
        EngineEvent::Marker(m) => OscMessage::new(ADDR_MARKER, vec![OscArg::Str(m.label.clone())]),
    }
}

/// Anchors bundle timetags to the engine epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeTagBase {
    /// NTP time corresponding to engine time zero.
    pub epoch: TimeTag,
}

impl TimeTagBase {
    pub fn new(epoch: TimeTag) -> Self {
        TimeTagBase { epoch }
    }

    /// Engine time of a timetag; instants before the epoch clamp to zero.
    pub fn to_engine(&self, tag: TimeTag) -> Timestamp {
        Timestamp(tag.to_micros().saturating_sub(self.epoch.to_micros()))
    }

    pub fn to_timetag(&self, t: Timestamp) -> TimeTag {
        TimeTag::from_micros(self.epoch.to_micros() + t.0)
    }
}

/// Flattens a decoded packet into events. Immediate messages are stamped
/// `arrival`; messages in a timed bundle get the bundle time.
pub fn packet_to_events(
    packet: &OscPacket,
    arrival: Timestamp,
    base: &TimeTagBase,
    source: Source,
) -> Vec<Result<EngineEvent, SchemaError>> {
    let mut out = Vec::new();
    collect(packet, arrival, base, source, &mut out);
    out
}

fn collect(
    packet: &OscPacket,
    t: Timestamp,
    base: &TimeTagBase,
    source: Source,
    out: &mut Vec<Result<EngineEvent, SchemaError>>,
) {
    match packet {
        OscPacket::Message(m) => out.push(message_to_event(m, t).map(|e| match e {
            EngineEvent::Note(n) => EngineEvent::Note(n.with_source(source)),
            other => other,
        })),
        OscPacket::Bundle(b) => {
            let bt = if b.timetag.is_immediate() { t } else { base.to_engine(b.timetag) };
            for el in &b.elements {
                collect(el, bt, base, source, out);
            }
        }
    }
}
