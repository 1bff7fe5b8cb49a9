//! Core of the duet engine: streamed transcription events in, transformed
//! piano output out.
//!
//! Data flows listener → [`pipeline::EffectChain`] → [`scheduler::Scheduler`]
//! → sink, with [`session`] recording every step. [`engine::Engine`] wires
//! the pieces together for both real-time and virtual-clock runs.

pub mod cue;
pub mod engine;
pub mod event;
pub mod metrics;
pub mod net;
pub mod osc;
pub mod pipeline;
pub mod scheduler;
pub mod session;
pub mod sim;

pub use cue::{ControlCommand, CueSheet};
pub use engine::Engine;
pub use event::{event_order, validate_event, EngineEvent, Marker, NoteEvent, NoteKind, PedalEvent, Source, Timestamp};
pub use metrics::onset_f1;
pub use pipeline::{ChainParams, EffectChain};
pub use scheduler::{Scheduler, SinkSpec};
pub use sim::SimConfig;
