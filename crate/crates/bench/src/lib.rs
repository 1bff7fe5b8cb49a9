//! Fixtures shared by the benchmarks under benches/.

use duet_core::sim::{ReferenceScore, ScoreNote};
use duet_core::{EngineEvent, Timestamp};

/// `n` overlapping notes, one every 20 ms, cycling over four octaves.
pub fn notes(n: u64) -> Vec<ScoreNote> {
    (0..n)
        .map(|i| {
            let on = Timestamp::from_millis(i * 20);
            ScoreNote { pitch: 36 + (i * 7 % 48) as u8, velocity: 40 + (i % 80) as u8, on, off: on + 150_000 }
        })
        .collect()
}

/// The notes of [`notes`] as sorted engine events.
pub fn stream(n: u64) -> Vec<EngineEvent> {
    ReferenceScore::from_notes(&notes(n)).events.into_iter().map(EngineEvent::Note).collect()
}
