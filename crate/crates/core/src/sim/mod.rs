//! Transcription-channel simulator.
//!
//! Plays a reference score through a stochastic model of an online
//! transcriber: constant latency plus truncated-normal jitter, whole-note
//! drops, additive velocity noise and occasional pitch substitution. The
//! output is the stream of OSC messages the transcriber would have sent.

pub mod smf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{ms_to_us, EngineEvent, NoteEvent, Source, Timestamp};
use crate::osc::{event_to_message, OscMessage};
pub use smf::{parse_smf, write_score, ReferenceScore, ScoreNote, SmfError, UnbalancedScore};

/// Semitone offsets used for pitch substitution errors.
const PITCH_ERRORS: [i16; 4] = [-12, -1, 1, 12];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub latency_mean_ms: f64,
    /// Standard deviation of the jitter, truncated at three sigma.
    pub latency_jitter_ms: f64,
    /// Probability that a note is never transcribed.
    pub drop_prob: f64,
    /// Standard deviation of integer noise added to velocity.
    pub velocity_noise: f64,
    /// Probability of a ±1 or ±12 semitone substitution.
    pub pitch_error_prob: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            latency_mean_ms: 350.0,
            latency_jitter_ms: 30.0,
            drop_prob: 0.05,
            velocity_noise: 4.0,
            pitch_error_prob: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Latency only, no randomness.
    pub fn ideal(latency_ms: f64) -> Self {
        SimConfig {
            latency_mean_ms: latency_ms,
            latency_jitter_ms: 0.0,
            drop_prob: 0.0,
            velocity_noise: 0.0,
            pitch_error_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !prob(self.drop_prob) {
            return Err(SimError::Config("drop_prob must be in [0, 1]"));
        }
        if !prob(self.pitch_error_prob) {
            return Err(SimError::Config("pitch_error_prob must be in [0, 1]"));
        }
        if !nonneg(self.latency_mean_ms) {
            return Err(SimError::Config("latency_mean_ms must be non-negative"));
        }
        if !nonneg(self.latency_jitter_ms) {
            return Err(SimError::Config("latency_jitter_ms must be non-negative"));
        }
        if !nonneg(self.velocity_noise) {
            return Err(SimError::Config("velocity_noise must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Unbalanced(#[from] UnbalancedScore),
}

/// An OSC message due at engine time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedMessage {
    pub t: Timestamp,
    pub msg: OscMessage,
}

/// Draws from N(0, sigma) truncated to [-3 sigma, 3 sigma] and to `>= floor`.
fn truncated_normal(rng: &mut ChaCha8Rng, normal: &Normal<f64>, sigma: f64, floor: f64) -> f64 {
    let lo = (-3.0 * sigma).max(floor);
    let hi = 3.0 * sigma;
    if lo >= hi {
        return lo;
    }
    loop {
        let x = normal.sample(rng);
        if x >= lo && x <= hi {
            return x;
        }
    }
}

/// Transcribed notes as engine events, in event order.
pub fn simulate_events(score: &ReferenceScore, cfg: &SimConfig) -> Result<Vec<EngineEvent>, SimError> {
    cfg.validate()?;
    let notes = score.notes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = Normal::new(0.0, cfg.latency_jitter_ms).expect("validated sigma");
    let vel_noise = Normal::new(0.0, cfg.velocity_noise).expect("validated sigma");
    let mut out: Vec<EngineEvent> = Vec::with_capacity(notes.len() * 2);
    for n in &notes {
        if cfg.drop_prob > 0.0 && rng.random::<f64>() < cfg.drop_prob {
            continue;
        }
        let mut latency_ms = cfg.latency_mean_ms;
        if cfg.latency_jitter_ms > 0.0 {
            latency_ms += truncated_normal(&mut rng, &jitter, cfg.latency_jitter_ms, -cfg.latency_mean_ms);
        }
        let latency = ms_to_us(latency_ms);
        let mut velocity = n.velocity;
        if cfg.velocity_noise > 0.0 {
            let v = n.velocity as f64 + vel_noise.sample(&mut rng).round();
            velocity = v.clamp(1.0, 127.0) as u8;
        }
        let mut pitch = n.pitch;
        if cfg.pitch_error_prob > 0.0 && rng.random::<f64>() < cfg.pitch_error_prob {
            let d = PITCH_ERRORS[rng.random_range(0..PITCH_ERRORS.len())];
            let mut p = n.pitch as i16 + d;
            if !(0..=127).contains(&p) {
                p = n.pitch as i16 - d;
            }
            pitch = p as u8;
        }
        out.push(NoteEvent::on(pitch, velocity, n.on + latency).with_source(Source::Simulator).into());
        out.push(NoteEvent::off(pitch, n.off + latency).with_source(Source::Simulator).into());
    }
    crate::event::sort_events(&mut out);
    Ok(out)
}

/// The simulated transcriber's OSC output.
pub fn simulate(score: &ReferenceScore, cfg: &SimConfig) -> Result<Vec<TimedMessage>, SimError> {
    Ok(simulate_events(score, cfg)?.iter().map(|e| TimedMessage { t: e.t(), msg: event_to_message(e) }).collect())
}
