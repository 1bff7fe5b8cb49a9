use serde::{Deserialize, Serialize};

use crate::event::{EngineEvent, NoteEvent, PedalEvent, Timestamp};

/// Velocity map for note-ons: `clamp(round(v * scale + offset), 1, 127)`.
///
/// The floor is 1 because a velocity-0 note-on means note-off on the wire.
pub fn apply_velocity(e: NoteEvent, scale: f64, offset: i32) -> NoteEvent {
    if !e.is_on() {
        return e;
    }
    let v = (e.velocity as f64 * scale + offset as f64).round();
    let v = if v.is_nan() { 1.0 } else { v.clamp(1.0, 127.0) };
    NoteEvent { velocity: v as u8, ..e }
}

pub fn apply_delay(e: EngineEvent, delay_us: u64) -> EngineEvent {
    let t = e.t() + delay_us;
    e.with_t(t)
}

/// Time-scales a segment around `anchor`: `t' = anchor + (t - anchor) / factor`,
/// rounded to the nearest microsecond. A factor of 2 plays twice as fast.
pub fn apply_speed(segment: &[EngineEvent], factor: f64, anchor: Timestamp) -> Vec<EngineEvent> {
    segment.iter().map(|e| e.clone().with_t(scale_time(e.t(), factor, anchor))).collect()
}

pub(crate) fn scale_time(t: Timestamp, factor: f64, anchor: Timestamp) -> Timestamp {
    let rel = t.saturating_sub(anchor) as f64;
    anchor + (rel / factor).round() as u64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PedalMode {
    #[default]
    Pass,
    ForceOn,
    ForceOff,
    Suppress,
}

impl PedalMode {
    pub fn parse(s: &str) -> Option<PedalMode> {
        match s {
            "pass" => Some(PedalMode::Pass),
            "force_on" => Some(PedalMode::ForceOn),
            "force_off" => Some(PedalMode::ForceOff),
            "suppress" => Some(PedalMode::Suppress),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PedalMode::Pass => "pass",
            PedalMode::ForceOn => "force_on",
            PedalMode::ForceOff => "force_off",
            PedalMode::Suppress => "suppress",
        }
    }
}

pub fn apply_pedal_mode(e: PedalEvent, mode: PedalMode) -> Option<PedalEvent> {
    match mode {
        PedalMode::Pass => Some(e),
        PedalMode::ForceOn => Some(PedalEvent { value: 127, ..e }),
        PedalMode::ForceOff => Some(PedalEvent { value: 0, ..e }),
        PedalMode::Suppress => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::NoteKind;
    use proptest::prelude::*;

    #[test]
    fn velocity_examples() {
        let n = NoteEvent::on(60, 100, Timestamp(5));
        assert_eq!(apply_velocity(n, 1.0, 0).velocity, 100);
        assert_eq!(apply_velocity(n, 1.5, 0).velocity, 127);
        assert_eq!(apply_velocity(NoteEvent::on(60, 10, Timestamp(0)), 0.0, 0).velocity, 1);
        assert_eq!(apply_velocity(n, 0.5, -10).velocity, 40);
        let off = NoteEvent::off(60, Timestamp(5));
        assert_eq!(apply_velocity(off, 3.0, 50), off);
        assert_eq!(apply_velocity(n, 1.5, 0).t, Timestamp(5));
    }

    #[test]
    fn delay_examples() {
        let e: EngineEvent = NoteEvent::on(60, 100, Timestamp::from_millis(1000)).into();
        assert_eq!(apply_delay(e.clone(), 0), e);
        assert_eq!(apply_delay(e, 1_000_000).t(), Timestamp::from_millis(2000));
    }

    #[test]
    fn speed_examples() {
        let anchor = Timestamp::from_millis(10_000);
        let seg: Vec<EngineEvent> =
            [0u64, 500, 1000].iter().map(|ms| NoteEvent::on(60, 90, anchor + ms * 1000).into()).collect();
        assert_eq!(apply_speed(&seg, 1.0, anchor), seg);
        let fast: Vec<u64> = apply_speed(&seg, 2.0, anchor).iter().map(|e| e.t().0 - anchor.0).collect();
        assert_eq!(fast, vec![0, 250_000, 500_000]);
    }

    #[test]
    fn pedal_examples() {
        let p = PedalEvent::new(40, Timestamp(0));
        assert_eq!(apply_pedal_mode(p, PedalMode::Pass).unwrap().value, 40);
        assert_eq!(apply_pedal_mode(p, PedalMode::ForceOn).unwrap().value, 127);
        assert_eq!(apply_pedal_mode(p, PedalMode::ForceOff).unwrap().value, 0);
        assert_eq!(apply_pedal_mode(PedalEvent::new(90, Timestamp(0)), PedalMode::Suppress), None);
    }

    fn stream() -> impl Strategy<Value = Vec<EngineEvent>> {
        prop::collection::vec((0u64..2_000_000, 0u8..128, 1u8..128), 1..40).prop_map(|v| {
            let mut t = 0;
            v.into_iter()
                .map(|(dt, p, vel)| {
                    t += dt;
                    NoteEvent::on(p, vel, Timestamp(t)).into()
                })
                .collect()
        })
    }

    fn iois(s: &[EngineEvent]) -> Vec<i64> {
        s.windows(2).map(|w| w[1].t() - w[0].t()).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn velocity_always_in_range(v in 1u8..128, scale in 0.0f64..=4.0, offset in any::<i32>()) {
            let out = apply_velocity(NoteEvent::on(60, v, Timestamp(0)), scale, offset);
            prop_assert!((1..=127).contains(&out.velocity));
            prop_assert_eq!(out.kind, NoteKind::On);
        }

        #[test]
        fn delay_preserves_iois(s in stream(), delay in 0u64..=60_000_000) {
            let out: Vec<_> = s.iter().cloned().map(|e| apply_delay(e, delay)).collect();
            prop_assert_eq!(iois(&s), iois(&out));
            prop_assert_eq!(out[0].t().0, s[0].t().0 + delay);
        }

        #[test]
        fn speed_scales_iois(s in stream(), factor in 0.25f64..=4.0) {
            let anchor = s[0].t();
            let out = apply_speed(&s, factor, anchor);
            // each event is within 0.5 us of its ideal time
            for (a, b) in s.iter().zip(&out) {
                let ideal = anchor.0 as f64 + (a.t().0 - anchor.0) as f64 / factor;
                prop_assert!((b.t().0 as f64 - ideal).abs() <= 0.5 + 1e-6);
            }
            for (i, o) in iois(&s).iter().zip(iois(&out)) {
                prop_assert!((o as f64 - *i as f64 / factor).abs() <= 1.0 + 1e-6);
            }
        }

        #[test]
        fn half_speed_doubles_iois(s in stream()) {
            let out = apply_speed(&s, 0.5, s[0].t());
            let doubled: Vec<i64> = iois(&s).iter().map(|i| i * 2).collect();
            prop_assert_eq!(iois(&out), doubled);
        }
    }
}
