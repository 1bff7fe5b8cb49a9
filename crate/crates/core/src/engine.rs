//! The engine: effect chain, cue sheet, scheduler and recorder behind one
//! owner.
//!
//! Inputs, commands and clock advances are applied strictly one after
//! another, so a command always lands between two pipeline events and every
//! emitted event was produced under a fully applied parameter set. Virtual
//! runs and replays drive the engine through the same calls, which is what
//! makes a replay reproduce the original out records.

use std::io;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use crate::cue::{apply_command, CommandError, ControlCommand, CueSheet, MonitorFrame, Reply};
use crate::event::{validate_event, EngineEvent, Timestamp};
use crate::pipeline::{ChainParams, EffectChain, ParamError};
use crate::scheduler::{Clock, ClockKind, SchedError, Scheduler, Sink};
use crate::session::{Direction, LoggedCommand, Record, Recorder, SessionLog, SessionSetup};

/// How far the virtual drain jumps when only the looper has work left.
const DRAIN_STEP_US: u64 = 100_000;

pub type Monitor = Box<dyn FnMut(MonitorFrame) + Send>;

/// A message for a live engine thread.
pub enum Input {
    Event(EngineEvent),
    Command { id: Value, cmd: ControlCommand, reply: Option<Sender<Reply>> },
    Shutdown,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub inputs: u64,
    pub rejected_inputs: u64,
    pub commands: u64,
    pub overload_drops: u64,
}

pub struct Engine {
    chain: EffectChain,
    sheet: CueSheet,
    sched: Scheduler,
    recorder: Recorder,
    monitor: Option<Monitor>,
    tick_us: u64,
    stats: EngineStats,
    finished: bool,
}

impl Engine {
    pub fn new(
        setup: &SessionSetup,
        clock: Box<dyn Clock>,
        sink: Box<dyn Sink>,
        recorder: Recorder,
    ) -> Result<Self, ParamError> {
        let chain = EffectChain::new(setup.cues.current().params)?;
        Ok(Engine {
            chain,
            sheet: setup.cues.clone(),
            sched: Scheduler::with_capacity(clock, sink, setup.queue_capacity),
            recorder,
            monitor: None,
            tick_us: setup.tick_us.max(1),
            stats: EngineStats::default(),
            finished: false,
        })
    }

    pub fn set_monitor(&mut self, m: Monitor) {
        self.monitor = Some(m);
    }

    pub fn now(&self) -> Timestamp {
        self.sched.now()
    }

    pub fn params(&self) -> &ChainParams {
        self.chain.params()
    }

    pub fn chain(&self) -> &EffectChain {
        &self.chain
    }

    pub fn sheet(&self) -> &CueSheet {
        &self.sheet
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.sched
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    pub fn recorder(&self) -> &Recorder {
        &self.recorder
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn schedule_all(&mut self, events: Vec<EngineEvent>) {
        for e in events {
            if let Err(SchedError::Overload(cap)) = self.sched.schedule(e) {
                self.stats.overload_drops += 1;
                tracing::warn!(capacity = cap, "scheduler queue full, event dropped");
            }
        }
        self.collect_emitted();
    }

    fn collect_emitted(&mut self) {
        for em in self.sched.take_emitted() {
            self.recorder.record_out(&em);
            if let Some(m) = &mut self.monitor {
                m(MonitorFrame { t: em.event.t(), direction: Direction::Out, event: em.event });
            }
        }
    }

    /// Virtual clock: schedules loop copies up to `t` and emits everything
    /// due, each at its exact deadline.
    pub fn advance_to(&mut self, t: Timestamp) -> Result<(), SchedError> {
        if t < self.now() {
            return Ok(());
        }
        let copies = self.chain.pull_loop(t + 1);
        self.schedule_all(copies);
        self.sched.run_until(t)?;
        self.collect_emitted();
        Ok(())
    }

    /// Real clock: schedules loop copies one tick ahead and emits what is due.
    pub fn tick(&mut self) {
        let horizon = self.now() + self.tick_us + 1;
        let copies = self.chain.pull_loop(horizon);
        self.schedule_all(copies);
        self.sched.poll();
        self.collect_emitted();
    }

    /// Runs one transcribed event through the chain. `e.t` is its arrival time.
    pub fn input(&mut self, e: EngineEvent) {
        if self.finished {
            return;
        }
        if let Err(v) = validate_event(&e) {
            self.stats.rejected_inputs += 1;
            tracing::warn!(%v, "input rejected");
            return;
        }
        self.stats.inputs += 1;
        self.recorder.record_in(e.t(), &e);
        if let Some(m) = &mut self.monitor {
            m(MonitorFrame { t: e.t(), direction: Direction::In, event: e.clone() });
        }
        let out = self.chain.process(e);
        self.schedule_all(out);
    }

    /// Applies an operator command at the current time.
    pub fn command(&mut self, cmd: &ControlCommand) -> Result<Value, CommandError> {
        let now = self.now();
        let sounding = self.sched.active().sounding();
        let res = apply_command(cmd, &mut self.chain, &mut self.sheet, now, &sounding);
        self.stats.commands += 1;
        let logged = LoggedCommand::Control(cmd.clone());
        match res {
            Ok(outcome) => {
                self.recorder.record_command(now, logged, true, outcome.detail.clone());
                tracing::info!(cmd = cmd.name(), detail = %outcome.detail, "command applied");
                if outcome.cancel_pending {
                    self.sched.cancel_all();
                }
                self.schedule_all(outcome.emit);
                Ok(outcome.detail)
            }
            Err(e) => {
                self.recorder.record_command(now, logged, false, Value::String(e.to_string()));
                tracing::info!(cmd = cmd.name(), error = %e, "command rejected");
                Err(e)
            }
        }
    }

    /// Virtual clock: advances until nothing is queued and the looper is
    /// done, or until `cap`.
    pub fn drain(&mut self, cap: Timestamp) -> Result<(), SchedError> {
        loop {
            let next = match (self.sched.next_deadline(), self.chain.loop_active()) {
                (Some(d), _) => d,
                (None, true) => self.now() + DRAIN_STEP_US,
                (None, false) => return Ok(()),
            };
            if next > cap {
                return self.advance_to(cap);
            }
            self.advance_to(next)?;
        }
    }

    /// Releases every sounding note and the pedal, drops the queue and stops
    /// accepting input. `drained` is logged so a replay can repeat the drain.
    pub fn shutdown(&mut self, drained: bool) {
        if self.finished {
            return;
        }
        let now = self.now();
        let sounding = self.sched.active().sounding();
        self.recorder.record_command(now, LoggedCommand::Shutdown, true, json!({ "drained": drained }));
        let offs = self.chain.stop_all(&sounding, now);
        self.sched.cancel_all();
        self.schedule_all(offs);
        self.finished = true;
        if let Err(e) = self.sched.flush_sink() {
            tracing::warn!(error = %e, "sink flush failed at shutdown");
        }
    }

    /// Flushes the sink and the session log.
    pub fn close(mut self) -> io::Result<()> {
        self.sched.flush_sink()?;
        let rec = std::mem::replace(&mut self.recorder, Recorder::disabled());
        rec.close()
    }
}

/// One step of a scripted virtual run.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Event(EngineEvent),
    Command(ControlCommand),
    /// Shut down at this time; with `drain`, first let queued work finish.
    Shutdown {
        drain: bool,
    },
}

/// Drives a virtual-clock engine through `steps` (sorted by time).
pub fn run_steps(engine: &mut Engine, steps: &[(Timestamp, Step)]) -> Result<(), SchedError> {
    for (t, step) in steps {
        match step {
            Step::Event(e) => {
                engine.advance_to(*t)?;
                engine.input(e.clone());
            }
            Step::Command(c) => {
                engine.advance_to(*t)?;
                let _ = engine.command(c);
            }
            Step::Shutdown { drain: true } => {
                engine.drain(*t)?;
                engine.shutdown(true);
            }
            Step::Shutdown { drain: false } => {
                engine.advance_to(*t)?;
                engine.shutdown(false);
            }
        }
        if engine.is_finished() {
            break;
        }
    }
    Ok(())
}

/// A simulated performance: transcribed events and timed operator
/// commands, then a drain capped at `until` and a shutdown.
pub fn run_virtual(
    engine: &mut Engine,
    events: &[EngineEvent],
    commands: &[(Timestamp, ControlCommand)],
    until: Timestamp,
) -> Result<(), SchedError> {
    let mut steps: Vec<(Timestamp, u8, Step)> = events.iter().map(|e| (e.t(), 0, Step::Event(e.clone()))).collect();
    steps.extend(commands.iter().map(|(t, c)| (*t, 1, Step::Command(c.clone()))));
    // events before commands at equal times; stable otherwise
    steps.sort_by_key(|(t, rank, _)| (*t, *rank));
    let steps: Vec<(Timestamp, Step)> =
        steps.into_iter().filter(|(t, _, _)| *t <= until).map(|(t, _, s)| (t, s)).collect();
    run_steps(engine, &steps)?;
    if !engine.is_finished() {
        engine.drain(until)?;
        engine.shutdown(true);
    }
    Ok(())
}

/// The in and command records of a log as replay steps.
pub fn replay_steps(log: &SessionLog) -> Vec<(Timestamp, Step)> {
    log.records
        .iter()
        .filter_map(|r| match r {
            Record::In { t, payload, .. } => Some((*t, Step::Event(payload.clone()))),
            Record::Command { t, payload: LoggedCommand::Control(c), .. } => Some((*t, Step::Command(c.clone()))),
            Record::Command { t, payload: LoggedCommand::Shutdown, detail, .. } => {
                let drain = detail.get("drained").and_then(Value::as_bool).unwrap_or(false);
                Some((*t, Step::Shutdown { drain }))
            }
            Record::Out { .. } => None,
        })
        .collect()
}

/// Live loop: handles inputs as they arrive and ticks the scheduler every
/// `tick_us`. Returns when told to shut down or when every sender is gone.
/// A panic anywhere in the loop still ends with the panic stop.
pub fn run_live(engine: &mut Engine, rx: &Receiver<Input>) -> Result<(), String> {
    assert_eq!(engine.sched.clock_kind(), ClockKind::RealMonotonic, "live loop needs the real clock");
    let tick = Duration::from_micros(engine.tick_us);
    let res = catch_unwind(AssertUnwindSafe(|| {
        let mut next_tick = Instant::now() + tick;
        loop {
            let wait = next_tick.saturating_duration_since(Instant::now());
            match rx.recv_timeout(wait) {
                Ok(Input::Event(e)) => engine.input(e),
                Ok(Input::Command { id, cmd, reply }) => {
                    let r = match engine.command(&cmd) {
                        Ok(detail) => Reply { id, ok: true, detail },
                        Err(e) => Reply::error(id, e),
                    };
                    if let Some(tx) = reply {
                        let _ = tx.send(r);
                    }
                }
                Ok(Input::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
                Err(RecvTimeoutError::Timeout) => {}
            }
            if Instant::now() >= next_tick {
                engine.tick();
                next_tick += tick;
                if next_tick < Instant::now() {
                    next_tick = Instant::now() + tick;
                }
            }
        }
    }));
    // shutdown runs on the panic path too: no stuck notes on stage
    let outcome = match res {
        Ok(()) => Ok(()),
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            Err(msg)
        }
    };
    engine.tick();
    engine.shutdown(false);
    outcome
}
