use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use duet_bench::{notes, stream};
use duet_core::osc::{decode_packet, encode_message, event_to_message};
use duet_core::pipeline::{LoopParams, VelocityParams};
use duet_core::scheduler::{NullSink, VirtualClock};
use duet_core::sim::{simulate_events, ReferenceScore};
use duet_core::{onset_f1, ChainParams, EffectChain, Scheduler, SimConfig, Timestamp};

fn osc(c: &mut Criterion) {
    let msgs: Vec<_> = stream(500).iter().map(event_to_message).collect();
    let packets: Vec<Vec<u8>> = msgs.iter().map(|m| encode_message(m).unwrap()).collect();
    let mut g = c.benchmark_group("osc");
    g.throughput(Throughput::Elements(msgs.len() as u64));
    g.bench_function("encode", |b| {
        b.iter(|| msgs.iter().map(|m| encode_message(black_box(m)).unwrap().len()).sum::<usize>())
    });
    g.bench_function("decode", |b| b.iter(|| packets.iter().filter(|p| decode_packet(black_box(p)).is_ok()).count()));
    g.finish();
}

fn chain(c: &mut Criterion) {
    let events = stream(2000);
    let params = ChainParams {
        velocity: VelocityParams { scale: 0.8, offset: 5 },
        delay_ms: 250.0,
        looping: LoopParams { min_period_ms: 2000.0 },
        ..ChainParams::default()
    };
    let mut g = c.benchmark_group("chain");
    g.throughput(Throughput::Elements(events.len() as u64));
    g.bench_function("process", |b| {
        b.iter_batched(
            || EffectChain::new(params).unwrap(),
            |mut chain| events.iter().map(|e| chain.process(e.clone()).len()).sum::<usize>(),
            BatchSize::SmallInput,
        )
    });
    g.bench_function("loop_pull_60s", |b| {
        let mut seeded = EffectChain::new(params).unwrap();
        seeded.loop_capture_start(Timestamp::ZERO).unwrap();
        for e in events.iter().take(200) {
            seeded.process(e.clone());
        }
        seeded.loop_capture_stop(Timestamp::from_millis(2000)).unwrap();
        b.iter_batched(
            || seeded.clone(),
            |mut chain| {
                let mut n = 0;
                for ms in (0..60_000).step_by(10) {
                    n += chain.pull_loop(Timestamp::from_millis(ms)).len();
                }
                n
            },
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

fn scheduler(c: &mut Criterion) {
    let events = stream(5000);
    let end = events.last().unwrap().t() + 1;
    let mut g = c.benchmark_group("scheduler");
    g.throughput(Throughput::Elements(events.len() as u64));
    g.bench_function("schedule_and_run", |b| {
        b.iter_batched(
            || Scheduler::new(Box::new(VirtualClock::new()), Box::new(NullSink)),
            |mut s| {
                for e in &events {
                    s.schedule(e.clone()).unwrap();
                }
                s.run_until(end).unwrap();
                s.stats().emitted
            },
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let score = ReferenceScore::from_notes(&notes(2000));
    let cfg = SimConfig { seed: 3, ..SimConfig::default() };
    let transcribed: Vec<_> = simulate_events(&score, &cfg)
        .unwrap()
        .iter()
        .filter_map(|e| e.as_note().filter(|n| n.is_on()).map(|n| (Timestamp(n.t.0 - 350_000), n.pitch)))
        .collect();
    let reference = score.onsets();
    c.bench_function("onset_f1_2000", |b| b.iter(|| onset_f1(black_box(&reference), black_box(&transcribed), 50.0).f1));
    c.bench_function("simulate_2000", |b| b.iter(|| simulate_events(black_box(&score), &cfg).unwrap().len()));
}

criterion_group!(benches, osc, chain, scheduler, metrics);
criterion_main!(benches);
