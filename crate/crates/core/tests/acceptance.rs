//! Acceptance gate: each check prints one PASS/FAIL line and the process
//! fails if any check fails.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use ensemble_core::generator::{
    apply_temperature, distinct_pitch_classes_per_bar, generate_continuation, GeneratorModel,
    LatencyModel, SessionRng, Temperature,
};
use ensemble_core::music::{chord_at, NoteSequence, TempoMap, TransportClock, TICKS_PER_BAR};
use ensemble_core::performer::NoteKind;
use ensemble_core::protocol::{
    decode_text, encode_text, estimate_offset, handshake_step, ClockSample, HandshakeInput,
    HandshakeState, Message,
};
use ensemble_core::sim::{
    self, default_progression, LinkEventKind, Scenario, SimConfig, SimReport,
};
use ensemble_core::stagger::reinsertion_tick;
use ensemble_core::sweep::{bounded_cases, run_batch, Execution};
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn violations(r: &SimReport) -> String {
    r.violations
        .iter()
        .take(5)
        .map(|v| format!("{}@{}: {}", v.name, v.tick, v.detail))
        .collect::<Vec<_>>()
        .join("; ")
}

fn nominal_four() -> Check {
    let mut c = SimConfig::new(4, 120, 120.0, 2000.0, 42);
    c.network.latency_ms = 20.0;
    c.network.jitter_ms = 5.0;
    let t = Instant::now();
    let r = sim::run(c).map_err(|e| e.to_string())?;
    let wall = t.elapsed().as_secs_f64();
    ensure(r.violations.is_empty(), || violations(&r))?;
    let s = &r.summary;
    ensure(s.stuck_notes == 0 && s.overlapping_freezes == 0, || {
        format!("{s:?}")
    })?;
    ensure(s.max_desync_ms <= 30.0, || {
        format!("desync {}", s.max_desync_ms)
    })?;
    ensure(wall < 10.0, || format!("wall {wall:.2} s"))?;
    ensure(s.freezes >= 4 * 6, || format!("only {} freezes", s.freezes))?;
    Ok(format!(
        "{} note_ons, {} freezes, max desync {:.3} ms, wall {:.2} s",
        s.note_ons, s.freezes, s.max_desync_ms, wall
    ))
}

/// Overlap recomputed from the raw freeze spans.
fn overlaps(r: &SimReport) -> usize {
    let f = &r.freezes;
    let mut count = 0;
    for i in 0..f.len() {
        for j in i + 1..f.len() {
            let (a, b) = (&f[i], &f[j]);
            if a.record.performer_id != b.record.performer_id
                && a.start_us < b.end_us
                && b.start_us < a.end_us
            {
                count += 1;
            }
        }
    }
    count
}

fn stagger_sweep() -> Check {
    let cases = bounded_cases(
        &[2, 3, 4, 6, 8],
        &[60.0, 120.0, 180.0],
        &[500.0, 1000.0, 2000.0, 4000.0],
    );
    let configs: Vec<SimConfig> = cases
        .iter()
        .map(|case| {
            let mut c = case.config(48, 7);
            // zero jitter keeps clock estimates exact at the boundary case
            c.network.jitter_ms = 0.0;
            c
        })
        .collect();
    let reports = run_batch(&configs, Execution::default());
    let mut freezes = 0;
    for (case, r) in cases.iter().zip(reports) {
        let r = r.map_err(|e| e.to_string())?;
        let n = overlaps(&r);
        ensure(n == 0 && r.summary.overlapping_freezes == 0, || {
            format!("{case:?}: {n} overlaps")
        })?;
        ensure(r.summary.freeze_bound_applies, || {
            format!("{case:?}: bound not applied")
        })?;
        ensure(r.freezes.len() as u32 >= 2 * case.n_performers, || {
            format!("{case:?}: only {} freezes", r.freezes.len())
        })?;
        ensure(r.violations.is_empty(), || {
            format!("{case:?}: {}", violations(&r))
        })?;
        freezes += r.freezes.len();
    }
    Ok(format!(
        "{} combinations, {freezes} freezes, 0 overlaps",
        cases.len()
    ))
}

/// Scan grid ticks until the elapsed time covers the freeze, in exact
/// integer arithmetic: ticks * 60000 >= ms * ppq * bpm.
fn brute_reinsertion(start: u64, ms: u64, bpm: u64) -> u64 {
    let mut g = start - start % 120;
    while g < start || (g - start) * 60_000 < ms * 480 * bpm {
        g += 120;
    }
    g
}

fn reinsertion() -> Check {
    let clock = TransportClock::new(120.0, 0.0).map_err(|e| e.to_string())?;
    let example = reinsertion_tick(1000, 2300.0, &clock);
    ensure(example == 3240, || format!("example gave {example}"))?;
    ensure(brute_reinsertion(1000, 2300, 120) == 3240, || {
        "oracle disagrees on example".into()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(2300);
    for i in 0..1000 {
        let start = rng.random_range(0..2_000_000u64);
        let ms = rng.random_range(0..30_000u64);
        let bpm = rng.random_range(40..=240u64);
        let clock = TransportClock::new(bpm as f64, 0.0).map_err(|e| e.to_string())?;
        let got = reinsertion_tick(start, ms as f64, &clock);
        let want = brute_reinsertion(start, ms, bpm);
        ensure(got == want, || {
            format!("case {i}: start {start} ms {ms} bpm {bpm}: {got} != {want}")
        })?;
    }
    Ok("example 3240, 1000 random cases agree".into())
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|x| x.0)
        .unwrap()
}

fn temperature() -> Check {
    let t = |v| Temperature::new(v).unwrap();
    let p = apply_temperature(&[0.8, 0.2], t(0.5)).map_err(|e| e.to_string())?;
    // p_i^(1/T) / sum
    let oracle = [0.64 / 0.68, 0.04 / 0.68];
    ensure(
        (p[0] - 0.9412).abs() <= 1e-4 && (p[1] - 0.0588).abs() <= 1e-4,
        || format!("{p:?}"),
    )?;
    ensure((p[0] - oracle[0]).abs() < 1e-12, || {
        format!("{p:?} vs {oracle:?}")
    })?;

    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (common::arb_distribution(), 0.01..=4.0f64);
    runner
        .run(&strategy, |(dist, temp)| {
            let q = apply_temperature(&dist, Temperature::new(temp).unwrap()).unwrap();
            let sum: f64 = q.iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-9);
            proptest::prop_assert_eq!(argmax(&q), argmax(&dist));
            for i in 0..dist.len() {
                for j in 0..dist.len() {
                    if dist[i] > dist[j] {
                        proptest::prop_assert!(q[i] >= q[j]);
                    }
                }
            }
            let cold = apply_temperature(&dist, Temperature::new(0.01).unwrap()).unwrap();
            let top = dist[argmax(&dist)];
            let oracle_mass = 1.0 / dist.iter().map(|p| (p / top).powf(100.0)).sum::<f64>();
            proptest::prop_assert!((cold[argmax(&dist)] - oracle_mass).abs() < 1e-9);
            // near-ties cannot concentrate; require a clear runner-up margin
            let runner_up = dist
                .iter()
                .cloned()
                .filter(|p| *p < top)
                .fold(0.0, f64::max);
            if runner_up <= 0.8 * top {
                proptest::prop_assert!(cold[argmax(&dist)] >= 1.0 - 1e-6);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("example within 1e-4, 10000 random distributions".into())
}

fn generator_contract() -> Check {
    let model = GeneratorModel::default_with_seed(0);
    let prog = default_progression();
    let empty = NoteSequence::empty(16);
    let mut means = Vec::new();
    for t in [0.1, 1.0, 2.0] {
        let mut total = 0.0;
        for seed in 0..100u64 {
            let mut rng = SessionRng::seed_from_u64(seed);
            let r = generate_continuation(
                &model,
                &empty,
                &prog,
                0,
                Temperature::new(t).unwrap(),
                &LatencyModel::Fixed { ms: 0.0 },
                &mut rng,
            )
            .map_err(|e| e.to_string())?;
            let seq = r.sequence;
            ensure(
                seq.length_bars() == 16 && seq.end_tick() == 16 * TICKS_PER_BAR,
                || format!("seed {seed}: length {}", seq.length_bars()),
            )?;
            for e in seq.events() {
                let chord = chord_at(&prog, (e.onset / TICKS_PER_BAR) as u32);
                let pc = (e.pitch as i32 - chord.root() as i32).rem_euclid(12) as u8;
                ensure(chord.quality().scale().contains(&pc), || {
                    format!("seed {seed}: pitch {} off the scale of {chord:?}", e.pitch)
                })?;
                ensure(e.onset % 120 == 0 && e.duration % 120 == 0, || {
                    format!("seed {seed}: off-grid event {e:?}")
                })?;
                ensure(e.end() <= 16 * TICKS_PER_BAR, || {
                    format!("seed {seed}: event past end")
                })?;
            }
            total += distinct_pitch_classes_per_bar(&seq);
        }
        means.push(total / 100.0);
    }
    ensure(means.windows(2).all(|w| w[0] <= w[1]), || {
        format!("means {means:?}")
    })?;
    Ok(format!(
        "300 generations; pitch classes per bar {:.3} <= {:.3} <= {:.3}",
        means[0], means[1], means[2]
    ))
}

fn handshake_inputs() -> Vec<Option<Message>> {
    let seed = Message::Seed {
        progression: default_progression(),
        seed_melody: NoteSequence::empty(16),
        tempo_bpm: 120.0,
        ppq: 480,
    };
    vec![
        None,
        Some(Message::Welcome {
            performer_id: 0,
            n_expected: 1,
        }),
        Some(seed),
        Some(Message::Start {
            start_epoch_ms: 5.0,
        }),
        Some(Message::Stop {}),
        Some(Message::Ready { performer_id: 0 }),
        Some(Message::Plan {
            instructions: vec![],
        }),
        Some(Message::ClockPong {
            client_send_ms: 0.0,
            server_ms: 0.0,
        }),
    ]
}

fn protocol() -> Check {
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&common::arb_message(), |msg| {
            let back = decode_text(&encode_text(&msg)).unwrap();
            proptest::prop_assert_eq!(back, msg);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    use HandshakeState::*;
    let states = [Connected, Welcomed, Seeded, ModelReady, Running, Stopped];
    let inputs = handshake_inputs();
    let mut reached_running = false;
    for s in states {
        for input in &inputs {
            let (next, _) = match input {
                None => handshake_step(s, HandshakeInput::ModelReady),
                Some(m) => handshake_step(s, HandshakeInput::Message(m)),
            };
            if next == Running && s != Running {
                ensure(s == ModelReady, || format!("Running entered from {s:?}"))?;
                reached_running = true;
            }
            if next == ModelReady && s != ModelReady {
                ensure(input.is_none(), || {
                    format!("ModelReady entered by {input:?}")
                })?;
            }
        }
    }
    ensure(reached_running, || "Running unreachable".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let offset = rng.random_range(-50_000..50_000) as f64;
        let up = rng.random_range(0..200) as f64;
        let asym = rng.random_range(0..100) as f64;
        let samples = |down: f64| -> Vec<ClockSample> {
            (0..5)
                .map(|k| {
                    let send = 1000.0 * k as f64;
                    ClockSample {
                        client_send_ms: send,
                        server_ms: send + up + offset,
                        client_recv_ms: send + up + down,
                    }
                })
                .collect()
        };
        let sym = estimate_offset(&samples(up)).map_err(|e| e.to_string())?;
        ensure(sym.offset_ms == offset, || {
            format!("symmetric: {} != {offset}", sym.offset_ms)
        })?;
        let skewed = estimate_offset(&samples(up + asym)).map_err(|e| e.to_string())?;
        ensure(
            (skewed.offset_ms - offset).abs() <= asym / 2.0 + 1e-9,
            || {
                format!(
                    "asymmetry {asym}: error {}",
                    (skewed.offset_ms - offset).abs()
                )
            },
        )?;
    }
    Ok("10000 round trips, Running only from ModelReady, clock exact/bounded".into())
}

fn performance1() -> Check {
    let mut c = SimConfig::new(4, 96, 120.0, 2000.0, 64);
    c.scenario = Scenario::Performance1Dropout;
    let r = sim::run(c).map_err(|e| e.to_string())?;
    let map: TempoMap = r.tempo_map().ok_or("no start")?;
    let sixteenth_us = 125_000;
    let mut resumed = 0;
    for p in 0..4u32 {
        let links: Vec<_> = r.links.iter().filter(|l| l.performer_id == p).collect();
        let sever = links
            .iter()
            .find(|l| l.kind == LinkEventKind::Severed)
            .ok_or(format!("performer {p} never severed"))?;
        let (resume_at, resume_tick) = links
            .iter()
            .find_map(|l| match l.kind {
                LinkEventKind::Resumed { resume_tick, .. } if l.at_us > sever.at_us => {
                    Some((l.at_us, resume_tick))
                }
                _ => None,
            })
            .ok_or(format!("performer {p} never resumed"))?;
        resumed += 1;
        ensure(resume_tick % 120 == 0, || {
            format!("performer {p} resumed at tick {resume_tick}")
        })?;
        for e in r.events.iter().filter(|e| e.performer_id == p) {
            if e.event.kind == NoteKind::NoteOn
                && e.at_us > sever.at_us + sixteenth_us
                && e.at_us < resume_at
            {
                return Err(format!(
                    "performer {p} played at {} us while disconnected",
                    e.at_us
                ));
            }
            if e.at_us >= resume_at {
                let d = (e.at_us as f64 / 1000.0 - map.tick_to_ms(e.event.at_tick)).abs();
                ensure(d <= 30.0, || {
                    format!("performer {p} desync {d:.3} ms after rejoin")
                })?;
            }
        }
        let after = r
            .events
            .iter()
            .filter(|e| {
                e.performer_id == p && e.at_us >= resume_at && e.event.kind == NoteKind::NoteOn
            })
            .count();
        ensure(after > 0, || format!("performer {p} silent after rejoin"))?;
    }
    ensure(r.violations.is_empty(), || violations(&r))?;
    Ok(format!("{resumed}/4 halted and resumed on the grid"))
}

fn stuck_notes() -> Check {
    let mut c = SimConfig::new(3, 80, 100.0, 1500.0, 4);
    c.network.jitter_ms = 8.0;
    let r = sim::run(c).map_err(|e| e.to_string())?;
    let mut straddled = 0;
    for f in &r.freezes {
        let mut sounding: i64 = 0;
        for e in r.events_for(f.record.performer_id) {
            if e.at_tick >= f.record.freeze_start_tick {
                break;
            }
            sounding += if e.kind == NoteKind::NoteOn { 1 } else { -1 };
        }
        if sounding > 0 {
            straddled += 1;
        }
    }
    ensure(straddled > 0, || {
        "no freeze straddled a sounding note".into()
    })?;
    for p in 0..3 {
        let mut balance: BTreeMap<u8, i64> = BTreeMap::new();
        for e in r.events_for(p) {
            *balance.entry(e.pitch).or_default() += if e.kind == NoteKind::NoteOn { 1 } else { -1 };
        }
        ensure(balance.values().all(|b| *b == 0), || {
            format!("performer {p}: {balance:?}")
        })?;
    }
    ensure(r.violations.is_empty(), || violations(&r))?;
    Ok(format!(
        "{straddled} of {} freezes straddled sounding notes, multisets equal",
        r.freezes.len()
    ))
}

fn determinism() -> Check {
    let mut configs = vec![SimConfig::new(4, 64, 120.0, 2000.0, 5)];
    let mut c = SimConfig::new(3, 96, 140.0, 1200.0, 6);
    c.scenario = Scenario::Performance1Dropout;
    configs.push(c);
    let mut c = SimConfig::new(4, 160, 120.0, 1500.0, 7);
    c.scenario = Scenario::Performance2;
    configs.push(c);
    let mut c = SimConfig::new(5, 48, 90.0, 800.0, 8);
    c.network.drop_probability = 0.002;
    c.freeze = LatencyModel::Uniform {
        min_ms: 300.0,
        max_ms: 1800.0,
    };
    configs.push(c);
    let a = run_batch(&configs, Execution::Parallel);
    let b = run_batch(&configs, Execution::Sequential);
    for (i, (x, y)) in a.into_iter().zip(b).enumerate() {
        let (x, y) = (x.map_err(|e| e.to_string())?, y.map_err(|e| e.to_string())?);
        ensure(x.to_text() == y.to_text(), || format!("config {i} differs"))?;
    }
    Ok(format!(
        "{} configs byte-identical across runs",
        configs.len()
    ))
}

type Criterion = (&'static str, fn() -> Check);

fn main() {
    let checks: [Criterion; 9] = [
        ("four-performer nominal simulation", nominal_four),
        ("stagger non-overlap sweep", stagger_sweep),
        ("reinsertion arithmetic", reinsertion),
        ("temperature", temperature),
        ("generator musicality contract", generator_contract),
        ("protocol", protocol),
        ("dropout regression", performance1),
        ("stuck-note regression", stuck_notes),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in checks {
        match f() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        checks.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
