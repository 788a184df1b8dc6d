//! Deterministic discrete-event simulation of a whole ensemble.
//!
//! One [`Conductor`] and `n` [`Performer`]s run unchanged on a virtual clock.
//! Only time and transport are simulated: messages travel as encoded text
//! frames over per-client FIFO links with latency, jitter and drops, and each
//! client reads a local clock skewed from server time. Events are ordered by
//! `(time_us, sequence)`, so a fixed seed gives a byte-identical report.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conductor::{Conductor, ConductorConfig, ConnId, Outbound, PerformancePlan};
use crate::generator::{GenerationResult, GeneratorError, GeneratorModel, LatencyModel};
use crate::music::{
    bar_start, Chord, ChordProgression, NoteSequence, TempoMap, TempoStep, Tick, SIXTEENTH_TICKS,
};
use crate::performer::{
    ControlState, EngineConfig, EngineOutput, NoteKind, Performer, SinkEvent, SinkMode,
    VolumeCommand,
};
use crate::protocol::{
    decode_text, encode_text, ControlSetting, EngagementMode, Message, PlanInstruction,
};
use crate::stagger::{freeze_bound_ms, FreezeRecord, StaggerSchedule, MAX_PERFORMERS};

pub const DESYNC_TOLERANCE_MS: f64 = 30.0;
const GATHER_LIMIT_US: u64 = 300_000_000;
const DRAIN_US: u64 = 30_000_000;
const NETWORK_STREAM: u64 = 0x6e65_7477;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    #[default]
    Nominal,
    /// Every connection is severed at the dropout bar; clients rejoin.
    Performance1Dropout,
    /// A plan that thins the texture plus scripted live controls.
    Performance2,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Nominal => "nominal",
            Scenario::Performance1Dropout => "performance1-dropout",
            Scenario::Performance2 => "performance2",
        })
    }
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nominal" => Ok(Scenario::Nominal),
            "performance1-dropout" => Ok(Scenario::Performance1Dropout),
            "performance2" => Ok(Scenario::Performance2),
            _ => Err(format!("unknown scenario `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// One-way latency.
    pub latency_ms: f64,
    /// Extra one-way delay drawn uniformly from `[0, jitter_ms]`.
    pub jitter_ms: f64,
    /// Chance that sending a message severs the connection.
    pub drop_probability: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            latency_ms: 20.0,
            jitter_ms: 5.0,
            drop_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_performers: u32,
    pub duration_bars: u32,
    pub tempo_bpm: f64,
    pub freeze: LatencyModel,
    /// Per-performer freeze models; performers past the end use `freeze`.
    pub freeze_per_performer: Vec<LatencyModel>,
    pub network: NetworkConfig,
    pub seed: u64,
    pub scenario: Scenario,
    pub sink_mode: SinkMode,
    /// Forced stagger offsets (fault injection).
    pub schedule_override: Option<Vec<u32>>,
    pub controls: ControlState,
    pub progression: ChordProgression,
    pub seed_melody: NoteSequence,
    pub model: Option<GeneratorModel>,
    pub max_clock_skew_ms: u32,
    pub dropout_bar: u32,
    pub outage_ms: f64,
    pub reconnect_interval_ms: f64,
}

/// C, G, Am, F, one bar each, repeating.
pub fn default_progression() -> ChordProgression {
    let chords = ["C", "G", "Am", "F"].map(|c| c.parse::<Chord>().expect("valid chord"));
    let pairs: Vec<(u32, Chord)> = chords
        .iter()
        .enumerate()
        .map(|(i, c)| (i as u32, *c))
        .collect();
    ChordProgression::from_pairs(&pairs)
        .and_then(|p| p.looping(4))
        .expect("valid progression")
}

impl SimConfig {
    pub fn new(
        n_performers: u32,
        duration_bars: u32,
        tempo_bpm: f64,
        freeze_ms: f64,
        seed: u64,
    ) -> Self {
        SimConfig {
            n_performers,
            duration_bars,
            tempo_bpm,
            freeze: LatencyModel::Fixed { ms: freeze_ms },
            freeze_per_performer: Vec::new(),
            network: NetworkConfig::default(),
            seed,
            scenario: Scenario::Nominal,
            sink_mode: SinkMode::Blocking,
            schedule_override: None,
            controls: ControlState::default(),
            progression: default_progression(),
            seed_melody: NoteSequence::empty(16),
            model: None,
            max_clock_skew_ms: 250,
            dropout_bar: 64,
            outage_ms: 3000.0,
            reconnect_interval_ms: 500.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |s: String| Err(SimError::Config(s));
        if !(1..=MAX_PERFORMERS).contains(&self.n_performers) {
            return bad(format!("performers {} outside 1..=16", self.n_performers));
        }
        if self.duration_bars < 16 {
            return bad(format!(
                "duration {} bars is shorter than one window",
                self.duration_bars
            ));
        }
        if !(40.0..=240.0).contains(&self.tempo_bpm) {
            return bad(format!("tempo {} outside [40, 240]", self.tempo_bpm));
        }
        let net = &self.network;
        if !(0.0..=1.0).contains(&net.drop_probability) {
            return bad(format!(
                "drop probability {} outside [0, 1]",
                net.drop_probability
            ));
        }
        if !(net.latency_ms >= 0.0
            && net.jitter_ms >= 0.0
            && net.latency_ms.is_finite()
            && net.jitter_ms.is_finite())
        {
            return bad("latency and jitter must be finite and non-negative".into());
        }
        for m in std::iter::once(&self.freeze).chain(&self.freeze_per_performer) {
            m.validate().map_err(|e| SimError::Config(e.to_string()))?;
            if *m == LatencyModel::Measured {
                return bad("measured latency is not reproducible; use fixed or uniform".into());
            }
        }
        if let Some(offsets) = &self.schedule_override {
            if offsets.len() != self.n_performers as usize {
                return bad("schedule override needs one offset per performer".into());
            }
        }
        if !(self.outage_ms >= 0.0 && self.reconnect_interval_ms > 0.0) {
            return bad("outage must be >= 0 and reconnect interval > 0".into());
        }
        Ok(())
    }

    fn freeze_for(&self, performer: usize) -> LatencyModel {
        self.freeze_per_performer
            .get(performer)
            .copied()
            .unwrap_or(self.freeze)
    }

    fn header(&self) -> String {
        format!(
            "performers={} bars={} tempo={} freeze={:?} latency_ms={} jitter_ms={} drop={} seed={} scenario={} sink={}",
            self.n_performers,
            self.duration_bars,
            self.tempo_bpm,
            self.freeze,
            self.network.latency_ms,
            self.network.jitter_ms,
            self.network.drop_probability,
            self.seed,
            self.scenario,
            self.sink_mode
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub performer_id: u32,
    pub at_us: u64,
    pub event: SinkEvent,
}

/// A blocking freeze in true time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSpan {
    pub record: FreezeRecord,
    pub start_us: u64,
    pub end_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkEventKind {
    Severed,
    Connected,
    Resumed {
        resume_tick: Tick,
        server_tick: Tick,
    },
    Aborted(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkEvent {
    pub performer_id: u32,
    pub at_us: u64,
    pub kind: LinkEventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeEvent {
    pub performer_id: u32,
    pub at_us: u64,
    pub command: VolumeCommand,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub name: String,
    pub performer_id: Option<u32>,
    pub tick: Tick,
    pub detail: String,
}

impl Violation {
    fn new(name: &str, performer_id: Option<u32>, tick: Tick, detail: String) -> Self {
        Violation {
            name: name.to_string(),
            performer_id,
            tick,
            detail,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub note_ons: usize,
    pub freezes: usize,
    pub rejoins: usize,
    pub max_desync_ms: f64,
    pub stuck_notes: usize,
    pub overlapping_freezes: usize,
    pub underruns: usize,
    pub freeze_bound_ms: f64,
    pub freeze_bound_applies: bool,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub header: String,
    pub n_performers: u32,
    pub start_epoch_ms: Option<f64>,
    pub tempo_steps: Vec<TempoStep>,
    pub events: Vec<LoggedEvent>,
    pub freezes: Vec<FreezeSpan>,
    pub links: Vec<LinkEvent>,
    pub volumes: Vec<VolumeEvent>,
    /// `(performer_id, window)` entered without a generated buffer.
    pub underruns: Vec<(u32, u32)>,
    pub violations: Vec<Violation>,
    pub summary: Summary,
}

impl SimReport {
    pub fn events_for(&self, performer_id: u32) -> impl Iterator<Item = &SinkEvent> {
        self.events
            .iter()
            .filter(move |e| e.performer_id == performer_id)
            .map(|e| &e.event)
    }

    pub fn tempo_map(&self) -> Option<TempoMap> {
        TempoMap::from_steps(self.start_epoch_ms?, &self.tempo_steps).ok()
    }

    /// Recomputes violations and summary from the recorded data.
    pub fn recheck(&mut self) {
        self.violations = check(self);
        self.summary = summarize(self);
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// Machine-parseable text: header, one section per record type, then a
    /// `key=value` summary block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# ensemble sim report");
        let _ = writeln!(s, "{}", self.header);
        match self.start_epoch_ms {
            Some(e) => {
                let _ = writeln!(s, "start_epoch_ms={e:.3}");
            }
            None => s.push_str("start_epoch_ms=none\n"),
        }
        for t in &self.tempo_steps {
            let _ = writeln!(s, "tempo bar={} bpm={}", t.bar, t.tempo_bpm);
        }
        s.push_str("[events]\nperformer,tick,kind,pitch,velocity,origin,at_us\n");
        for e in &self.events {
            let ev = &e.event;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                e.performer_id, ev.at_tick, ev.kind, ev.pitch, ev.velocity, ev.origin, e.at_us
            );
        }
        s.push_str(
            "[freezes]\nperformer,freeze_start_tick,freeze_ms,resume_tick,start_us,end_us\n",
        );
        for f in &self.freezes {
            let r = &f.record;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.performer_id,
                r.freeze_start_tick,
                r.freeze_ms,
                r.resume_tick,
                f.start_us,
                f.end_us
            );
        }
        s.push_str("[links]\nperformer,at_us,kind\n");
        for l in &self.links {
            let _ = writeln!(s, "{},{},{:?}", l.performer_id, l.at_us, l.kind);
        }
        s.push_str("[volume]\nperformer,at_us,at_tick,target,ramp_ms\n");
        for v in &self.volumes {
            let _ = writeln!(
                s,
                "{},{},{},{:.3},{:.3}",
                v.performer_id, v.at_us, v.command.at_tick, v.command.target, v.command.ramp_ms
            );
        }
        s.push_str("[underruns]\nperformer,window\n");
        for (p, w) in &self.underruns {
            let _ = writeln!(s, "{p},{w}");
        }
        s.push_str("[violations]\nname,performer,tick,detail\n");
        for v in &self.violations {
            let p = v.performer_id.map_or("-".to_string(), |p| p.to_string());
            let _ = writeln!(s, "{},{},{},{}", v.name, p, v.tick, v.detail);
        }
        let m = &self.summary;
        s.push_str("[summary]\n");
        let _ = writeln!(s, "note_ons={}", m.note_ons);
        let _ = writeln!(s, "freezes={}", m.freezes);
        let _ = writeln!(s, "rejoins={}", m.rejoins);
        let _ = writeln!(s, "max_desync_ms={:.3}", m.max_desync_ms);
        let _ = writeln!(s, "stuck_notes={}", m.stuck_notes);
        let _ = writeln!(s, "overlapping_freezes={}", m.overlapping_freezes);
        let _ = writeln!(s, "underruns={}", m.underruns);
        let _ = writeln!(s, "freeze_bound_ms={:.3}", m.freeze_bound_ms);
        let _ = writeln!(s, "freeze_bound_applies={}", m.freeze_bound_applies);
        let _ = writeln!(s, "violations={}", m.violations);
        let _ = writeln!(s, "result={}", if self.passed() { "pass" } else { "fail" });
        s
    }
}

fn max_tempo(report: &SimReport) -> f64 {
    report
        .tempo_steps
        .iter()
        .map(|t| t.tempo_bpm)
        .fold(0.0, f64::max)
}

fn bound_applies(report: &SimReport) -> (f64, bool) {
    let tempo = max_tempo(report);
    if tempo <= 0.0 {
        return (0.0, false);
    }
    let bound = freeze_bound_ms(report.n_performers, tempo);
    let applies = report
        .freezes
        .iter()
        .all(|f| (f.end_us - f.start_us) as f64 / 1000.0 <= bound);
    (bound, applies)
}

/// `(stuck, orphan)` per performer in log order.
fn pairing(report: &SimReport) -> (Vec<Violation>, Vec<Violation>) {
    let mut stuck = Vec::new();
    let mut orphan = Vec::new();
    for p in 0..report.n_performers {
        let mut open: BTreeMap<u8, Vec<Tick>> = BTreeMap::new();
        for e in report.events_for(p) {
            match e.kind {
                NoteKind::NoteOn => open.entry(e.pitch).or_default().push(e.at_tick),
                NoteKind::NoteOff => {
                    if open.get_mut(&e.pitch).and_then(|v| v.pop()).is_none() {
                        orphan.push(Violation::new(
                            "orphan-note-off",
                            Some(p),
                            e.at_tick,
                            format!("pitch {}", e.pitch),
                        ));
                    }
                }
            }
        }
        let mut left: Vec<(Tick, u8)> = open
            .into_iter()
            .flat_map(|(pitch, ticks)| ticks.into_iter().map(move |t| (t, pitch)))
            .collect();
        left.sort();
        for (t, pitch) in left {
            stuck.push(Violation::new(
                "stuck-note",
                Some(p),
                t,
                format!("pitch {pitch} never released"),
            ));
        }
    }
    (stuck, orphan)
}

fn overlapping_freezes(report: &SimReport) -> Vec<Violation> {
    let mut out = Vec::new();
    let (_, applies) = bound_applies(report);
    if !applies {
        return out;
    }
    let mut spans = report.freezes.clone();
    spans.sort_by_key(|f| (f.start_us, f.record.performer_id));
    for (i, a) in spans.iter().enumerate() {
        for b in &spans[i + 1..] {
            if b.start_us >= a.end_us {
                break;
            }
            if a.record.performer_id != b.record.performer_id {
                out.push(Violation::new(
                    "overlapping-freeze",
                    Some(b.record.performer_id),
                    b.record.freeze_start_tick,
                    format!(
                        "performer {} frozen {}..{} us overlaps performer {} frozen {}..{} us",
                        a.record.performer_id,
                        a.start_us,
                        a.end_us,
                        b.record.performer_id,
                        b.start_us,
                        b.end_us
                    ),
                ));
            }
        }
    }
    out
}

fn desync_ms(map: &TempoMap, e: &LoggedEvent) -> f64 {
    (e.at_us as f64 / 1000.0 - map.tick_to_ms(e.event.at_tick)).abs()
}

/// Evaluates every invariant over a completed report. Each breach names the
/// first offending tick.
pub fn check(report: &SimReport) -> Vec<Violation> {
    let mut v = Vec::new();
    let (stuck, orphan) = pairing(report);
    v.extend(stuck);
    v.extend(orphan);
    v.extend(overlapping_freezes(report));

    if let Some(map) = report.tempo_map() {
        for p in 0..report.n_performers {
            let late: Vec<(&LoggedEvent, f64)> = report
                .events
                .iter()
                .filter(|e| e.performer_id == p)
                .map(|e| (e, desync_ms(&map, e)))
                .filter(|(_, d)| *d > DESYNC_TOLERANCE_MS)
                .collect();
            if let Some((first, _)) = late.first() {
                let worst = late.iter().map(|x| x.1).fold(0.0, f64::max);
                v.push(Violation::new(
                    "desync",
                    Some(p),
                    first.event.at_tick,
                    format!(
                        "{} events beyond {DESYNC_TOLERANCE_MS} ms, worst {worst:.3} ms",
                        late.len()
                    ),
                ));
            }
        }
    }

    for (p, w) in &report.underruns {
        v.push(Violation::new(
            "buffer-gap",
            Some(*p),
            bar_start(w * 16),
            format!("window {w} not generated in time"),
        ));
    }

    for f in &report.freezes {
        let r = &f.record;
        if r.resume_tick % SIXTEENTH_TICKS != 0 || r.resume_tick < r.freeze_start_tick {
            v.push(Violation::new(
                "reinsertion-misaligned",
                Some(r.performer_id),
                r.resume_tick,
                format!("freeze from tick {}", r.freeze_start_tick),
            ));
        }
    }
    for l in &report.links {
        if let LinkEventKind::Resumed { resume_tick, .. } = l.kind {
            if resume_tick % SIXTEENTH_TICKS != 0 {
                v.push(Violation::new(
                    "reinsertion-misaligned",
                    Some(l.performer_id),
                    resume_tick,
                    "rejoin resume off the sixteenth grid".into(),
                ));
            }
        }
    }

    // after a sever, no new note may start later than one sixteenth
    let tempo = report.tempo_map();
    for (i, l) in report.links.iter().enumerate() {
        if l.kind != LinkEventKind::Severed {
            continue;
        }
        let p = l.performer_id;
        let resumed = report.links[i + 1..]
            .iter()
            .find(|x| x.performer_id == p && matches!(x.kind, LinkEventKind::Resumed { .. }))
            .map_or(u64::MAX, |x| x.at_us);
        let sixteenth_us = tempo.as_ref().map_or(125_000.0, |m| {
            let tick = m.ms_to_tick(l.at_us as f64 / 1000.0).unwrap_or(0);
            15_000_000.0 / m.tempo_at_tick(tick)
        });
        let limit = l.at_us + sixteenth_us as u64;
        if let Some(e) = report.events.iter().find(|e| {
            e.performer_id == p
                && e.event.kind == NoteKind::NoteOn
                && e.at_us > limit
                && e.at_us < resumed
        }) {
            v.push(Violation::new(
                "late-halt",
                Some(p),
                e.event.at_tick,
                format!(
                    "note_on {} us after the connection was lost",
                    e.at_us - l.at_us
                ),
            ));
        }
    }

    for l in &report.links {
        if let LinkEventKind::Aborted(reason) = &l.kind {
            v.push(Violation::new(
                "engine-abort",
                Some(l.performer_id),
                0,
                reason.clone(),
            ));
        }
    }
    if report.start_epoch_ms.is_none() {
        v.push(Violation::new(
            "no-start",
            None,
            0,
            "performance never started".into(),
        ));
    }
    v
}

fn summarize(report: &SimReport) -> Summary {
    let (bound, applies) = bound_applies(report);
    let max_desync_ms = report
        .tempo_map()
        .map(|m| {
            report
                .events
                .iter()
                .map(|e| desync_ms(&m, e))
                .fold(0.0, f64::max)
        })
        .unwrap_or(0.0);
    Summary {
        note_ons: report
            .events
            .iter()
            .filter(|e| e.event.kind == NoteKind::NoteOn)
            .count(),
        freezes: report.freezes.len(),
        rejoins: report
            .links
            .iter()
            .filter(|l| matches!(l.kind, LinkEventKind::Resumed { .. }))
            .count(),
        max_desync_ms,
        stuck_notes: report
            .violations
            .iter()
            .filter(|v| v.name == "stuck-note")
            .count(),
        overlapping_freezes: report
            .violations
            .iter()
            .filter(|v| v.name == "overlapping-freeze")
            .count(),
        underruns: report.underruns.len(),
        freeze_bound_ms: bound,
        freeze_bound_applies: applies,
        violations: report.violations.len(),
    }
}

#[derive(Debug)]
enum Ev {
    Connect(usize),
    ToServer {
        client: usize,
        conn: ConnId,
        frame: String,
    },
    ToClient {
        client: usize,
        conn: ConnId,
        frame: String,
    },
    Wake {
        client: usize,
        token: u64,
    },
    GenDone {
        client: usize,
        job: u64,
        result: Result<GenerationResult, GeneratorError>,
    },
    Stop,
    SeverAll,
    Control {
        performer: u32,
        setting: ControlSetting,
    },
}

#[derive(Debug)]
struct Queued {
    at: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug)]
struct Client {
    engine: Performer,
    skew_ms: f64,
    conn: Option<ConnId>,
    outage_until_us: u64,
    up_last_us: u64,
    down_last_us: u64,
    wake_token: u64,
    wake_at: Option<u64>,
    last_poll_us: Option<u64>,
    open_freeze: Option<(u64, u64)>,
    freezes_seen: usize,
    resyncs_seen: usize,
    performer_id: u32,
    ever_connected: bool,
}

struct World {
    config: SimConfig,
    model: GeneratorModel,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Queued>,
    rng: ChaCha8Rng,
    conductor: Conductor,
    clients: Vec<Client>,
    next_conn: ConnId,
    started: bool,
    stop_at: Option<u64>,
    report: SimReport,
}

fn us_of_ms(ms: f64) -> u64 {
    (ms * 1000.0).round().max(0.0) as u64
}

impl World {
    fn new(config: SimConfig) -> Result<World, SimError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(NETWORK_STREAM);
        let mut cc = ConductorConfig::new(
            config.n_performers,
            config.tempo_bpm,
            config.progression.clone(),
            config.seed_melody.clone(),
        );
        if config.scenario == Scenario::Performance2 {
            let (b1, b2) = thinning_bars(config.duration_bars);
            cc.plan = PerformancePlan::new(vec![
                PlanInstruction {
                    bar: 0,
                    text: "open sparse, one voice at a time".into(),
                },
                PlanInstruction {
                    bar: b1,
                    text: format!("begin to lower the intensity until soft by bar {b2}"),
                },
            ]);
        }
        let conductor = Conductor::new(cc).map_err(|e| SimError::Config(e.to_string()))?;
        let schedule = match &config.schedule_override {
            Some(o) => Some(
                StaggerSchedule::with_offsets(o.clone())
                    .map_err(|e| SimError::Config(e.to_string()))?,
            ),
            None => None,
        };
        let skew_max = config.max_clock_skew_ms as i64;
        let clients = (0..config.n_performers as usize)
            .map(|i| {
                let skew = rng.random_range(-skew_max..=skew_max) as f64;
                let engine = Performer::new(EngineConfig {
                    name: format!("sim-{i}"),
                    seed: config.seed,
                    latency: config.freeze_for(i),
                    sink_mode: config.sink_mode,
                    controls: config.controls,
                    schedule_override: schedule.clone(),
                });
                Client {
                    engine,
                    skew_ms: skew,
                    conn: None,
                    outage_until_us: 0,
                    up_last_us: 0,
                    down_last_us: 0,
                    wake_token: 0,
                    wake_at: None,
                    last_poll_us: None,
                    open_freeze: None,
                    freezes_seen: 0,
                    resyncs_seen: 0,
                    performer_id: i as u32,
                    ever_connected: false,
                }
            })
            .collect();
        let model = config
            .model
            .clone()
            .unwrap_or_else(|| GeneratorModel::default_with_seed(config.seed));
        let report = SimReport {
            header: config.header(),
            n_performers: config.n_performers,
            start_epoch_ms: None,
            tempo_steps: Vec::new(),
            events: Vec::new(),
            freezes: Vec::new(),
            links: Vec::new(),
            volumes: Vec::new(),
            underruns: Vec::new(),
            violations: Vec::new(),
            summary: Summary::default(),
        };
        Ok(World {
            config,
            model,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            rng,
            conductor,
            clients,
            next_conn: 1,
            started: false,
            stop_at: None,
            report,
        })
    }

    fn push(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Queued {
            at: at.max(self.now),
            seq: self.seq,
            ev,
        });
    }

    fn server_ms(&self) -> f64 {
        self.now as f64 / 1000.0
    }

    fn local_ms(&self, client: usize) -> f64 {
        self.server_ms() + self.clients[client].skew_ms
    }

    fn link_delay_us(&mut self) -> u64 {
        let net = self.config.network;
        let jitter = if net.jitter_ms > 0.0 {
            self.rng.random_range(0.0..=net.jitter_ms)
        } else {
            0.0
        };
        us_of_ms(net.latency_ms + jitter)
    }

    fn dropped(&mut self) -> bool {
        let p = self.config.network.drop_probability;
        p > 0.0 && self.rng.random_bool(p)
    }

    fn send_up(&mut self, client: usize, msg: &Message) {
        let Some(conn) = self.clients[client].conn else {
            return;
        };
        if self.dropped() {
            self.sever(client, 0);
            return;
        }
        let at = (self.now + self.link_delay_us()).max(self.clients[client].up_last_us);
        self.clients[client].up_last_us = at;
        self.push(
            at,
            Ev::ToServer {
                client,
                conn,
                frame: encode_text(msg),
            },
        );
    }

    fn send_down(&mut self, client: usize, msg: &Message) {
        let Some(conn) = self.clients[client].conn else {
            return;
        };
        if self.dropped() {
            self.sever(client, 0);
            return;
        }
        let at = (self.now + self.link_delay_us()).max(self.clients[client].down_last_us);
        self.clients[client].down_last_us = at;
        self.push(
            at,
            Ev::ToClient {
                client,
                conn,
                frame: encode_text(msg),
            },
        );
    }

    fn client_of(&self, conn: ConnId) -> Option<usize> {
        self.clients.iter().position(|c| c.conn == Some(conn))
    }

    fn server_out(&mut self, out: Vec<Outbound>) {
        for o in out {
            match o {
                Outbound::To(conn, msg) => {
                    if let Some(c) = self.client_of(conn) {
                        self.send_down(c, &msg);
                    }
                }
                Outbound::Close(conn) => {
                    if let Some(c) = self.client_of(conn) {
                        self.sever(c, 0);
                    }
                }
            }
        }
        if !self.started {
            if let Some(epoch) = self.conductor.start_epoch_ms() {
                self.on_start(epoch);
            }
        }
    }

    fn on_start(&mut self, epoch: f64) {
        self.started = true;
        let map = self.conductor.tempo_map().clone();
        let at_bar = |bar: u32| us_of_ms(map.tick_to_ms(bar_start(bar)));
        let stop = at_bar(self.config.duration_bars);
        self.stop_at = Some(stop);
        self.push(stop, Ev::Stop);
        self.report.start_epoch_ms = Some(epoch);
        match self.config.scenario {
            Scenario::Nominal => {}
            Scenario::Performance1Dropout => {
                let bar = if self.config.dropout_bar < self.config.duration_bars {
                    self.config.dropout_bar
                } else {
                    self.config.duration_bars / 2
                };
                self.push(at_bar(bar), Ev::SeverAll);
            }
            Scenario::Performance2 => {
                let n = self.config.n_performers;
                let (b1, b2) = thinning_bars(self.config.duration_bars);
                let mut script: Vec<(u32, u32, ControlSetting)> = Vec::new();
                for p in 0..n {
                    script.push((8, p, ControlSetting::AutoFade(true)));
                }
                if n > 1 {
                    script.push((16, 1, ControlSetting::Temperature(0.3)));
                    script.push((16, 1, ControlSetting::Transpose(-24)));
                }
                if n > 2 {
                    script.push((24, 2, ControlSetting::Temperature(3.0)));
                    script.push((24, 2, ControlSetting::Transpose(24)));
                }
                script.push((32, 0, ControlSetting::Mode(EngagementMode::Hybrid)));
                let steps = [
                    (b1, 0.8),
                    (b1 + (b2 - b1) / 3, 0.6),
                    (b1 + 2 * (b2 - b1) / 3, 0.4),
                    (b2, 0.25),
                ];
                for (bar, vol) in steps {
                    for p in 0..n {
                        script.push((bar, p, ControlSetting::Volume(vol)));
                    }
                }
                for (bar, performer, setting) in script {
                    if bar < self.config.duration_bars {
                        self.push(at_bar(bar), Ev::Control { performer, setting });
                    }
                }
            }
        }
    }

    fn drive(&mut self, client: usize, out: Vec<EngineOutput>) {
        let pid = self.clients[client].performer_id;
        for o in out {
            match o {
                EngineOutput::Send(msg) => self.send_up(client, &msg),
                EngineOutput::Sink(event) => self.report.events.push(LoggedEvent {
                    performer_id: pid,
                    at_us: self.now,
                    event,
                }),
                EngineOutput::Volume(command) => self.report.volumes.push(VolumeEvent {
                    performer_id: pid,
                    at_us: self.now,
                    command,
                }),
                EngineOutput::Generate(job) => {
                    let result = job.run(&self.model);
                    let latency = result.as_ref().map_or(0.0, |r| r.latency_ms);
                    if job.blocking {
                        self.clients[client].open_freeze = Some((job.id, self.now));
                    }
                    let at = self.now + us_of_ms(latency);
                    self.push(
                        at,
                        Ev::GenDone {
                            client,
                            job: job.id,
                            result,
                        },
                    );
                }
                EngineOutput::Abort(reason) => {
                    self.report.links.push(LinkEvent {
                        performer_id: pid,
                        at_us: self.now,
                        kind: LinkEventKind::Aborted(reason),
                    });
                    if let Some(conn) = self.clients[client].conn.take() {
                        let out = self.conductor.disconnect(conn, self.server_ms());
                        self.server_out(out);
                    }
                }
            }
        }
        self.collect_records(client);
        self.reschedule(client);
    }

    fn collect_records(&mut self, client: usize) {
        let c = &mut self.clients[client];
        let pid = c.performer_id;
        let resyncs = c.engine.resyncs();
        for r in &resyncs[c.resyncs_seen..] {
            self.report.links.push(LinkEvent {
                performer_id: pid,
                at_us: self.now,
                kind: LinkEventKind::Resumed {
                    resume_tick: r.resume_tick,
                    server_tick: r.server_tick,
                },
            });
        }
        c.resyncs_seen = resyncs.len();
    }

    fn reschedule(&mut self, client: usize) {
        let c = &self.clients[client];
        let Some(local) = c.engine.next_wakeup() else {
            return;
        };
        let mut at = us_of_ms(local - c.skew_ms).max(self.now);
        if c.last_poll_us.is_some_and(|p| at <= p) {
            at = c.last_poll_us.unwrap_or(0) + 1;
        }
        if c.wake_at == Some(at) {
            return;
        }
        let c = &mut self.clients[client];
        c.wake_token += 1;
        c.wake_at = Some(at);
        let token = c.wake_token;
        self.push(at, Ev::Wake { client, token });
    }

    fn sever(&mut self, client: usize, outage_us: u64) {
        let Some(conn) = self.clients[client].conn.take() else {
            return;
        };
        let pid = self.clients[client].performer_id;
        self.report.links.push(LinkEvent {
            performer_id: pid,
            at_us: self.now,
            kind: LinkEventKind::Severed,
        });
        let out = self.conductor.disconnect(conn, self.server_ms());
        self.server_out(out);
        let local = self.local_ms(client);
        let out = self.clients[client].engine.on_disconnect(local);
        self.drive(client, out);
        let until = self.now + outage_us;
        self.clients[client].outage_until_us = until;
        let retry = self.now + us_of_ms(self.config.reconnect_interval_ms);
        self.push(retry, Ev::Connect(client));
    }

    fn connect(&mut self, client: usize) {
        if self.clients[client].conn.is_some() || self.clients[client].engine.is_aborted() {
            return;
        }
        if self.now < self.clients[client].outage_until_us {
            let retry = self.now + us_of_ms(self.config.reconnect_interval_ms);
            self.push(retry, Ev::Connect(client));
            return;
        }
        let conn = self.next_conn;
        self.next_conn += 1;
        let c = &mut self.clients[client];
        c.conn = Some(conn);
        c.up_last_us = self.now;
        c.down_last_us = self.now;
        if c.ever_connected {
            let pid = c.performer_id;
            self.report.links.push(LinkEvent {
                performer_id: pid,
                at_us: self.now,
                kind: LinkEventKind::Connected,
            });
        }
        self.clients[client].ever_connected = true;
        self.conductor.connect(conn);
        let local = self.local_ms(client);
        let out = self.clients[client].engine.connect(local);
        self.drive(client, out);
    }

    fn step(&mut self, q: Queued) {
        self.now = q.at;
        match q.ev {
            Ev::Connect(c) => self.connect(c),
            Ev::ToServer {
                client,
                conn,
                frame,
            } => {
                if self.clients[client].conn != Some(conn) {
                    return;
                }
                match decode_text(&frame) {
                    Ok(msg) => {
                        let out = self.conductor.receive(conn, msg, self.server_ms());
                        self.server_out(out);
                    }
                    Err(e) => log::warn!("event=bad_frame from=client{client} reason=\"{e}\""),
                }
            }
            Ev::ToClient {
                client,
                conn,
                frame,
            } => {
                if self.clients[client].conn != Some(conn) {
                    return;
                }
                match decode_text(&frame) {
                    Ok(msg) => {
                        let local = self.local_ms(client);
                        let out = self.clients[client].engine.on_message(msg, local);
                        self.drive(client, out);
                    }
                    Err(e) => log::warn!("event=bad_frame to=client{client} reason=\"{e}\""),
                }
            }
            Ev::Wake { client, token } => {
                if self.clients[client].wake_token != token {
                    return;
                }
                self.clients[client].wake_at = None;
                self.clients[client].last_poll_us = Some(self.now);
                let local = self.local_ms(client);
                let out = self.clients[client].engine.poll(local);
                self.drive(client, out);
            }
            Ev::GenDone {
                client,
                job,
                result,
            } => {
                let local = self.local_ms(client);
                let out = self.clients[client]
                    .engine
                    .on_generation_complete(job, result, local);
                let open = self.clients[client].open_freeze;
                if let Some((id, start)) = open {
                    if id == job {
                        self.clients[client].open_freeze = None;
                        let records = self.clients[client].engine.freeze_records();
                        if records.len() > self.clients[client].freezes_seen {
                            let record = *records.last().expect("non-empty");
                            self.clients[client].freezes_seen = records.len();
                            self.report.freezes.push(FreezeSpan {
                                record,
                                start_us: start,
                                end_us: self.now,
                            });
                        }
                    }
                }
                self.drive(client, out);
            }
            Ev::Stop => {
                let out = self.conductor.stop(self.server_ms());
                self.server_out(out);
            }
            Ev::SeverAll => {
                let outage = us_of_ms(self.config.outage_ms);
                for c in 0..self.clients.len() {
                    self.sever(c, outage);
                }
            }
            Ev::Control { performer, setting } => {
                let out = self.conductor.route_control(
                    performer,
                    Message::Control {
                        performer_id: performer,
                        setting,
                    },
                );
                self.server_out(out);
            }
        }
    }

    fn run(mut self) -> SimReport {
        for c in 0..self.clients.len() {
            self.push((c as u64 + 1) * 3_000, Ev::Connect(c));
        }
        while let Some(q) = self.queue.pop() {
            let limit = match self.stop_at {
                Some(stop) => stop + DRAIN_US,
                None => GATHER_LIMIT_US,
            };
            if q.at > limit {
                break;
            }
            self.step(q);
        }
        self.report.tempo_steps = self.conductor.tempo_map().steps();
        for c in &self.clients {
            for w in c.engine.underruns() {
                self.report.underruns.push((c.performer_id, *w));
            }
        }
        self.report.recheck();
        self.report
    }
}

/// Start and end bars of the performance2 thinning instruction.
fn thinning_bars(duration: u32) -> (u32, u32) {
    (120.min(duration * 3 / 4), 150.min(duration * 15 / 16))
}

/// Runs a full simulation.
pub fn run(config: SimConfig) -> Result<SimReport, SimError> {
    Ok(World::new(config)?.run())
}

/// A single engine driven directly, with no conductor and no network: the
/// reference for the one-performer simulation.
pub fn run_standalone(config: &SimConfig) -> Result<Vec<SinkEvent>, SimError> {
    config.validate()?;
    if config.n_performers != 1 {
        return Err(SimError::Config(
            "standalone runs exactly one performer".into(),
        ));
    }
    let model = config
        .model
        .clone()
        .unwrap_or_else(|| GeneratorModel::default_with_seed(config.seed));
    let schedule = match &config.schedule_override {
        Some(o) => Some(
            StaggerSchedule::with_offsets(o.clone())
                .map_err(|e| SimError::Config(e.to_string()))?,
        ),
        None => None,
    };
    let mut engine = Performer::new(EngineConfig {
        name: "standalone".into(),
        seed: config.seed,
        latency: config.freeze_for(0),
        sink_mode: config.sink_mode,
        controls: config.controls,
        schedule_override: schedule,
    });
    let mut now = 0.0_f64;
    let mut inbox: Vec<Message> = Vec::new();
    let mut jobs: Vec<(f64, u64, Result<GenerationResult, GeneratorError>)> = Vec::new();
    let mut sink = Vec::new();
    let mut stop_at: Option<f64> = None;

    let handle = |out: Vec<EngineOutput>,
                  now: f64,
                  inbox: &mut Vec<Message>,
                  jobs: &mut Vec<(f64, u64, Result<GenerationResult, GeneratorError>)>,
                  sink: &mut Vec<SinkEvent>| {
        for o in out {
            match o {
                EngineOutput::Send(Message::ClockPing { client_send_ms }) => {
                    inbox.push(Message::ClockPong {
                        client_send_ms,
                        server_ms: now,
                    })
                }
                EngineOutput::Send(Message::Hello { .. }) => {
                    inbox.push(Message::Welcome {
                        performer_id: 0,
                        n_expected: 1,
                    });
                    inbox.push(Message::Seed {
                        progression: config.progression.clone(),
                        seed_melody: config.seed_melody.clone(),
                        tempo_bpm: config.tempo_bpm,
                        ppq: crate::music::PPQ,
                    });
                }
                EngineOutput::Send(Message::Ready { .. }) => inbox.push(Message::Start {
                    start_epoch_ms: now + crate::conductor::DEFAULT_LEAD_IN_MS,
                }),
                EngineOutput::Send(_) | EngineOutput::Volume(_) => {}
                EngineOutput::Sink(e) => sink.push(e),
                EngineOutput::Generate(job) => {
                    let r = job.run(&model);
                    let done = now + r.as_ref().map_or(0.0, |r| r.latency_ms);
                    jobs.push((done, job.id, r));
                }
                EngineOutput::Abort(_) => {}
            }
        }
    };

    let out = engine.connect(now);
    handle(out, now, &mut inbox, &mut jobs, &mut sink);
    loop {
        while !inbox.is_empty() {
            let msg = inbox.remove(0);
            if let Message::Start { start_epoch_ms } = msg {
                let map = TempoMap::new(start_epoch_ms, config.tempo_bpm)
                    .map_err(|e| SimError::Config(e.to_string()))?;
                stop_at = Some(map.tick_to_ms(bar_start(config.duration_bars)));
            }
            let out = engine.on_message(msg, now);
            handle(out, now, &mut inbox, &mut jobs, &mut sink);
        }
        let job_at = jobs.iter().map(|j| j.0).fold(f64::INFINITY, f64::min);
        let wake = engine.next_wakeup().unwrap_or(f64::INFINITY);
        let stop = stop_at.unwrap_or(f64::INFINITY);
        let next = job_at.min(wake).min(stop);
        if !next.is_finite() || (stop_at.is_none() && next > GATHER_LIMIT_US as f64 / 1000.0) {
            break;
        }
        now = next.max(now);
        if next == stop {
            let out = engine.on_message(Message::Stop {}, now);
            handle(out, now, &mut inbox, &mut jobs, &mut sink);
            break;
        } else if job_at <= wake {
            let i = jobs
                .iter()
                .position(|j| j.0 == job_at)
                .expect("job present");
            let (_, id, r) = jobs.remove(i);
            let out = engine.on_generation_complete(id, r, now);
            handle(out, now, &mut inbox, &mut jobs, &mut sink);
        } else {
            let out = engine.poll(now);
            handle(out, now, &mut inbox, &mut jobs, &mut sink);
        }
    }
    Ok(sink)
}
