//! Performer engine: the client side of a session.
//!
//! [`Performer`] runs the handshake, keeps the double-buffered playback
//! windows, applies live controls, schedules staggered regeneration and turns
//! buffered notes into [`SinkEvent`]s. It performs no I/O and reads no clock.
//! Drivers pass the local time in ms to every call, deliver the returned
//! [`EngineOutput`]s, run each [`GenerationJob`] and report its completion,
//! and call [`Performer::poll`] again at [`Performer::next_wakeup`].
//!
//! Windows are global: window `w` covers bars `[16w, 16w + 16)` for every
//! performer. The deadline at bar `offset + 16k` generates window `k + 1`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::generator::{
    generate_continuation, GenerationResult, GeneratorError, LatencyModel, MelodyGenerator,
    SessionRng, Temperature,
};
use crate::music::{
    bar_of, bar_start, ceil_to_grid, slice_last_bars, transpose_pitch, ChordProgression, NoteEvent,
    NoteSequence, TempoMap, Tick, SIXTEENTH_TICKS, WINDOW_BARS, WINDOW_TICKS,
};
use crate::protocol::{
    handshake_step, validate_control, ClockEstimate, ClockSample, ClockSync, ControlSetting,
    EngagementMode, HandshakeAction, HandshakeInput, HandshakeState, Message, PlanInstruction,
    Role,
};
use crate::stagger::{
    build_schedule, prune_frozen_span, reinsertion_tick, FreezeRecord, StaggerSchedule,
};

pub const PING_BURST: usize = 5;
pub const PING_INTERVAL_MS: f64 = 30_000.0;
pub const PING_TIMEOUT_MS: f64 = 5_000.0;
pub const FADE_MS: f64 = 500.0;
const LATENCY_EMA_ALPHA: f64 = 0.5;
const CLOCK_WINDOW: usize = 15;

/// Whether a generation stalls note emission while it runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SinkMode {
    #[default]
    NonBlocking,
    Blocking,
}

impl fmt::Display for SinkMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SinkMode::NonBlocking => "non-blocking",
            SinkMode::Blocking => "blocking",
        })
    }
}

impl FromStr for SinkMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "non-blocking" | "nonblocking" => Ok(SinkMode::NonBlocking),
            "blocking" => Ok(SinkMode::Blocking),
            _ => Err(format!("unknown sink mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteKind {
    NoteOn,
    NoteOff,
}

impl fmt::Display for NoteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoteKind::NoteOn => "note_on",
            NoteKind::NoteOff => "note_off",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Model,
    Manual,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Model => "model",
            Origin::Manual => "manual",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SinkEvent {
    pub kind: NoteKind,
    pub pitch: u8,
    pub velocity: u8,
    pub at_tick: Tick,
    pub origin: Origin,
}

impl SinkEvent {
    /// `tick,kind,pitch,velocity`
    pub fn log_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.at_tick, self.kind, self.pitch, self.velocity
        )
    }
}

/// Gain envelope for the sink: ramp linearly to `target` over `ramp_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeCommand {
    pub at_tick: Tick,
    pub target: f64,
    pub ramp_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub temperature: Temperature,
    pub transpose_semitones: i32,
    pub volume: f64,
    pub mode: EngagementMode,
    pub auto_fade_enabled: bool,
}

impl Default for ControlState {
    fn default() -> Self {
        ControlState {
            temperature: Temperature::default(),
            transpose_semitones: 0,
            volume: 1.0,
            mode: EngagementMode::Auto,
            auto_fade_enabled: false,
        }
    }
}

impl ControlState {
    /// Applies one setting; out-of-range values leave the state unchanged.
    pub fn apply(&mut self, setting: ControlSetting) -> Result<(), String> {
        validate_control(&setting)?;
        match setting {
            ControlSetting::Temperature(t) => {
                self.temperature = Temperature::new(t).map_err(|e| e.to_string())?
            }
            ControlSetting::Transpose(k) => self.transpose_semitones = k,
            ControlSetting::Volume(v) => self.volume = v,
            ControlSetting::Mode(m) => self.mode = m,
            ControlSetting::AutoFade(on) => self.auto_fade_enabled = on,
        }
        Ok(())
    }

    /// The current value of the field `like` refers to.
    pub fn value_of(&self, like: &ControlSetting) -> ControlSetting {
        match like {
            ControlSetting::Temperature(_) => ControlSetting::Temperature(self.temperature.value()),
            ControlSetting::Transpose(_) => ControlSetting::Transpose(self.transpose_semitones),
            ControlSetting::Volume(_) => ControlSetting::Volume(self.volume),
            ControlSetting::Mode(_) => ControlSetting::Mode(self.mode),
            ControlSetting::AutoFade(_) => ControlSetting::AutoFade(self.auto_fade_enabled),
        }
    }

    pub fn scale_velocity(&self, velocity: u8) -> u8 {
        (velocity as f64 * self.volume).round().clamp(0.0, 127.0) as u8
    }
}

/// One generation request. Self-contained so a driver can run it on another
/// thread; the RNG stream is fixed at issue time.
#[derive(Debug, Clone)]
pub struct GenerationJob {
    pub id: u64,
    pub window: u32,
    pub prev: NoteSequence,
    pub progression: ChordProgression,
    pub temperature: Temperature,
    pub latency: LatencyModel,
    /// Emission is frozen until this job completes.
    pub blocking: bool,
    rng: SessionRng,
}

impl GenerationJob {
    pub fn start_bar(&self) -> u32 {
        self.window * WINDOW_BARS
    }

    pub fn run(&self, generator: &dyn MelodyGenerator) -> Result<GenerationResult, GeneratorError> {
        let mut rng = self.rng.clone();
        generate_continuation(
            generator,
            &self.prev,
            &self.progression,
            self.start_bar(),
            self.temperature,
            &self.latency,
            &mut rng,
        )
    }
}

#[derive(Debug, Clone)]
pub enum EngineOutput {
    Send(Message),
    Sink(SinkEvent),
    Volume(VolumeCommand),
    Generate(Box<GenerationJob>),
    /// The session cannot continue; the driver should close the connection.
    Abort(String),
}

/// Generated windows keyed by window index, with the playhead window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlaybackBuffer {
    windows: BTreeMap<u32, NoteSequence>,
    window_start_bar: u32,
}

impl PlaybackBuffer {
    pub fn window_start_bar(&self) -> u32 {
        self.window_start_bar
    }

    fn current_index(&self) -> u32 {
        self.window_start_bar / WINDOW_BARS
    }

    pub fn current(&self) -> Option<&NoteSequence> {
        self.windows.get(&self.current_index())
    }

    pub fn next(&self) -> Option<&NoteSequence> {
        self.windows.get(&(self.current_index() + 1))
    }

    pub fn contains(&self, window: u32) -> bool {
        self.windows.contains_key(&window)
    }

    /// Stores a window; windows behind the playhead are refused.
    pub fn install(&mut self, window: u32, seq: NoteSequence) -> bool {
        if window < self.current_index() {
            return false;
        }
        self.windows.insert(window, seq);
        true
    }

    /// Moves the playhead to the window containing `tick`. Returns the new
    /// window index if it changed and has no buffer.
    pub fn advance_to(&mut self, tick: Tick) -> Option<u32> {
        let target = bar_of(tick) / WINDOW_BARS;
        if target <= self.current_index() {
            return None;
        }
        self.window_start_bar = target * WINDOW_BARS;
        self.windows.retain(|w, _| *w >= target);
        (!self.windows.contains_key(&target)).then_some(target)
    }

    /// Onsets in `[from, to]` as absolute ticks, in order.
    pub fn onsets_in(&self, from: Tick, to: Tick) -> Vec<(Tick, NoteEvent)> {
        let mut out = Vec::new();
        if to < from {
            return out;
        }
        let first = bar_of(from) / WINDOW_BARS;
        let last = bar_of(to) / WINDOW_BARS;
        for (w, seq) in self.windows.range(first..=last) {
            let base = bar_start(w * WINDOW_BARS);
            let start = seq.first_at_or_after(from.saturating_sub(base));
            for e in &seq.events()[start..] {
                let t = base + e.onset;
                if t > to {
                    break;
                }
                out.push((t, *e));
            }
        }
        out
    }

    pub fn next_onset_at_or_after(&self, tick: Tick) -> Option<Tick> {
        let first = bar_of(tick) / WINDOW_BARS;
        self.windows.range(first..).find_map(|(w, seq)| {
            let base = bar_start(w * WINDOW_BARS);
            let i = seq.first_at_or_after(tick.saturating_sub(base));
            seq.events().get(i).map(|e| base + e.onset)
        })
    }

    /// Applies [`prune_frozen_span`] to every window the span touches.
    pub fn prune(&mut self, freeze_start: Tick, resume: Tick) {
        for (w, seq) in self.windows.iter_mut() {
            let base = bar_start(w * WINDOW_BARS);
            let lo = freeze_start.saturating_sub(base).min(WINDOW_TICKS);
            let hi = resume.saturating_sub(base).min(WINDOW_TICKS);
            if lo < hi {
                *seq = prune_frozen_span(seq, lo, hi).0;
            }
        }
    }

    fn clear(&mut self) {
        *self = PlaybackBuffer::default();
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub name: String,
    /// Seed for generation RNG streams.
    pub seed: u64,
    pub latency: LatencyModel,
    pub sink_mode: SinkMode,
    pub controls: ControlState,
    /// Replaces the even stagger offsets (fault injection).
    pub schedule_override: Option<StaggerSchedule>,
}

impl EngineConfig {
    pub fn new(name: impl Into<String>) -> Self {
        EngineConfig {
            name: name.into(),
            seed: 0,
            latency: LatencyModel::default(),
            sink_mode: SinkMode::default(),
            controls: ControlState::default(),
            schedule_override: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum JobKind {
    Initial,
    Regular,
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    kind: JobKind,
    window: u32,
    started_local: f64,
}

#[derive(Debug, Clone, Copy)]
struct Freeze {
    job_id: u64,
    start_tick: Tick,
    started_local: f64,
}

#[derive(Debug, Clone, Copy)]
struct ActiveNote {
    /// Pitch as emitted, after transposition.
    pitch: u8,
    /// Pitch recorded in the played history.
    source_pitch: u8,
    velocity: u8,
    onset: Tick,
    end: Tick,
    origin: Origin,
}

#[derive(Debug, Clone)]
enum Deferred {
    Message(Message),
    Disconnect,
}

/// A resumption after a rejoin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResyncRecord {
    pub resume_tick: Tick,
    pub server_tick: Tick,
}

#[derive(Debug)]
pub struct Performer {
    config: EngineConfig,
    controls: ControlState,
    hs: HandshakeState,
    connected: bool,
    rejoining: bool,
    aborted: bool,
    performer_id: Option<u32>,
    n_expected: u32,
    schedule: Option<StaggerSchedule>,
    progression: Option<ChordProgression>,
    plan: Vec<PlanInstruction>,
    tempo: TempoMap,
    started: bool,
    clock: ClockSync,
    ping_outstanding: Option<f64>,
    burst_remaining: usize,
    next_ping_local: Option<f64>,
    buffer: PlaybackBuffer,
    init_latencies: Vec<f64>,
    init_done: bool,
    next_job_id: u64,
    in_flight: BTreeMap<u64, InFlight>,
    predicted_latency_ms: f64,
    deadline_k: u32,
    next_tick: Tick,
    halted: bool,
    active: Vec<ActiveNote>,
    /// Played notes on a timeline shifted by one window, so the seed melody
    /// occupies the window before tick 0.
    history: Vec<NoteEvent>,
    freeze: Option<Freeze>,
    deferred: VecDeque<Deferred>,
    freezes: Vec<FreezeRecord>,
    resyncs: Vec<ResyncRecord>,
    underruns: Vec<u32>,
    fade_issued_for: Option<u32>,
    fade_active: bool,
}

impl Performer {
    pub fn new(config: EngineConfig) -> Self {
        let controls = config.controls;
        let predicted = config.latency.nominal_ms();
        Performer {
            config,
            controls,
            hs: HandshakeState::Connected,
            connected: false,
            rejoining: false,
            aborted: false,
            performer_id: None,
            n_expected: 0,
            schedule: None,
            progression: None,
            plan: Vec::new(),
            tempo: TempoMap::new(0.0, 120.0).expect("default tempo is valid"),
            started: false,
            clock: ClockSync::new(CLOCK_WINDOW),
            ping_outstanding: None,
            burst_remaining: 0,
            next_ping_local: None,
            buffer: PlaybackBuffer::default(),
            init_latencies: Vec::new(),
            init_done: false,
            next_job_id: 0,
            in_flight: BTreeMap::new(),
            predicted_latency_ms: predicted,
            deadline_k: 1,
            next_tick: 0,
            halted: true,
            active: Vec::new(),
            history: Vec::new(),
            freeze: None,
            deferred: VecDeque::new(),
            freezes: Vec::new(),
            resyncs: Vec::new(),
            underruns: Vec::new(),
            fade_issued_for: None,
            fade_active: false,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    fn who(&self) -> String {
        match self.performer_id {
            Some(id) => format!("performer_id={id}"),
            None => format!("performer_id=none name={}", self.config.name),
        }
    }

    pub fn performer_id(&self) -> Option<u32> {
        self.performer_id
    }

    pub fn handshake_state(&self) -> HandshakeState {
        self.hs
    }

    pub fn controls(&self) -> &ControlState {
        &self.controls
    }

    pub fn buffer(&self) -> &PlaybackBuffer {
        &self.buffer
    }

    pub fn plan(&self) -> &[PlanInstruction] {
        &self.plan
    }

    pub fn progression(&self) -> Option<&ChordProgression> {
        self.progression.as_ref()
    }

    pub fn clock_estimate(&self) -> Option<&ClockEstimate> {
        self.clock.estimate()
    }

    pub fn tempo_map(&self) -> &TempoMap {
        &self.tempo
    }

    pub fn schedule(&self) -> Option<&StaggerSchedule> {
        self.schedule.as_ref()
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    pub fn is_frozen(&self) -> bool {
        self.freeze.is_some()
    }

    /// Not emitting: before Start, disconnected, stopped or aborted.
    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted
    }

    pub fn freeze_records(&self) -> &[FreezeRecord] {
        &self.freezes
    }

    pub fn resyncs(&self) -> &[ResyncRecord] {
        &self.resyncs
    }

    /// Windows the playhead entered before they were generated.
    pub fn underruns(&self) -> &[u32] {
        &self.underruns
    }

    pub fn predicted_latency_ms(&self) -> f64 {
        self.predicted_latency_ms
    }

    pub fn sounding_notes(&self) -> usize {
        self.active.len()
    }

    /// Server tick at local time `now`, once the start epoch is known.
    pub fn current_tick(&self, now: f64) -> Option<Tick> {
        if !self.started {
            return None;
        }
        let est = self.clock.estimate()?;
        self.tempo.ms_to_tick(est.server_ms(now)).ok()
    }

    fn tick_to_local(&self, tick: Tick) -> Option<f64> {
        Some(self.clock.estimate()?.local_ms(self.tempo.tick_to_ms(tick)))
    }

    /// Tick for events emitted "now": never behind anything already emitted.
    fn emit_tick(&self, now: f64) -> Tick {
        self.current_tick(now)
            .unwrap_or(0)
            .max(self.next_tick.saturating_sub(1))
    }

    fn send(&self, out: &mut Vec<EngineOutput>, msg: Message) {
        if self.connected {
            out.push(EngineOutput::Send(msg));
        } else {
            debug!("event=send_dropped type={} reason=disconnected", msg.tag());
        }
    }

    fn reset_session(&mut self) {
        self.hs = HandshakeState::Connected;
        self.performer_id = None;
        self.schedule = None;
        self.progression = None;
        self.started = false;
        self.buffer.clear();
        self.init_latencies.clear();
        self.init_done = false;
        self.in_flight.clear();
        self.halted = true;
        self.active.clear();
        self.history.clear();
        self.deadline_k = 1;
        self.next_tick = 0;
    }

    pub fn connect(&mut self, _now: f64) -> Vec<EngineOutput> {
        let mut out = Vec::new();
        self.connected = true;
        self.ping_outstanding = None;
        self.burst_remaining = 0;
        match self.performer_id {
            Some(id) if self.hs == HandshakeState::Running && !self.aborted => {
                self.rejoining = true;
                info!("event=rejoin_request performer_id={id}");
                self.send(&mut out, Message::Rejoin { performer_id: id });
            }
            _ => {
                self.reset_session();
                self.aborted = false;
                self.send(
                    &mut out,
                    Message::Hello {
                        client_name: self.config.name.clone(),
                        role: Role::Performer,
                    },
                );
            }
        }
        out
    }

    /// Connection lost: stop emitting and silence everything sounding. The
    /// engine does not free-run; it waits for a rejoin.
    pub fn on_disconnect(&mut self, now: f64) -> Vec<EngineOutput> {
        if self.freeze.is_some() {
            self.deferred.push_back(Deferred::Disconnect);
            return Vec::new();
        }
        let mut out = Vec::new();
        self.connected = false;
        self.rejoining = false;
        self.ping_outstanding = None;
        self.burst_remaining = 0;
        match self.hs {
            HandshakeState::Running => {
                self.halt(now, &mut out);
                info!(
                    "event=disconnect {} tick={} halted=true",
                    self.who(),
                    self.emit_tick(now)
                );
            }
            HandshakeState::Stopped => {}
            _ => self.reset_session(),
        }
        out
    }

    fn halt(&mut self, now: f64, out: &mut Vec<EngineOutput>) {
        let at = self.emit_tick(now);
        self.force_release(|_| true, at, at, out);
        self.halted = true;
    }

    fn abort(&mut self, reason: String, now: f64, out: &mut Vec<EngineOutput>) {
        warn!("event=abort {} reason=\"{reason}\"", self.who());
        self.halt(now, out);
        if let Some(id) = self.performer_id {
            self.send(out, Message::Bye { performer_id: id });
        }
        self.aborted = true;
        self.hs = HandshakeState::Stopped;
        self.in_flight.clear();
        out.push(EngineOutput::Abort(reason));
    }

    fn send_ping(&mut self, now: f64, out: &mut Vec<EngineOutput>) {
        self.burst_remaining = self.burst_remaining.saturating_sub(1);
        self.ping_outstanding = Some(now);
        self.send(
            out,
            Message::ClockPing {
                client_send_ms: now,
            },
        );
    }

    fn start_burst(&mut self, now: f64, out: &mut Vec<EngineOutput>) {
        self.burst_remaining = PING_BURST;
        self.send_ping(now, out);
    }

    fn maybe_ping(&mut self, now: f64, out: &mut Vec<EngineOutput>) {
        if !self.connected || self.performer_id.is_none() || self.hs == HandshakeState::Stopped {
            return;
        }
        match self.ping_outstanding {
            Some(since) if now - since >= PING_TIMEOUT_MS => {
                self.burst_remaining = self.burst_remaining.max(1);
                self.send_ping(now, out);
            }
            Some(_) => {}
            None => {
                if self.burst_remaining == 0 && self.next_ping_local.is_some_and(|t| now >= t) {
                    self.start_burst(now, out);
                }
            }
        }
    }

    pub fn on_message(&mut self, msg: Message, now: f64) -> Vec<EngineOutput> {
        if self.freeze.is_some() {
            self.deferred.push_back(Deferred::Message(msg));
            return Vec::new();
        }
        let mut out = Vec::new();
        if self.aborted {
            return out;
        }
        match msg {
            Message::ClockPong {
                client_send_ms,
                server_ms,
            } => {
                self.clock.record(ClockSample {
                    client_send_ms,
                    server_ms,
                    client_recv_ms: now,
                });
                self.ping_outstanding = None;
                if self.burst_remaining > 0 {
                    self.send_ping(now, &mut out);
                } else {
                    self.next_ping_local = Some(now + PING_INTERVAL_MS);
                }
                self.maybe_ready(&mut out);
            }
            Message::Welcome { performer_id, .. } if self.rejoining => {
                if Some(performer_id) != self.performer_id {
                    self.abort(
                        format!(
                            "rejoined as {performer_id}, expected {:?}",
                            self.performer_id
                        ),
                        now,
                        &mut out,
                    );
                } else {
                    self.start_burst(now, &mut out);
                }
            }
            Message::Seed { progression, .. } if self.rejoining => {
                self.progression = Some(progression)
            }
            Message::Resync {
                start_epoch_ms,
                tempo_changes,
                server_tick,
                ..
            } if self.rejoining => {
                self.resume_after_rejoin(start_epoch_ms, &tempo_changes, server_tick, now)
            }
            Message::Seed {
                progression,
                seed_melody,
                tempo_bpm,
                ..
            } if matches!(self.hs, HandshakeState::Seeded | HandshakeState::ModelReady) => {
                // new progression before the start: redo the initial windows
                info!("event=reseed {}", self.who());
                self.hs = HandshakeState::Seeded;
                self.begin_initial_generation(progression, seed_melody, tempo_bpm, now, &mut out);
            }
            Message::TempoChange {
                tempo_bpm,
                effective_bar,
            } => {
                if let Err(e) = self.tempo.set_tempo_at_bar(effective_bar, tempo_bpm) {
                    warn!("event=tempo_ignored reason=\"{e}\"");
                }
            }
            Message::Plan { instructions } => self.plan = instructions,
            Message::Control {
                performer_id,
                setting,
            } => {
                if Some(performer_id) != self.performer_id {
                    warn!(
                        "event=control_misrouted target={performer_id} self={:?}",
                        self.performer_id
                    );
                } else {
                    let echo = match self.handle_control(setting, now) {
                        Ok(events) => {
                            out.extend(events);
                            setting
                        }
                        Err(reason) => {
                            warn!("event=control_rejected reason=\"{reason}\"");
                            self.controls.value_of(&setting)
                        }
                    };
                    self.send(
                        &mut out,
                        Message::Control {
                            performer_id,
                            setting: echo,
                        },
                    );
                }
            }
            Message::Reject { reason } => {
                self.abort(format!("rejected by server: {reason}"), now, &mut out)
            }
            msg => {
                let (state, actions) = handshake_step(self.hs, HandshakeInput::Message(&msg));
                self.hs = state;
                for action in actions {
                    self.apply_action(action, &msg, now, &mut out);
                }
                if let Message::Welcome {
                    performer_id,
                    n_expected,
                } = msg
                {
                    if self.hs == HandshakeState::Welcomed && self.performer_id.is_none() {
                        self.on_welcome(performer_id, n_expected, now, &mut out);
                    }
                }
            }
        }
        out
    }

    fn apply_action(
        &mut self,
        action: HandshakeAction,
        msg: &Message,
        now: f64,
        out: &mut Vec<EngineOutput>,
    ) {
        match action {
            HandshakeAction::BeginInitialGeneration => {
                if let Message::Seed {
                    progression,
                    seed_melody,
                    tempo_bpm,
                    ..
                } = msg
                {
                    self.begin_initial_generation(
                        progression.clone(),
                        seed_melody.clone(),
                        *tempo_bpm,
                        now,
                        out,
                    );
                }
            }
            HandshakeAction::SendReady => {
                if let Some(id) = self.performer_id {
                    info!("event=ready performer_id={id}");
                    self.send(out, Message::Ready { performer_id: id });
                }
            }
            HandshakeAction::BeginPlayback { start_epoch_ms } => {
                match TempoMap::from_steps(start_epoch_ms, &self.tempo.steps()) {
                    Ok(map) => self.tempo = map,
                    Err(e) => return self.abort(format!("bad tempo map: {e}"), now, out),
                }
                self.started = true;
                self.halted = false;
                self.next_tick = 0;
                self.deadline_k = 1;
                info!(
                    "event=start {} start_epoch_ms={start_epoch_ms:.3}",
                    self.who()
                );
            }
            HandshakeAction::Halt => {
                self.halt(now, out);
                self.in_flight.retain(|_, j| j.kind == JobKind::Initial);
                info!("event=stop {}", self.who());
            }
            HandshakeAction::ProtocolViolation { .. } => {}
        }
    }

    fn on_welcome(
        &mut self,
        performer_id: u32,
        n_expected: u32,
        now: f64,
        out: &mut Vec<EngineOutput>,
    ) {
        let schedule = match &self.config.schedule_override {
            Some(s) => Ok(s.clone()),
            None => build_schedule(n_expected),
        };
        match schedule {
            Ok(s) if performer_id < s.n_performers() => {
                self.performer_id = Some(performer_id);
                self.n_expected = n_expected;
                self.schedule = Some(s);
                info!("event=welcome performer_id={performer_id} n_expected={n_expected}");
                self.start_burst(now, out);
            }
            Ok(_) => self.abort(
                format!("performer {performer_id} has no stagger slot"),
                now,
                out,
            ),
            Err(e) => self.abort(e.to_string(), now, out),
        }
    }

    fn begin_initial_generation(
        &mut self,
        progression: ChordProgression,
        seed_melody: NoteSequence,
        tempo_bpm: f64,
        now: f64,
        out: &mut Vec<EngineOutput>,
    ) {
        match TempoMap::new(0.0, tempo_bpm) {
            Ok(map) => self.tempo = map,
            Err(e) => return self.abort(format!("bad seed tempo: {e}"), now, out),
        }
        let seed = if seed_melody.length_bars() > WINDOW_BARS {
            slice_last_bars(&seed_melody, WINDOW_BARS, seed_melody.length_bars())
        } else {
            seed_melody
        };
        let shift = WINDOW_TICKS - seed.end_tick();
        self.history = seed
            .events()
            .iter()
            .map(|e| NoteEvent {
                onset: e.onset + shift,
                ..*e
            })
            .collect();
        self.progression = Some(progression);
        self.buffer.clear();
        self.in_flight.clear();
        self.init_latencies.clear();
        self.init_done = false;
        self.issue_job(JobKind::Initial, 0, seed, now, out);
    }

    fn issue_job(
        &mut self,
        kind: JobKind,
        window: u32,
        prev: NoteSequence,
        now: f64,
        out: &mut Vec<EngineOutput>,
    ) -> u64 {
        let id = self.next_job_id;
        self.next_job_id += 1;
        let mut rng = SessionRng::seed_from_u64(self.config.seed);
        rng.set_stream(((self.performer_id.unwrap_or(0) as u64) << 32) | id);
        self.in_flight.insert(
            id,
            InFlight {
                kind,
                window,
                started_local: now,
            },
        );
        out.push(EngineOutput::Generate(Box::new(GenerationJob {
            id,
            window,
            prev,
            progression: self.progression.clone().unwrap_or_else(default_progression),
            temperature: self.controls.temperature,
            latency: self.config.latency,
            blocking: kind == JobKind::Regular && self.config.sink_mode == SinkMode::Blocking,
            rng,
        })));
        id
    }

    fn maybe_ready(&mut self, out: &mut Vec<EngineOutput>) {
        if self.hs == HandshakeState::Seeded && self.init_done && self.clock.estimate().is_some() {
            let (state, actions) = handshake_step(self.hs, HandshakeInput::ModelReady);
            self.hs = state;
            if actions.contains(&HandshakeAction::SendReady) {
                if let Some(id) = self.performer_id {
                    info!("event=ready performer_id={id}");
                    self.send(out, Message::Ready { performer_id: id });
                }
            }
        }
    }

    fn resume_after_rejoin(
        &mut self,
        start_epoch_ms: f64,
        steps: &[crate::music::TempoStep],
        server_tick: Tick,
        now: f64,
    ) {
        match TempoMap::from_steps(start_epoch_ms, steps) {
            Ok(map) => self.tempo = map,
            Err(e) => warn!("event=resync_tempo_ignored reason=\"{e}\""),
        }
        self.started = true;
        let now_tick = self.current_tick(now).unwrap_or(server_tick);
        let resume = ceil_to_grid(now_tick.max(self.next_tick), SIXTEENTH_TICKS);
        self.next_tick = resume;
        self.buffer.advance_to(resume);
        self.halted = false;
        self.rejoining = false;
        self.resyncs.push(ResyncRecord {
            resume_tick: resume,
            server_tick,
        });
        info!(
            "event=resync {} server_tick={server_tick} resume_tick={resume}",
            self.who()
        );
    }

    /// Applies a live control. Mode switches take effect at once, releasing
    /// notes from the source that was just muted.
    pub fn handle_control(
        &mut self,
        setting: ControlSetting,
        now: f64,
    ) -> Result<Vec<EngineOutput>, String> {
        let before = self.controls.mode;
        self.controls.apply(setting)?;
        let mut out = Vec::new();
        if let ControlSetting::Mode(mode) = setting {
            if mode != before {
                let at = self.emit_tick(now);
                match mode {
                    EngagementMode::Manual => {
                        self.force_release(|a| a.origin == Origin::Model, at, at, &mut out)
                    }
                    EngagementMode::Auto => {
                        self.force_release(|a| a.origin == Origin::Manual, at, at, &mut out)
                    }
                    EngagementMode::Hybrid => {}
                }
            }
        }
        info!("event=control {} setting={setting:?}", self.who());
        Ok(out)
    }

    /// A note from the performer's own keyboard. Ignored in Auto mode and
    /// whenever the engine is not emitting.
    pub fn manual_note_on(&mut self, pitch: u8, velocity: u8, now: f64) -> Vec<EngineOutput> {
        let mut out = Vec::new();
        if self.controls.mode == EngagementMode::Auto
            || self.halted
            || self.freeze.is_some()
            || pitch > 127
        {
            return out;
        }
        let Some(tick) = self.current_tick(now) else {
            return out;
        };
        self.emit_until(tick, &mut out);
        let velocity = self.controls.scale_velocity(velocity.min(127));
        if velocity == 0 {
            return out;
        }
        self.active.push(ActiveNote {
            pitch,
            source_pitch: pitch,
            velocity,
            onset: tick,
            end: Tick::MAX,
            origin: Origin::Manual,
        });
        out.push(EngineOutput::Sink(SinkEvent {
            kind: NoteKind::NoteOn,
            pitch,
            velocity,
            at_tick: tick,
            origin: Origin::Manual,
        }));
        out
    }

    pub fn manual_note_off(&mut self, pitch: u8, now: f64) -> Vec<EngineOutput> {
        let mut out = Vec::new();
        if let Some(i) = self
            .active
            .iter()
            .position(|a| a.origin == Origin::Manual && a.pitch == pitch)
        {
            let note = self.active.remove(i);
            let at = self.emit_tick(now);
            self.note_off(note, at, at, &mut out);
        }
        out
    }

    fn note_off(
        &mut self,
        note: ActiveNote,
        at: Tick,
        played_until: Tick,
        out: &mut Vec<EngineOutput>,
    ) {
        out.push(EngineOutput::Sink(SinkEvent {
            kind: NoteKind::NoteOff,
            pitch: note.pitch,
            velocity: 0,
            at_tick: at,
            origin: note.origin,
        }));
        let end = played_until.min(note.end).max(note.onset + 1);
        self.history.push(NoteEvent {
            pitch: note.source_pitch,
            onset: note.onset + WINDOW_TICKS,
            duration: end - note.onset,
            velocity: note.velocity,
        });
    }

    /// Note-offs at `at` for every sounding note matching `filter`.
    fn force_release(
        &mut self,
        filter: impl Fn(&ActiveNote) -> bool,
        at: Tick,
        played_until: Tick,
        out: &mut Vec<EngineOutput>,
    ) {
        let mut released = Vec::new();
        self.active.retain(|a| {
            if filter(a) {
                released.push(*a);
                false
            } else {
                true
            }
        });
        released.sort_by_key(|a| a.pitch);
        for a in released {
            self.note_off(a, at, played_until, out);
        }
    }

    fn release_due(&mut self, tick: Tick, out: &mut Vec<EngineOutput>) {
        let mut due = Vec::new();
        self.active.retain(|a| {
            if a.end <= tick {
                due.push(*a);
                false
            } else {
                true
            }
        });
        due.sort_by_key(|a| (a.end, a.pitch));
        for a in due {
            self.note_off(a, a.end, a.end, out);
        }
    }

    fn model_note_on(&mut self, tick: Tick, e: NoteEvent, out: &mut Vec<EngineOutput>) {
        if self.controls.mode == EngagementMode::Manual {
            return;
        }
        let velocity = self.controls.scale_velocity(e.velocity);
        if velocity == 0 {
            return;
        }
        let pitch = transpose_pitch(e.pitch, self.controls.transpose_semitones);
        self.active.push(ActiveNote {
            pitch,
            source_pitch: e.pitch,
            velocity: e.velocity,
            onset: tick,
            end: tick + e.duration,
            origin: Origin::Model,
        });
        out.push(EngineOutput::Sink(SinkEvent {
            kind: NoteKind::NoteOn,
            pitch,
            velocity,
            at_tick: tick,
            origin: Origin::Model,
        }));
    }

    /// Emits every event in `[next_tick, end]`, note-offs before note-ons at
    /// equal ticks.
    fn emit_until(&mut self, end: Tick, out: &mut Vec<EngineOutput>) {
        if self.halted || !self.started || end < self.next_tick {
            return;
        }
        for (tick, e) in self.buffer.onsets_in(self.next_tick, end) {
            self.release_due(tick, out);
            self.model_note_on(tick, e, out);
        }
        self.release_due(end, out);
        if let Some(w) = self.buffer.advance_to(end) {
            warn!("event=buffer_underrun {} window={w}", self.who());
            self.underruns.push(w);
        }
        self.next_tick = end + 1;
    }

    fn regular_in_flight(&self) -> bool {
        self.in_flight.values().any(|j| j.kind == JobKind::Regular)
    }

    fn deadline_bar(&self) -> Option<u32> {
        let offset = self.schedule.as_ref()?.offset(self.performer_id?).ok()?;
        Some(offset + WINDOW_BARS * self.deadline_k)
    }

    /// Server ms at which the next regeneration should begin.
    fn trigger_server_ms(&self) -> Option<f64> {
        if self.hs != HandshakeState::Running
            || !self.started
            || self.regular_in_flight()
            || self.aborted
        {
            return None;
        }
        let d = self.deadline_bar()?;
        Some(self.tempo.tick_to_ms(bar_start(d)) - self.predicted_latency_ms)
    }

    /// Local ms of the next regeneration trigger.
    pub fn next_generation_local_ms(&self) -> Option<f64> {
        let server = self.trigger_server_ms()?;
        Some(self.clock.estimate()?.local_ms(server))
    }

    fn skip_stale_deadlines(&mut self, now_tick: Tick) {
        while bar_start((self.deadline_k + 1) * WINDOW_BARS) <= now_tick {
            self.deadline_k += 1;
        }
    }

    /// The last 16 complete bars before `end_bar`, as played.
    fn played_slice(&self, end_bar: u32) -> NoteSequence {
        let end = bar_start(end_bar) + WINDOW_TICKS;
        let start = end - WINDOW_TICKS;
        let sounding = self.active.iter().map(|a| NoteEvent {
            pitch: a.source_pitch,
            onset: a.onset + WINDOW_TICKS,
            duration: a
                .end
                .min(end.saturating_sub(WINDOW_TICKS))
                .saturating_sub(a.onset)
                .max(1),
            velocity: a.velocity,
        });
        let events = self
            .history
            .iter()
            .copied()
            .chain(sounding)
            .filter(|e| e.onset >= start && e.onset < end)
            .map(|e| NoteEvent {
                onset: e.onset - start,
                duration: e.duration.min(end - e.onset),
                ..e
            })
            .collect();
        NoteSequence::from_unsorted(events, WINDOW_BARS).expect("slice lies inside one window")
    }

    fn trigger_generation(&mut self, now: f64, out: &mut Vec<EngineOutput>) {
        let Some(d) = self.deadline_bar() else {
            return;
        };
        let window = self.deadline_k + 1;
        self.deadline_k += 1;
        // input ends at the bar of the nominal trigger point, not the
        // observed one, so the input does not depend on clock jitter
        let nominal_ms = self.tempo.tick_to_ms(bar_start(d)) - self.predicted_latency_ms;
        let end_bar = self.tempo.ms_to_tick(nominal_ms).map(bar_of).unwrap_or(0);
        let prev = self.played_slice(end_bar);
        let keep_from = bar_start(end_bar.saturating_sub(WINDOW_BARS));
        self.history.retain(|e| e.onset >= keep_from);
        let id = self.issue_job(JobKind::Regular, window, prev, now, out);
        let freeze_start = self.next_tick;
        if let Some(pid) = self.performer_id {
            self.send(
                out,
                Message::GenStart {
                    performer_id: pid,
                    freeze_start_tick: freeze_start,
                },
            );
        }
        if self.config.sink_mode == SinkMode::Blocking {
            self.freeze = Some(Freeze {
                job_id: id,
                start_tick: freeze_start,
                started_local: now,
            });
        }
        info!(
            "event=gen_start {} deadline_bar={d} window={window} freeze_start_tick={freeze_start}",
            self.who()
        );
    }

    fn maybe_fade(&mut self, now: f64, out: &mut Vec<EngineOutput>) {
        if !self.controls.auto_fade_enabled
            || self.fade_active
            || self.fade_issued_for == Some(self.deadline_k)
        {
            return;
        }
        if let Some(at) = self.next_generation_local_ms() {
            if now >= at - FADE_MS {
                self.fade_issued_for = Some(self.deadline_k);
                self.fade_active = true;
                out.push(EngineOutput::Volume(VolumeCommand {
                    at_tick: self.emit_tick(now),
                    target: 0.0,
                    ramp_ms: (at - now).clamp(0.0, FADE_MS),
                }));
            }
        }
    }

    /// Advances playback, pings and regeneration to local time `now`.
    pub fn poll(&mut self, now: f64) -> Vec<EngineOutput> {
        let mut out = Vec::new();
        if self.freeze.is_some() || self.aborted {
            return out;
        }
        self.maybe_ping(now, &mut out);
        if self.hs != HandshakeState::Running || !self.started {
            return out;
        }
        let now_tick = self.current_tick(now);
        if let Some(tick) = now_tick {
            self.emit_until(tick, &mut out);
            if !self.regular_in_flight() {
                self.skip_stale_deadlines(tick);
            }
        }
        self.maybe_fade(now, &mut out);
        if self.next_generation_local_ms().is_some_and(|at| now >= at) {
            self.trigger_generation(now, &mut out);
        }
        out
    }

    /// Local ms at which [`Performer::poll`] next has work, if any.
    pub fn next_wakeup(&self) -> Option<f64> {
        if self.freeze.is_some() || self.aborted {
            return None;
        }
        let mut best: Option<f64> = None;
        let mut consider = |t: Option<f64>| {
            if let Some(t) = t {
                best = Some(best.map_or(t, |b: f64| b.min(t)));
            }
        };
        if self.connected && self.performer_id.is_some() && self.hs != HandshakeState::Stopped {
            match self.ping_outstanding {
                Some(since) => consider(Some(since + PING_TIMEOUT_MS)),
                None if self.burst_remaining == 0 => consider(self.next_ping_local),
                None => {}
            }
        }
        if self.hs == HandshakeState::Running && self.started {
            if !self.halted {
                let onset = self.buffer.next_onset_at_or_after(self.next_tick);
                let release = self
                    .active
                    .iter()
                    .map(|a| a.end)
                    .filter(|e| *e != Tick::MAX)
                    .min();
                let tick = match (onset, release) {
                    (Some(a), Some(b)) => Some(a.min(b.max(self.next_tick))),
                    (a, b) => a.or(b.map(|b| b.max(self.next_tick))),
                };
                consider(tick.and_then(|t| self.tick_to_local(t)));
            }
            let trigger = self.next_generation_local_ms();
            consider(trigger);
            if self.controls.auto_fade_enabled
                && !self.fade_active
                && self.fade_issued_for != Some(self.deadline_k)
            {
                consider(trigger.map(|t| t - FADE_MS));
            }
        }
        best
    }

    /// Reports a finished [`GenerationJob`]. Stale ids are ignored.
    pub fn on_generation_complete(
        &mut self,
        job_id: u64,
        result: Result<GenerationResult, GeneratorError>,
        now: f64,
    ) -> Vec<EngineOutput> {
        let mut out = Vec::new();
        let Some(job) = self.in_flight.remove(&job_id) else {
            debug!("event=stale_generation job={job_id}");
            return out;
        };
        let measured = (now - job.started_local).max(0.0);
        match job.kind {
            JobKind::Initial => match result {
                Ok(r) => {
                    self.init_latencies.push(measured);
                    self.buffer.install(job.window, r.sequence.clone());
                    if job.window == 0 {
                        self.issue_job(JobKind::Initial, 1, r.sequence, now, &mut out);
                    } else {
                        self.predicted_latency_ms = self.init_latencies.iter().sum::<f64>()
                            / self.init_latencies.len() as f64;
                        self.init_done = true;
                        self.maybe_ready(&mut out);
                    }
                }
                Err(e) => self.abort(format!("initial generation failed: {e}"), now, &mut out),
            },
            JobKind::Regular => {
                self.predicted_latency_ms = LATENCY_EMA_ALPHA * measured
                    + (1.0 - LATENCY_EMA_ALPHA) * self.predicted_latency_ms;
                match result {
                    Ok(r) => {
                        if !self.buffer.install(job.window, r.sequence) {
                            warn!("event=late_window {} window={}", self.who(), job.window);
                        }
                    }
                    Err(e) => warn!("event=generation_failed {} reason=\"{e}\"", self.who()),
                }
                if let Some(pid) = self.performer_id {
                    self.send(
                        &mut out,
                        Message::GenDone {
                            performer_id: pid,
                            latency_ms: measured,
                        },
                    );
                }
                if self.freeze.is_some_and(|f| f.job_id == job_id) {
                    self.recover(now, &mut out);
                }
                if self.fade_active {
                    self.fade_active = false;
                    out.push(EngineOutput::Volume(VolumeCommand {
                        at_tick: self.emit_tick(now),
                        target: 1.0,
                        ramp_ms: FADE_MS,
                    }));
                }
                info!(
                    "event=gen_done {} window={} latency_ms={measured:.1} predicted_ms={:.1}",
                    self.who(),
                    job.window,
                    self.predicted_latency_ms
                );
            }
        }
        out
    }

    /// Ends a blocking freeze: resumes at the grid tick the transport has
    /// reached and releases everything left sounding.
    fn recover(&mut self, now: f64, out: &mut Vec<EngineOutput>) {
        let Some(f) = self.freeze.take() else {
            return;
        };
        let freeze_ms = (now - f.started_local).max(0.0);
        if freeze_ms > 0.0 {
            let clock = self.tempo.clock_at_tick(f.start_tick);
            let resume = reinsertion_tick(f.start_tick, freeze_ms, &clock);
            self.buffer.prune(f.start_tick, resume);
            let at = self.emit_tick(now);
            self.force_release(|_| true, at, f.start_tick, out);
            self.next_tick = self.next_tick.max(resume);
            let record = FreezeRecord {
                performer_id: self.performer_id.unwrap_or(0),
                freeze_start_tick: f.start_tick,
                freeze_ms: freeze_ms.round() as u64,
                resume_tick: resume,
            };
            info!(
                "event=freeze_recovered performer_id={} freeze_start_tick={} freeze_ms={} resume_tick={}",
                record.performer_id, record.freeze_start_tick, record.freeze_ms, record.resume_tick
            );
            self.freezes.push(record);
        }
        while let Some(d) = self.deferred.pop_front() {
            let more = match d {
                Deferred::Message(m) => self.on_message(m, now),
                Deferred::Disconnect => self.on_disconnect(now),
            };
            out.extend(more);
        }
    }
}

fn default_progression() -> ChordProgression {
    ChordProgression::single(
        crate::music::Chord::new(0, crate::music::Quality::Major).expect("C major"),
    )
}
