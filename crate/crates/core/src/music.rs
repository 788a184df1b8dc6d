//! Music data model: notes, chords, progressions, quantization and the
//! tick/time arithmetic shared by the conductor and the performers.
//!
//! Resolution is fixed at 480 ticks per quarter note in 4/4, so one bar is
//! 1920 ticks and the sixteenth grid is 120 ticks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Tick = u64;

pub const PPQ: u32 = 480;
pub const BEATS_PER_BAR: u32 = 4;
pub const TICKS_PER_BAR: Tick = (PPQ * BEATS_PER_BAR) as Tick;
pub const SIXTEENTH_TICKS: Tick = (PPQ / 4) as Tick;
/// Length of one generated sequence and of the stagger cycle.
pub const WINDOW_BARS: u32 = 16;
pub const WINDOW_TICKS: Tick = WINDOW_BARS as Tick * TICKS_PER_BAR;

/// Tolerance (in ticks) used when flooring a wall time onto the tick grid so
/// that `ms_to_tick(tick_to_ms(t)) == t` survives floating point rounding.
const TICK_EPSILON: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MusicError {
    #[error("pitch {0} outside 0..=127")]
    Pitch(u32),
    #[error("velocity {0} outside 0..=127")]
    Velocity(u32),
    #[error("note duration must be at least one tick")]
    ZeroDuration,
    #[error("sequence length must be at least one bar")]
    ZeroLength,
    #[error("event at tick {onset} (+{duration}) extends past sequence end {end}")]
    EventPastEnd {
        onset: Tick,
        duration: Tick,
        end: Tick,
    },
    #[error("events not sorted by onset then pitch")]
    Unsorted,
    #[error("grid of {0} ticks does not divide a bar")]
    InvalidGrid(Tick),
    #[error("time {ms} ms lies before the transport epoch {epoch_ms} ms")]
    BeforeEpoch { ms: f64, epoch_ms: f64 },
    #[error("tempo must be positive and finite, got {0}")]
    Tempo(f64),
    #[error("unrecognised chord `{0}`")]
    Chord(String),
    #[error("progression must start at bar 0 with strictly increasing bars")]
    ProgressionOrder,
    #[error("progression is empty")]
    EmptyProgression,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawNote", into = "RawNote")]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: Tick,
    pub duration: Tick,
    pub velocity: u8,
}

#[derive(Serialize, Deserialize)]
struct RawNote {
    onset: Tick,
    duration: Tick,
    pitch: u32,
    velocity: u32,
}

impl TryFrom<RawNote> for NoteEvent {
    type Error = MusicError;
    fn try_from(raw: RawNote) -> Result<Self, Self::Error> {
        NoteEvent::new(raw.pitch, raw.onset, raw.duration, raw.velocity)
    }
}

impl From<NoteEvent> for RawNote {
    fn from(n: NoteEvent) -> Self {
        RawNote {
            onset: n.onset,
            duration: n.duration,
            pitch: n.pitch as u32,
            velocity: n.velocity as u32,
        }
    }
}

impl NoteEvent {
    pub fn new(pitch: u32, onset: Tick, duration: Tick, velocity: u32) -> Result<Self, MusicError> {
        if pitch > 127 {
            return Err(MusicError::Pitch(pitch));
        }
        if velocity > 127 {
            return Err(MusicError::Velocity(velocity));
        }
        if duration == 0 {
            return Err(MusicError::ZeroDuration);
        }
        Ok(NoteEvent {
            pitch: pitch as u8,
            onset,
            duration,
            velocity: velocity as u8,
        })
    }

    pub fn end(&self) -> Tick {
        self.onset + self.duration
    }

    fn order_key(&self) -> (Tick, u8) {
        (self.onset, self.pitch)
    }
}

/// Quantized note events on the tick grid. Events are kept sorted by onset,
/// ties broken by pitch, and never extend past `length_bars`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSequence", into = "RawSequence")]
pub struct NoteSequence {
    events: Vec<NoteEvent>,
    length_bars: u32,
}

#[derive(Serialize, Deserialize)]
struct RawSequence {
    bars: u32,
    events: Vec<NoteEvent>,
}

impl TryFrom<RawSequence> for NoteSequence {
    type Error = MusicError;
    fn try_from(raw: RawSequence) -> Result<Self, Self::Error> {
        NoteSequence::new(raw.events, raw.bars)
    }
}

impl From<NoteSequence> for RawSequence {
    fn from(s: NoteSequence) -> Self {
        RawSequence {
            bars: s.length_bars,
            events: s.events,
        }
    }
}

impl NoteSequence {
    /// Validates ordering and bounds without reordering.
    pub fn new(events: Vec<NoteEvent>, length_bars: u32) -> Result<Self, MusicError> {
        if length_bars == 0 {
            return Err(MusicError::ZeroLength);
        }
        let end = length_bars as Tick * TICKS_PER_BAR;
        for e in &events {
            if e.end() > end {
                return Err(MusicError::EventPastEnd {
                    onset: e.onset,
                    duration: e.duration,
                    end,
                });
            }
        }
        if events
            .windows(2)
            .any(|w| w[0].order_key() > w[1].order_key())
        {
            return Err(MusicError::Unsorted);
        }
        Ok(NoteSequence {
            events,
            length_bars,
        })
    }

    /// Sorts the events before validating bounds.
    pub fn from_unsorted(mut events: Vec<NoteEvent>, length_bars: u32) -> Result<Self, MusicError> {
        events.sort_by_key(NoteEvent::order_key);
        Self::new(events, length_bars)
    }

    pub fn empty(length_bars: u32) -> Self {
        NoteSequence {
            events: Vec::new(),
            length_bars: length_bars.max(1),
        }
    }

    pub fn events(&self) -> &[NoteEvent] {
        &self.events
    }

    pub fn length_bars(&self) -> u32 {
        self.length_bars
    }

    pub fn end_tick(&self) -> Tick {
        self.length_bars as Tick * TICKS_PER_BAR
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    /// Index of the first event with onset >= `tick`.
    pub fn first_at_or_after(&self, tick: Tick) -> usize {
        self.events.partition_point(|e| e.onset < tick)
    }

    pub(crate) fn from_parts_unchecked(events: Vec<NoteEvent>, length_bars: u32) -> Self {
        debug_assert!(NoteSequence::new(events.clone(), length_bars).is_ok());
        NoteSequence {
            events,
            length_bars,
        }
    }

    /// Writes the line-delimited text form: a `bars=<n> ppq=480` header then
    /// one `onset,duration,pitch,velocity` record per event.
    pub fn to_text(&self) -> String {
        let mut out = format!("bars={} ppq={}\n", self.length_bars, PPQ);
        for e in &self.events {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.onset, e.duration, e.pitch, e.velocity
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, MusicError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(MusicError::Parse {
            line: 1,
            reason: "missing `bars=<n> ppq=480` header".into(),
        })?;
        let mut bars = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("bars", v)) => {
                    bars = Some(v.parse::<u32>().map_err(|e| MusicError::Parse {
                        line: hline,
                        reason: format!("bars: {e}"),
                    })?)
                }
                Some(("ppq", v)) if v == PPQ.to_string() => {}
                Some(("ppq", v)) => {
                    return Err(MusicError::Parse {
                        line: hline,
                        reason: format!("unsupported ppq {v}"),
                    })
                }
                _ => {
                    return Err(MusicError::Parse {
                        line: hline,
                        reason: format!("unexpected header field `{field}`"),
                    })
                }
            }
        }
        let bars = bars.ok_or(MusicError::Parse {
            line: hline,
            reason: "header lacks bars=".into(),
        })?;
        let mut events = Vec::new();
        for (line, l) in lines {
            let parts: Vec<&str> = l.split(',').map(str::trim).collect();
            let bad = |reason: String| MusicError::Parse { line, reason };
            if parts.len() != 4 {
                return Err(bad(format!("expected 4 fields, got {}", parts.len())));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|e| bad(format!("`{s}`: {e}")));
            let (onset, duration, pitch, velocity) = (
                num(parts[0])?,
                num(parts[1])?,
                num(parts[2])?,
                num(parts[3])?,
            );
            let ev = NoteEvent::new(
                pitch.min(u32::MAX as u64) as u32,
                onset,
                duration,
                velocity.min(u32::MAX as u64) as u32,
            )
            .map_err(|e| bad(e.to_string()))?;
            events.push(ev);
        }
        NoteSequence::from_unsorted(events, bars)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Major,
    Minor,
}

impl Quality {
    pub const ALL: [Quality; 2] = [Quality::Major, Quality::Minor];

    /// Semitone offsets of the seven-note scale built on a chord of this
    /// quality: the major scale for major chords, natural minor for minor.
    pub fn scale(self) -> [u8; 7] {
        match self {
            Quality::Major => [0, 2, 4, 5, 7, 9, 11],
            Quality::Minor => [0, 2, 3, 5, 7, 8, 10],
        }
    }

    /// Root, third and fifth as semitone offsets.
    pub fn triad(self) -> [u8; 3] {
        match self {
            Quality::Major => [0, 4, 7],
            Quality::Minor => [0, 3, 7],
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Quality::Major => "maj",
            Quality::Minor => "min",
        }
    }
}

const NOTE_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

/// A major or minor triad. Serialized as its symbol, e.g. `"C#min"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Chord {
    root: u8,
    quality: Quality,
}

impl Chord {
    pub fn new(root: u8, quality: Quality) -> Result<Self, MusicError> {
        if root > 11 {
            return Err(MusicError::Chord(format!("root pitch class {root}")));
        }
        Ok(Chord { root, quality })
    }

    pub fn root(&self) -> u8 {
        self.root
    }

    pub fn quality(&self) -> Quality {
        self.quality
    }

    /// Pitch classes of the chord's seven-note diatonic scale.
    pub fn scale_pitch_classes(&self) -> [u8; 7] {
        self.quality.scale().map(|s| (self.root + s) % 12)
    }

    pub fn contains_pitch_class(&self, pc: u8) -> bool {
        self.scale_pitch_classes().contains(&(pc % 12))
    }
}

impl fmt::Display for Chord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}",
            NOTE_NAMES[self.root as usize],
            self.quality.short()
        )
    }
}

impl FromStr for Chord {
    type Err = MusicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || MusicError::Chord(s.to_string());
        let mut chars = s.chars();
        let letter = chars.next().ok_or_else(bad)?;
        let mut root: i32 = match letter.to_ascii_uppercase() {
            'C' => 0,
            'D' => 2,
            'E' => 4,
            'F' => 5,
            'G' => 7,
            'A' => 9,
            'B' => 11,
            _ => return Err(bad()),
        };
        let mut rest = chars.as_str();
        if let Some(r) = rest.strip_prefix('#') {
            root += 1;
            rest = r;
        } else if let Some(r) = rest.strip_prefix('b') {
            root -= 1;
            rest = r;
        }
        let quality = match rest {
            "maj" | "" | "M" => Quality::Major,
            "min" | "m" => Quality::Minor,
            _ => return Err(bad()),
        };
        Chord::new(root.rem_euclid(12) as u8, quality)
    }
}

impl TryFrom<String> for Chord {
    type Error = MusicError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Chord> for String {
    fn from(c: Chord) -> Self {
        c.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProgressionEntry {
    pub bar: u32,
    pub chord: Chord,
}

/// Bar-indexed chords. The first entry is at bar 0. With `loop_bars` set the
/// progression repeats every `loop_bars` bars.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawProgression", into = "RawProgression")]
pub struct ChordProgression {
    entries: Vec<ProgressionEntry>,
    loop_bars: Option<u32>,
}

#[derive(Serialize, Deserialize)]
struct RawProgression {
    entries: Vec<ProgressionEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    loop_bars: Option<u32>,
}

impl TryFrom<RawProgression> for ChordProgression {
    type Error = MusicError;
    fn try_from(raw: RawProgression) -> Result<Self, Self::Error> {
        ChordProgression::new(raw.entries, raw.loop_bars)
    }
}

impl From<ChordProgression> for RawProgression {
    fn from(p: ChordProgression) -> Self {
        RawProgression {
            entries: p.entries,
            loop_bars: p.loop_bars,
        }
    }
}

impl ChordProgression {
    pub fn new(entries: Vec<ProgressionEntry>, loop_bars: Option<u32>) -> Result<Self, MusicError> {
        let first = entries.first().ok_or(MusicError::EmptyProgression)?;
        if first.bar != 0 || entries.windows(2).any(|w| w[0].bar >= w[1].bar) {
            return Err(MusicError::ProgressionOrder);
        }
        if let Some(l) = loop_bars {
            if l == 0 || entries.last().is_some_and(|e| e.bar >= l) {
                return Err(MusicError::ProgressionOrder);
            }
        }
        Ok(ChordProgression { entries, loop_bars })
    }

    /// Convenience constructor from `(bar, chord)` pairs.
    pub fn from_pairs(pairs: &[(u32, Chord)]) -> Result<Self, MusicError> {
        Self::new(
            pairs
                .iter()
                .map(|&(bar, chord)| ProgressionEntry { bar, chord })
                .collect(),
            None,
        )
    }

    pub fn looping(mut self, loop_bars: u32) -> Result<Self, MusicError> {
        self.loop_bars = Some(loop_bars);
        Self::new(self.entries, self.loop_bars)
    }

    pub fn single(chord: Chord) -> Self {
        ChordProgression {
            entries: vec![ProgressionEntry { bar: 0, chord }],
            loop_bars: None,
        }
    }

    pub fn entries(&self) -> &[ProgressionEntry] {
        &self.entries
    }

    pub fn loop_bars(&self) -> Option<u32> {
        self.loop_bars
    }

    /// Parses `<bar>:<root><quality>` lines plus an optional `loop=<bars>` line.
    pub fn from_text(text: &str) -> Result<Self, MusicError> {
        let mut entries = Vec::new();
        let mut loop_bars = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let bad = |reason: String| MusicError::Parse { line, reason };
            if let Some(v) = l.strip_prefix("loop=") {
                loop_bars = Some(
                    v.trim()
                        .parse::<u32>()
                        .map_err(|e| bad(format!("loop: {e}")))?,
                );
                continue;
            }
            let (bar, chord) = l
                .split_once(':')
                .ok_or_else(|| bad(format!("expected `<bar>:<chord>`, got `{l}`")))?;
            let bar = bar
                .trim()
                .parse::<u32>()
                .map_err(|e| bad(format!("bar: {e}")))?;
            let chord = chord.parse::<Chord>().map_err(|e| bad(e.to_string()))?;
            entries.push(ProgressionEntry { bar, chord });
        }
        ChordProgression::new(entries, loop_bars)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(l) = self.loop_bars {
            out.push_str(&format!("loop={l}\n"));
        }
        for e in &self.entries {
            out.push_str(&format!("{}:{}\n", e.bar, e.chord));
        }
        out
    }
}

/// Chord of the last entry starting at or before `bar`.
pub fn chord_at(prog: &ChordProgression, bar: u32) -> Chord {
    let bar = match prog.loop_bars {
        Some(l) => bar % l,
        None => bar,
    };
    let idx = prog.entries.partition_point(|e| e.bar <= bar);
    // entry at bar 0 always exists, so idx >= 1
    prog.entries[idx - 1].chord
}

/// Shifts every pitch by `semitones`, clamping to the MIDI range.
pub fn transpose(seq: &NoteSequence, semitones: i32) -> NoteSequence {
    let events = seq
        .events
        .iter()
        .map(|e| NoteEvent {
            pitch: transpose_pitch(e.pitch, semitones),
            ..*e
        })
        .collect();
    NoteSequence::from_unsorted(events, seq.length_bars).expect("transpose keeps timing valid")
}

pub fn transpose_pitch(pitch: u8, semitones: i32) -> u8 {
    (pitch as i32 + semitones).clamp(0, 127) as u8
}

fn round_to_grid(t: Tick, grid: Tick) -> Tick {
    // ties round up; odd grids have no integer ties
    ((t + grid / 2) / grid) * grid
}

/// Rounds onsets to the nearest grid multiple (ties up) and durations to the
/// nearest positive multiple (at least one grid unit). Events whose rounded
/// onset reaches the sequence end are dropped; durations are clipped at the
/// end, which stays a grid multiple because the grid divides a bar.
pub fn quantize(seq: &NoteSequence, grid_ticks: Tick) -> Result<NoteSequence, MusicError> {
    if grid_ticks == 0 || !TICKS_PER_BAR.is_multiple_of(grid_ticks) {
        return Err(MusicError::InvalidGrid(grid_ticks));
    }
    let end = seq.end_tick();
    let events = seq
        .events
        .iter()
        .filter_map(|e| {
            let onset = round_to_grid(e.onset, grid_ticks);
            if onset >= end {
                return None;
            }
            let duration = round_to_grid(e.duration, grid_ticks)
                .max(grid_ticks)
                .min(end - onset);
            Some(NoteEvent {
                onset,
                duration,
                ..*e
            })
        })
        .collect();
    NoteSequence::from_unsorted(events, seq.length_bars)
}

/// Events with onset in bars `[end_bar - n_bars, end_bar)`, re-based to tick
/// 0 and truncated at the window end.
pub fn slice_last_bars(seq: &NoteSequence, n_bars: u32, end_bar: u32) -> NoteSequence {
    let n_bars = n_bars.max(1);
    let start = end_bar.saturating_sub(n_bars) as Tick * TICKS_PER_BAR;
    let end = start + n_bars as Tick * TICKS_PER_BAR;
    slice_ticks(seq.events(), start, end, n_bars)
}

/// Same as [`slice_last_bars`] over a raw, onset-sorted event list in
/// absolute ticks.
pub fn slice_ticks(events: &[NoteEvent], start: Tick, end: Tick, n_bars: u32) -> NoteSequence {
    let from = events.partition_point(|e| e.onset < start);
    let out = events[from..]
        .iter()
        .take_while(|e| e.onset < end)
        .map(|e| NoteEvent {
            onset: e.onset - start,
            duration: e.duration.min(end - e.onset),
            ..*e
        })
        .collect();
    NoteSequence::from_unsorted(out, n_bars).expect("sliced events lie inside the window")
}

/// Single-tempo transport: converts between server wall time and ticks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportClock {
    pub tempo_bpm: f64,
    pub epoch_ms: f64,
}

impl TransportClock {
    pub fn new(tempo_bpm: f64, epoch_ms: f64) -> Result<Self, MusicError> {
        if !(tempo_bpm.is_finite() && tempo_bpm > 0.0) {
            return Err(MusicError::Tempo(tempo_bpm));
        }
        Ok(TransportClock {
            tempo_bpm,
            epoch_ms,
        })
    }

    pub fn ms_per_tick(&self) -> f64 {
        60_000.0 / (self.tempo_bpm * PPQ as f64)
    }

    pub fn ticks_per_bar(&self) -> Tick {
        TICKS_PER_BAR
    }

    pub fn bar_ms(&self) -> f64 {
        self.ms_per_tick() * TICKS_PER_BAR as f64
    }

    pub fn tick_to_ms(&self, tick: Tick) -> f64 {
        self.epoch_ms + tick as f64 * self.ms_per_tick()
    }

    /// Floors to the tick containing `ms`.
    pub fn ms_to_tick(&self, ms: f64) -> Result<Tick, MusicError> {
        let t = (ms - self.epoch_ms) / self.ms_per_tick();
        if t < -TICK_EPSILON {
            return Err(MusicError::BeforeEpoch {
                ms,
                epoch_ms: self.epoch_ms,
            });
        }
        Ok((t + TICK_EPSILON).floor().max(0.0) as Tick)
    }

    /// Elapsed ms converted to ticks at this tempo, rounded up.
    pub fn ms_to_tick_delta(&self, elapsed_ms: f64) -> Tick {
        let t = elapsed_ms.max(0.0) / self.ms_per_tick();
        (t - 1e-9).ceil().max(0.0) as Tick
    }
}

/// Step tempo changes, each taking effect at a bar boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TempoMap {
    // (start_tick, start_ms, bpm), sorted by start_tick, first at tick 0
    segments: Vec<(Tick, f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TempoStep {
    pub bar: u32,
    pub tempo_bpm: f64,
}

impl TempoMap {
    pub fn new(epoch_ms: f64, tempo_bpm: f64) -> Result<Self, MusicError> {
        TransportClock::new(tempo_bpm, epoch_ms)?;
        Ok(TempoMap {
            segments: vec![(0, epoch_ms, tempo_bpm)],
        })
    }

    pub fn epoch_ms(&self) -> f64 {
        self.segments[0].1
    }

    /// Applies a change at `bar`; later segments are discarded.
    pub fn set_tempo_at_bar(&mut self, bar: u32, tempo_bpm: f64) -> Result<(), MusicError> {
        TransportClock::new(tempo_bpm, 0.0)?;
        let tick = bar as Tick * TICKS_PER_BAR;
        let ms = self.tick_to_ms(tick);
        self.segments.retain(|s| s.0 < tick);
        if self.segments.is_empty() {
            self.segments.push((0, ms, tempo_bpm));
        } else {
            self.segments.push((tick, ms, tempo_bpm));
        }
        Ok(())
    }

    pub fn steps(&self) -> Vec<TempoStep> {
        self.segments
            .iter()
            .map(|&(t, _, bpm)| TempoStep {
                bar: (t / TICKS_PER_BAR) as u32,
                tempo_bpm: bpm,
            })
            .collect()
    }

    pub fn from_steps(epoch_ms: f64, steps: &[TempoStep]) -> Result<Self, MusicError> {
        let first = steps.first().ok_or(MusicError::Tempo(0.0))?;
        let mut map = TempoMap::new(epoch_ms, first.tempo_bpm)?;
        for s in &steps[1..] {
            map.set_tempo_at_bar(s.bar, s.tempo_bpm)?;
        }
        Ok(map)
    }

    fn segment_for_tick(&self, tick: Tick) -> &(Tick, f64, f64) {
        let i = self.segments.partition_point(|s| s.0 <= tick);
        &self.segments[i.max(1) - 1]
    }

    /// Clock governing `tick`, with its epoch extrapolated back to tick 0 of
    /// that segment's tempo.
    pub fn clock_at_tick(&self, tick: Tick) -> TransportClock {
        let &(t0, ms0, bpm) = self.segment_for_tick(tick);
        let per = 60_000.0 / (bpm * PPQ as f64);
        TransportClock {
            tempo_bpm: bpm,
            epoch_ms: ms0 - t0 as f64 * per,
        }
    }

    pub fn tempo_at_tick(&self, tick: Tick) -> f64 {
        self.segment_for_tick(tick).2
    }

    pub fn tick_to_ms(&self, tick: Tick) -> f64 {
        let &(t0, ms0, bpm) = self.segment_for_tick(tick);
        ms0 + (tick - t0) as f64 * 60_000.0 / (bpm * PPQ as f64)
    }

    pub fn ms_to_tick(&self, ms: f64) -> Result<Tick, MusicError> {
        let i = self.segments.partition_point(|s| s.1 <= ms);
        let &(t0, ms0, bpm) = &self.segments[i.max(1) - 1];
        let clock = TransportClock {
            tempo_bpm: bpm,
            epoch_ms: ms0,
        };
        Ok(t0 + clock.ms_to_tick(ms)?)
    }
}

pub fn bar_of(tick: Tick) -> u32 {
    (tick / TICKS_PER_BAR) as u32
}

pub fn bar_start(bar: u32) -> Tick {
    bar as Tick * TICKS_PER_BAR
}

/// Smallest multiple of `grid` that is >= `tick`.
pub fn ceil_to_grid(tick: Tick, grid: Tick) -> Tick {
    tick.div_ceil(grid) * grid
}

#[cfg(test)]
mod tests {
    use super::*;

    fn note(pitch: u32, onset: Tick, duration: Tick) -> NoteEvent {
        NoteEvent::new(pitch, onset, duration, 96).unwrap()
    }

    fn c() -> Chord {
        "Cmaj".parse().unwrap()
    }
    fn g() -> Chord {
        "Gmaj".parse().unwrap()
    }

    #[test]
    fn transpose_octave_and_identity() {
        let s = NoteSequence::new(
            vec![note(60, 0, 120), note(64, 120, 120), note(67, 240, 120)],
            1,
        )
        .unwrap();
        let up = transpose(&s, 12);
        let pitches: Vec<u8> = up.events().iter().map(|e| e.pitch).collect();
        assert_eq!(pitches, vec![72, 76, 79]);
        assert_eq!(transpose(&s, 0), s);
    }

    #[test]
    fn transpose_clamps() {
        let s = NoteSequence::new(vec![note(120, 0, 120)], 1).unwrap();
        assert_eq!(transpose(&s, 12).events()[0].pitch, 127);
        assert_eq!(transpose(&s, -200).events()[0].pitch, 0);
    }

    #[test]
    fn quantize_examples() {
        let s = NoteSequence::new(vec![note(60, 115, 120)], 1).unwrap();
        assert_eq!(quantize(&s, 120).unwrap().events()[0].onset, 120);
        let s = NoteSequence::new(vec![note(60, 60, 120)], 1).unwrap();
        assert_eq!(quantize(&s, 120).unwrap().events()[0].onset, 120);
        let s = NoteSequence::new(vec![note(60, 0, 30)], 1).unwrap();
        assert_eq!(quantize(&s, 120).unwrap().events()[0].duration, 120);
    }

    #[test]
    fn quantize_rejects_bad_grid() {
        let s = NoteSequence::empty(1);
        assert_eq!(quantize(&s, 7), Err(MusicError::InvalidGrid(7)));
        assert_eq!(quantize(&s, 0), Err(MusicError::InvalidGrid(0)));
    }

    #[test]
    fn quantize_odd_grid_ties_round_up() {
        assert_eq!(round_to_grid(2, 5), 0);
        assert_eq!(round_to_grid(3, 5), 5);
        assert_eq!(round_to_grid(60, 120), 120);
        assert_eq!(round_to_grid(59, 120), 0);
    }

    #[test]
    fn quantize_drops_events_rounded_onto_end() {
        let s = NoteSequence::new(vec![note(60, 1900, 20)], 1).unwrap();
        assert!(quantize(&s, 120).unwrap().is_empty());
        let s = NoteSequence::new(vec![note(60, 1790, 130)], 1).unwrap();
        let q = quantize(&s, 120).unwrap();
        assert_eq!(q.events()[0].onset, 1800);
        assert_eq!(q.events()[0].duration, 120);
    }

    #[test]
    fn chord_lookup() {
        let p = ChordProgression::from_pairs(&[(0, c()), (8, g())]).unwrap();
        assert_eq!(chord_at(&p, 9), g());
        assert_eq!(chord_at(&p, 0), c());
        assert_eq!(chord_at(&p, 8), g());
        assert_eq!(chord_at(&p, 7), c());
        let looped = p.looping(16).unwrap();
        assert_eq!(chord_at(&looped, 16), c());
        assert_eq!(chord_at(&looped, 25), g());
    }

    #[test]
    fn progression_requires_bar_zero_and_order() {
        assert_eq!(
            ChordProgression::from_pairs(&[(1, c())]),
            Err(MusicError::ProgressionOrder)
        );
        assert_eq!(
            ChordProgression::from_pairs(&[(0, c()), (0, g())]),
            Err(MusicError::ProgressionOrder)
        );
        assert_eq!(
            ChordProgression::from_pairs(&[]),
            Err(MusicError::EmptyProgression)
        );
    }

    #[test]
    fn progression_text_round_trip() {
        let text = "# intro\nloop=16\n0:Cmaj\n4:Gmaj\n8:Amin\n12:Fmaj\n";
        let p = ChordProgression::from_text(text).unwrap();
        assert_eq!(p.entries().len(), 4);
        assert_eq!(p.loop_bars(), Some(16));
        assert_eq!(chord_at(&p, 9).to_string(), "Amin");
        assert_eq!(ChordProgression::from_text(&p.to_text()).unwrap(), p);
        assert!(matches!(
            ChordProgression::from_text("0:Hmaj"),
            Err(MusicError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn chord_parsing() {
        assert_eq!("C#min".parse::<Chord>().unwrap().root(), 1);
        assert_eq!("Bbmaj".parse::<Chord>().unwrap().root(), 10);
        assert_eq!("Am".parse::<Chord>().unwrap().quality(), Quality::Minor);
        assert!("X".parse::<Chord>().is_err());
        assert_eq!("Cbmaj".parse::<Chord>().unwrap().root(), 11);
    }

    #[test]
    fn clock_quarter_note_at_120() {
        let clock = TransportClock::new(120.0, 1000.0).unwrap();
        assert_eq!(clock.tick_to_ms(480), 1500.0);
        assert_eq!(clock.tick_to_ms(0), 1000.0);
        assert_eq!(clock.ms_to_tick(1500.0).unwrap(), 480);
        assert_eq!(clock.ms_to_tick(1500.9).unwrap(), 480);
        assert!(matches!(
            clock.ms_to_tick(900.0),
            Err(MusicError::BeforeEpoch { .. })
        ));
        assert!(TransportClock::new(0.0, 0.0).is_err());
    }

    #[test]
    fn clock_round_trip_awkward_tempo() {
        let clock = TransportClock::new(97.3, 12345.678).unwrap();
        for t in (0..200_000).step_by(37) {
            assert_eq!(clock.ms_to_tick(clock.tick_to_ms(t)).unwrap(), t);
        }
    }

    #[test]
    fn tempo_map_steps() {
        let mut m = TempoMap::new(0.0, 120.0).unwrap();
        m.set_tempo_at_bar(2, 60.0).unwrap();
        // two bars at 120 = 4000 ms, then a bar at 60 = 4000 ms
        assert_eq!(m.tick_to_ms(bar_start(2)), 4000.0);
        assert_eq!(m.tick_to_ms(bar_start(3)), 8000.0);
        assert_eq!(m.ms_to_tick(8000.0).unwrap(), bar_start(3));
        assert!(m.ms_to_tick(3999.0).unwrap() < bar_start(2));
        assert_eq!(m.tempo_at_tick(bar_start(2)), 60.0);
        let c = m.clock_at_tick(bar_start(3));
        assert!((c.tick_to_ms(bar_start(3)) - 8000.0).abs() < 1e-9);
        let rebuilt = TempoMap::from_steps(0.0, &m.steps()).unwrap();
        assert_eq!(rebuilt, m);
    }

    #[test]
    fn slice_window() {
        let seq = NoteSequence::new(
            (0..32)
                .map(|b| note(60 + b % 12, bar_start(b), 480))
                .collect(),
            32,
        )
        .unwrap();
        let s = slice_last_bars(&seq, 16, 32);
        assert_eq!(s.length_bars(), 16);
        assert_eq!(s.len(), 16);
        assert_eq!(s.events()[0].onset, 0);
        assert_eq!(s.events()[0].pitch, 60 + 4);
        assert!(slice_last_bars(&NoteSequence::empty(16), 16, 16).is_empty());
    }

    #[test]
    fn slice_truncates_at_window_end() {
        // onset at bar 15.75, one bar long
        let onset = bar_start(15) + 3 * 480;
        let seq = NoteSequence::new(vec![note(60, onset, TICKS_PER_BAR)], 17).unwrap();
        let s = slice_last_bars(&seq, 16, 16);
        assert_eq!(s.events()[0].onset, onset);
        assert_eq!(s.events()[0].end(), 16 * TICKS_PER_BAR);
    }

    #[test]
    fn sequence_validation() {
        assert_eq!(NoteEvent::new(128, 0, 1, 0), Err(MusicError::Pitch(128)));
        assert_eq!(NoteEvent::new(1, 0, 0, 0), Err(MusicError::ZeroDuration));
        assert!(matches!(
            NoteSequence::new(vec![note(60, 1900, 100)], 1),
            Err(MusicError::EventPastEnd { .. })
        ));
        assert_eq!(
            NoteSequence::new(vec![note(60, 120, 10), note(60, 0, 10)], 1),
            Err(MusicError::Unsorted)
        );
    }

    #[test]
    fn sequence_text_format() {
        let seq = NoteSequence::new(vec![note(60, 0, 120), note(64, 240, 360)], 2).unwrap();
        let text = seq.to_text();
        assert!(text.starts_with("bars=2 ppq=480\n0,120,60,96\n"));
        assert_eq!(NoteSequence::from_text(&text).unwrap(), seq);
        assert!(NoteSequence::from_text("bars=2 ppq=96\n").is_err());
        assert!(NoteSequence::from_text("0,1,60,96").is_err());
    }
}
