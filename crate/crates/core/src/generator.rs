//! Chord-conditioned melody generation.
//!
//! The reference model is an order-1 weighted transition table over symbols
//! relative to the current chord root: twelve semitone slots, a rest and a
//! hold. Sampling reshapes each row with a temperature exponent. Anything
//! implementing [`MelodyGenerator`] can stand in for it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::music::{
    chord_at, Chord, ChordProgression, MusicError, NoteEvent, NoteSequence, Quality, Tick,
    SIXTEENTH_TICKS, WINDOW_BARS,
};

pub const SYMBOL_COUNT: usize = 14;
pub const DEFAULT_VELOCITY: u8 = 96;
pub const DEFAULT_CENTER_PITCH: u8 = 72;
const STEPS_PER_BAR: u32 = 16;

pub type SessionRng = ChaCha8Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    #[error("distribution has no positive mass")]
    DegenerateDistribution,
    #[error("distribution entry {0} is negative or not finite")]
    InvalidWeight(f64),
    #[error("temperature {0} outside [0.01, 4.0]")]
    Temperature(f64),
    #[error("previous melody spans {0} bars, at most 16 allowed")]
    PrevTooLong(u32),
    #[error("latency range invalid: {0}")]
    Latency(String),
    #[error("model line {line}: {reason}")]
    ModelParse { line: usize, reason: String },
    #[error(transparent)]
    Music(#[from] MusicError),
}

/// Sampling symbol: a semitone offset above the chord root, a rest, or a hold
/// that extends the sounding note.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Degree(u8),
    Rest,
    Hold,
}

impl Symbol {
    pub fn index(self) -> usize {
        match self {
            Symbol::Degree(d) => d as usize,
            Symbol::Rest => 12,
            Symbol::Hold => 13,
        }
    }

    pub fn from_index(i: usize) -> Option<Symbol> {
        match i {
            0..=11 => Some(Symbol::Degree(i as u8)),
            12 => Some(Symbol::Rest),
            13 => Some(Symbol::Hold),
            _ => None,
        }
    }

    pub fn all() -> impl Iterator<Item = Symbol> {
        (0..SYMBOL_COUNT).filter_map(Symbol::from_index)
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Degree(d) => write!(f, "{d}"),
            Symbol::Rest => f.write_str("rest"),
            Symbol::Hold => f.write_str("hold"),
        }
    }
}

impl FromStr for Symbol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rest" => Ok(Symbol::Rest),
            "hold" => Ok(Symbol::Hold),
            _ => s
                .parse::<u8>()
                .ok()
                .filter(|d| *d < 12)
                .map(Symbol::Degree)
                .ok_or_else(|| format!("unknown symbol `{s}`")),
        }
    }
}

/// Sampling temperature, restricted to [0.01, 4.0].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const MIN: f64 = 0.01;
    pub const MAX: f64 = 4.0;

    pub fn new(value: f64) -> Result<Self, GeneratorError> {
        if (Self::MIN..=Self::MAX).contains(&value) {
            Ok(Temperature(value))
        } else {
            Err(GeneratorError::Temperature(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(1.0)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = GeneratorError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Temperature::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Returns `p_i^(1/T) / sum_j p_j^(1/T)`, computed in log space so very low
/// temperatures do not underflow.
pub fn apply_temperature(
    dist: &[f64],
    temperature: Temperature,
) -> Result<Vec<f64>, GeneratorError> {
    if let Some(&bad) = dist.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(GeneratorError::InvalidWeight(bad));
    }
    if !dist.iter().any(|p| *p > 0.0) {
        return Err(GeneratorError::DegenerateDistribution);
    }
    let inv_t = 1.0 / temperature.value();
    let max_log = dist
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p.ln() * inv_t)
        .fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = dist
        .iter()
        .map(|&p| {
            if p > 0.0 {
                (p.ln() * inv_t - max_log).exp()
            } else {
                0.0
            }
        })
        .collect();
    let z: f64 = scaled.iter().sum();
    Ok(scaled.into_iter().map(|w| w / z).collect())
}

fn draw_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

pub type WeightRow = [f64; SYMBOL_COUNT];

/// Transition table keyed by chord quality and previous symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    rows: BTreeMap<(Quality, Symbol), WeightRow>,
    pub rng_seed: u64,
}

fn validate_row(row: &WeightRow) -> Result<(), GeneratorError> {
    if let Some(&bad) = row.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(GeneratorError::InvalidWeight(bad));
    }
    if !row.iter().any(|w| *w > 0.0) {
        return Err(GeneratorError::DegenerateDistribution);
    }
    Ok(())
}

impl GeneratorModel {
    /// Chord tones weigh 4, other scale degrees 2, hold 3, rest 1.
    pub fn default_row(quality: Quality) -> WeightRow {
        let mut row = [0.0; SYMBOL_COUNT];
        for d in quality.scale() {
            row[d as usize] = 2.0;
        }
        for d in quality.triad() {
            row[d as usize] = 4.0;
        }
        row[Symbol::Rest.index()] = 1.0;
        row[Symbol::Hold.index()] = 3.0;
        row
    }

    pub fn default_with_seed(rng_seed: u64) -> Self {
        let mut rows = BTreeMap::new();
        for q in Quality::ALL {
            for s in Symbol::all() {
                rows.insert((q, s), Self::default_row(q));
            }
        }
        GeneratorModel { rows, rng_seed }
    }

    /// A model with no rows at all; every lookup falls back to chord tones.
    pub fn empty(rng_seed: u64) -> Self {
        GeneratorModel {
            rows: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn set_row(
        &mut self,
        quality: Quality,
        prev: Symbol,
        row: WeightRow,
    ) -> Result<(), GeneratorError> {
        validate_row(&row)?;
        self.rows.insert((quality, prev), row);
        Ok(())
    }

    pub fn row(&self, quality: Quality, prev: Symbol) -> Option<&WeightRow> {
        self.rows.get(&(quality, prev))
    }

    /// Session RNG for an independent stream (e.g. one per performer).
    pub fn session_rng(&self, stream: u64) -> SessionRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(stream);
        rng
    }

    /// Text form: a version line, `seed=<n>`, then one
    /// `quality,prev_symbol:w0,...,w13` row per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("ensemble-model v1\nseed={}\n", self.rng_seed);
        out.push_str("# quality,prev:w0..w11 (semitones above root),rest,hold\n");
        for ((q, s), row) in &self.rows {
            let ws: Vec<String> = row.iter().map(|w| format!("{w}")).collect();
            out.push_str(&format!("{},{}:{}\n", q.short(), s, ws.join(",")));
        }
        out
    }

    /// Rows absent from the file keep their default weights.
    pub fn from_text(text: &str) -> Result<Self, GeneratorError> {
        let mut model = GeneratorModel::default_with_seed(0);
        let mut saw_version = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            let bad = |reason: String| GeneratorError::ModelParse { line, reason };
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            if !saw_version {
                if l != "ensemble-model v1" {
                    return Err(bad(format!("expected `ensemble-model v1`, got `{l}`")));
                }
                saw_version = true;
                continue;
            }
            if let Some(seed) = l.strip_prefix("seed=") {
                model.rng_seed = seed.trim().parse().map_err(|e| bad(format!("seed: {e}")))?;
                continue;
            }
            let (key, weights) = l
                .split_once(':')
                .ok_or_else(|| bad("expected `quality,prev:weights`".into()))?;
            let (q, s) = key
                .split_once(',')
                .ok_or_else(|| bad("expected `quality,prev`".into()))?;
            let quality = match q.trim() {
                "maj" => Quality::Major,
                "min" => Quality::Minor,
                other => return Err(bad(format!("unknown quality `{other}`"))),
            };
            let prev: Symbol = s.trim().parse().map_err(bad)?;
            let ws: Vec<f64> = weights
                .split(',')
                .map(|w| {
                    w.trim()
                        .parse::<f64>()
                        .map_err(|e| bad(format!("weight `{w}`: {e}")))
                })
                .collect::<Result<_, _>>()?;
            let row: WeightRow = ws.try_into().map_err(|v: Vec<f64>| {
                bad(format!("expected {SYMBOL_COUNT} weights, got {}", v.len()))
            })?;
            model
                .set_row(quality, prev, row)
                .map_err(|e| bad(e.to_string()))?;
        }
        if !saw_version {
            return Err(GeneratorError::ModelParse {
                line: 1,
                reason: "empty model file".into(),
            });
        }
        Ok(model)
    }
}

impl Default for GeneratorModel {
    fn default() -> Self {
        GeneratorModel::default_with_seed(0)
    }
}

fn chord_tone_fallback(chord: Chord) -> WeightRow {
    let mut row = [0.0; SYMBOL_COUNT];
    for d in chord.quality().triad() {
        row[d as usize] = 1.0;
    }
    row
}

/// Draws the next symbol. Slots outside the chord's scale are masked out so
/// edited tables cannot leave the scale; a missing or fully masked row falls
/// back to a uniform choice over the chord tones.
pub fn sample_step(
    model: &GeneratorModel,
    chord: Chord,
    prev: Symbol,
    temperature: Temperature,
    rng: &mut impl Rng,
) -> Symbol {
    let quality = chord.quality();
    let scale = quality.scale();
    let masked = model.row(quality, prev).map(|row| {
        let mut r = *row;
        for (d, w) in r.iter_mut().enumerate().take(12) {
            if !scale.contains(&(d as u8)) {
                *w = 0.0;
            }
        }
        r
    });
    let row = match masked {
        Some(r) if r.iter().any(|w| *w > 0.0) => r,
        _ => {
            warn!(
                "event=generator_fallback quality={} prev={}",
                quality.short(),
                prev
            );
            chord_tone_fallback(chord)
        }
    };
    let total: f64 = row.iter().sum();
    let normalized: Vec<f64> = row.iter().map(|w| w / total).collect();
    let probs = apply_temperature(&normalized, temperature).expect("row has positive mass");
    Symbol::from_index(draw_index(&probs, rng)).expect("index within alphabet")
}

/// Latency attached to a generation, standing in for the blocking compute
/// time of a neural model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LatencyModel {
    Fixed {
        ms: f64,
    },
    Uniform {
        min_ms: f64,
        max_ms: f64,
    },
    /// Use the measured wall time of the generation call.
    Measured,
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        match *self {
            LatencyModel::Fixed { ms } if !(ms.is_finite() && ms >= 0.0) => {
                Err(GeneratorError::Latency(format!("fixed {ms} ms")))
            }
            LatencyModel::Uniform { min_ms, max_ms }
                if !(min_ms.is_finite()
                    && max_ms.is_finite()
                    && 0.0 <= min_ms
                    && min_ms <= max_ms) =>
            {
                Err(GeneratorError::Latency(format!(
                    "uniform {min_ms}..{max_ms} ms"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Expected latency, used as the initial prediction.
    pub fn nominal_ms(&self) -> f64 {
        match *self {
            LatencyModel::Fixed { ms } => ms,
            LatencyModel::Uniform { min_ms, max_ms } => 0.5 * (min_ms + max_ms),
            LatencyModel::Measured => 0.0,
        }
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::Fixed { ms: 2000.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub sequence: NoteSequence,
    pub latency_ms: f64,
}

/// Interface for anything that continues a melody over a chord progression.
pub trait MelodyGenerator: Send + Sync {
    /// Returns a 16-bar sequence on the sixteenth grid starting at `start_bar`
    /// of the progression.
    fn generate(
        &self,
        prev: &NoteSequence,
        progression: &ChordProgression,
        start_bar: u32,
        temperature: Temperature,
        rng: &mut SessionRng,
    ) -> Result<NoteSequence, GeneratorError>;
}

fn band_pitch(pitch_class: u8, center: u8) -> u8 {
    let lo = center as i32 - 6;
    (lo + (pitch_class as i32 - lo).rem_euclid(12)) as u8
}

fn degree_of(pitch: u8, chord: Chord) -> u8 {
    ((pitch as i32 - chord.root() as i32).rem_euclid(12)) as u8
}

impl MelodyGenerator for GeneratorModel {
    fn generate(
        &self,
        prev: &NoteSequence,
        progression: &ChordProgression,
        start_bar: u32,
        temperature: Temperature,
        rng: &mut SessionRng,
    ) -> Result<NoteSequence, GeneratorError> {
        if prev.length_bars() > WINDOW_BARS {
            return Err(GeneratorError::PrevTooLong(prev.length_bars()));
        }
        let first_chord = chord_at(progression, start_bar);
        let last = prev.events().iter().max_by_key(|e| (e.end(), e.onset));
        let center = last.map_or(DEFAULT_CENTER_PITCH, |e| e.pitch).clamp(6, 121);
        let mut state = match last {
            Some(e) if e.end() >= prev.end_tick() => {
                Symbol::Degree(degree_of(e.pitch, first_chord))
            }
            _ => Symbol::Rest,
        };

        let mut events = Vec::new();
        // (pitch, onset, steps)
        let mut sounding: Option<(u8, Tick, Tick)> = None;
        let flush = |events: &mut Vec<NoteEvent>, s: Option<(u8, Tick, Tick)>| {
            if let Some((pitch, onset, steps)) = s {
                events.push(NoteEvent {
                    pitch,
                    onset,
                    duration: steps * SIXTEENTH_TICKS,
                    velocity: DEFAULT_VELOCITY,
                });
            }
        };
        for step in 0..WINDOW_BARS * STEPS_PER_BAR {
            let chord = chord_at(progression, start_bar + step / STEPS_PER_BAR);
            let sym = sample_step(self, chord, state, temperature, rng);
            match sym {
                Symbol::Degree(d) => {
                    flush(&mut events, sounding.take());
                    let pc = (chord.root() + d) % 12;
                    sounding = Some((band_pitch(pc, center), step as Tick * SIXTEENTH_TICKS, 1));
                }
                Symbol::Rest => flush(&mut events, sounding.take()),
                Symbol::Hold => {
                    if let Some(s) = sounding.as_mut() {
                        s.2 += 1;
                    }
                }
            }
            state = sym;
        }
        flush(&mut events, sounding.take());
        Ok(NoteSequence::from_parts_unchecked(events, WINDOW_BARS))
    }
}

/// Runs one generation and attaches its latency.
pub fn generate_continuation(
    generator: &dyn MelodyGenerator,
    prev: &NoteSequence,
    progression: &ChordProgression,
    start_bar: u32,
    temperature: Temperature,
    latency: &LatencyModel,
    rng: &mut SessionRng,
) -> Result<GenerationResult, GeneratorError> {
    let started = Instant::now();
    let sequence = generator.generate(prev, progression, start_bar, temperature, rng)?;
    let latency_ms = match *latency {
        LatencyModel::Fixed { ms } => ms,
        LatencyModel::Uniform { min_ms, max_ms } => {
            if max_ms > min_ms {
                rng.random_range(min_ms..max_ms)
            } else {
                min_ms
            }
        }
        LatencyModel::Measured => started.elapsed().as_secs_f64() * 1000.0,
    };
    Ok(GenerationResult {
        sequence,
        latency_ms: latency_ms.max(0.0),
    })
}

/// Mean number of distinct pitch classes among note onsets per bar.
pub fn distinct_pitch_classes_per_bar(seq: &NoteSequence) -> f64 {
    let bars = seq.length_bars() as usize;
    let mut masks = vec![0u16; bars];
    for e in seq.events() {
        let bar = (e.onset / crate::music::TICKS_PER_BAR) as usize;
        masks[bar] |= 1 << (e.pitch % 12);
    }
    masks.iter().map(|m| m.count_ones() as f64).sum::<f64>() / bars as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::music::TICKS_PER_BAR;

    fn t(v: f64) -> Temperature {
        Temperature::new(v).unwrap()
    }

    fn c_major() -> ChordProgression {
        ChordProgression::single("Cmaj".parse().unwrap())
    }

    #[test]
    fn temperature_symmetric_and_derived() {
        let out = apply_temperature(&[0.5, 0.5], t(0.3)).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
        // 0.8^2 / (0.8^2 + 0.2^2) = 0.64 / 0.68
        let out = apply_temperature(&[0.8, 0.2], t(0.5)).unwrap();
        assert!((out[0] - 0.9412).abs() < 1e-4);
        assert!((out[1] - 0.0588).abs() < 1e-4);
        let out = apply_temperature(&[0.7, 0.3], t(0.01)).unwrap();
        assert!(out[0] >= 1.0 - 1e-6);
    }

    #[test]
    fn temperature_errors() {
        assert_eq!(
            apply_temperature(&[0.0, 0.0], t(1.0)),
            Err(GeneratorError::DegenerateDistribution)
        );
        assert_eq!(
            apply_temperature(&[-1.0, 2.0], t(1.0)),
            Err(GeneratorError::InvalidWeight(-1.0))
        );
        assert!(Temperature::new(0.001).is_err());
        assert!(Temperature::new(4.5).is_err());
        assert!(Temperature::new(4.0).is_ok());
    }

    #[test]
    fn unit_temperature_normalizes() {
        let out = apply_temperature(&[2.0, 1.0, 1.0], t(1.0)).unwrap();
        for (a, b) in out.iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_row_always_wins() {
        let mut model = GeneratorModel::empty(0);
        let mut row = [0.0; SYMBOL_COUNT];
        row[0] = 1.0;
        model.set_row(Quality::Major, Symbol::Rest, row).unwrap();
        let chord = "Dmaj".parse().unwrap();
        let mut rng = model.session_rng(0);
        for temp in [0.01, 1.0, 4.0] {
            for _ in 0..50 {
                assert_eq!(
                    sample_step(&model, chord, Symbol::Rest, t(temp), &mut rng),
                    Symbol::Degree(0)
                );
            }
        }
    }

    #[test]
    fn missing_row_falls_back_to_chord_tones() {
        let model = GeneratorModel::empty(3);
        let chord: Chord = "Amin".parse().unwrap();
        let mut rng = model.session_rng(0);
        for _ in 0..200 {
            match sample_step(&model, chord, Symbol::Hold, t(1.0), &mut rng) {
                Symbol::Degree(d) => assert!([0, 3, 7].contains(&d)),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn chromatic_weights_are_masked() {
        let mut model = GeneratorModel::empty(0);
        let mut row = [0.0; SYMBOL_COUNT];
        row[1] = 100.0; // minor second, never in a major scale
        row[4] = 1.0;
        model.set_row(Quality::Major, Symbol::Rest, row).unwrap();
        let mut rng = model.session_rng(0);
        for _ in 0..100 {
            assert_eq!(
                sample_step(
                    &model,
                    "Cmaj".parse().unwrap(),
                    Symbol::Rest,
                    t(1.0),
                    &mut rng
                ),
                Symbol::Degree(4)
            );
        }
    }

    #[test]
    fn sample_step_is_reproducible() {
        let model = GeneratorModel::default_with_seed(42);
        let chord = "Gmaj".parse().unwrap();
        let run = || {
            let mut rng = model.session_rng(0);
            let mut prev = Symbol::Rest;
            (0..1000)
                .map(|_| {
                    prev = sample_step(&model, chord, prev, t(1.0), &mut rng);
                    prev
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empirical_frequencies_within_three_sigma() {
        // row [0.5, 0.25, 0.25] over degree 0, degree 4 and rest
        let mut model = GeneratorModel::empty(9);
        let mut row = [0.0; SYMBOL_COUNT];
        row[0] = 2.0;
        row[4] = 1.0;
        row[Symbol::Rest.index()] = 1.0;
        model.set_row(Quality::Major, Symbol::Rest, row).unwrap();
        let mut rng = model.session_rng(0);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            match sample_step(
                &model,
                "Cmaj".parse().unwrap(),
                Symbol::Rest,
                t(1.0),
                &mut rng,
            ) {
                Symbol::Degree(0) => counts[0] += 1,
                Symbol::Degree(4) => counts[1] += 1,
                Symbol::Rest => counts[2] += 1,
                other => panic!("unexpected {other:?}"),
            }
        }
        let mut chi2 = 0.0;
        for (c, p) in counts.iter().zip([0.5, 0.25, 0.25]) {
            let mean = n as f64 * p;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (*c as f64 - mean).abs() <= 3.0 * sigma,
                "count {c} vs mean {mean}"
            );
            chi2 += (*c as f64 - mean).powi(2) / mean;
        }
        // chi-square, 2 dof, p = 0.001
        assert!(chi2 < 13.82, "chi2 {chi2}");
    }

    #[test]
    fn generation_respects_scale_and_grid() {
        let model = GeneratorModel::default_with_seed(7);
        let mut rng = model.session_rng(0);
        let seq = model
            .generate(&NoteSequence::empty(16), &c_major(), 0, t(0.01), &mut rng)
            .unwrap();
        assert_eq!(seq.length_bars(), 16);
        assert!(!seq.is_empty());
        let scale = [0, 2, 4, 5, 7, 9, 11];
        for e in seq.events() {
            assert!(scale.contains(&(e.pitch % 12)));
            assert_eq!(e.onset % SIXTEENTH_TICKS, 0);
            assert_eq!(e.duration % SIXTEENTH_TICKS, 0);
            assert!((66..=77).contains(&e.pitch));
        }
    }

    #[test]
    fn generation_centers_on_previous_last_pitch() {
        let model = GeneratorModel::default_with_seed(1);
        let prev = NoteSequence::new(vec![NoteEvent::new(40, 0, 120, 96).unwrap()], 16).unwrap();
        let mut rng = model.session_rng(0);
        let seq = model
            .generate(&prev, &c_major(), 16, t(1.0), &mut rng)
            .unwrap();
        assert!(seq.events().iter().all(|e| (34..=45).contains(&e.pitch)));
    }

    #[test]
    fn generation_rejects_long_prev() {
        let model = GeneratorModel::default();
        let mut rng = model.session_rng(0);
        assert_eq!(
            model.generate(&NoteSequence::empty(17), &c_major(), 0, t(1.0), &mut rng),
            Err(GeneratorError::PrevTooLong(17))
        );
    }

    #[test]
    fn continuation_is_deterministic() {
        let model = GeneratorModel::default_with_seed(11);
        let prog = ChordProgression::from_text("loop=16\n0:Cmaj\n4:Gmaj\n8:Amin\n12:Fmaj").unwrap();
        let latency = LatencyModel::Uniform {
            min_ms: 1000.0,
            max_ms: 3000.0,
        };
        let run = || {
            let mut rng = model.session_rng(3);
            generate_continuation(
                &model,
                &NoteSequence::empty(16),
                &prog,
                0,
                t(1.2),
                &latency,
                &mut rng,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!((1000.0..3000.0).contains(&a.latency_ms));
        assert_eq!(a.sequence.end_tick(), 16 * TICKS_PER_BAR);
    }

    #[test]
    fn latency_validation() {
        assert!(LatencyModel::Fixed { ms: -1.0 }.validate().is_err());
        assert!(LatencyModel::Uniform {
            min_ms: 5.0,
            max_ms: 1.0
        }
        .validate()
        .is_err());
        assert_eq!(
            LatencyModel::Uniform {
                min_ms: 1.0,
                max_ms: 3.0
            }
            .nominal_ms(),
            2.0
        );
    }

    #[test]
    fn model_text_round_trip() {
        let mut model = GeneratorModel::default_with_seed(99);
        let mut row = GeneratorModel::default_row(Quality::Minor);
        row[Symbol::Hold.index()] = 0.5;
        model
            .set_row(Quality::Minor, Symbol::Degree(3), row)
            .unwrap();
        let parsed = GeneratorModel::from_text(&model.to_text()).unwrap();
        assert_eq!(parsed, model);
    }

    #[test]
    fn model_file_partial_rows_and_errors() {
        let m = GeneratorModel::from_text(
            "ensemble-model v1\nseed=5\nmaj,rest:1,0,0,0,0,0,0,0,0,0,0,0,0,0\n",
        )
        .unwrap();
        assert_eq!(m.rng_seed, 5);
        assert_eq!(m.row(Quality::Major, Symbol::Rest).unwrap()[0], 1.0);
        assert_eq!(
            m.row(Quality::Minor, Symbol::Rest),
            Some(&GeneratorModel::default_row(Quality::Minor))
        );
        assert!(GeneratorModel::from_text("ensemble-model v2").is_err());
        assert!(GeneratorModel::from_text("ensemble-model v1\nmaj,rest:1,2").is_err());
        assert!(GeneratorModel::from_text(
            "ensemble-model v1\nmaj,rest:0,0,0,0,0,0,0,0,0,0,0,0,0,0"
        )
        .is_err());
        assert!(GeneratorModel::from_text(
            "ensemble-model v1\nsus,rest:1,0,0,0,0,0,0,0,0,0,0,0,0,0"
        )
        .is_err());
    }

    #[test]
    fn band_pitch_stays_in_octave() {
        for center in [6u8, 60, 72, 121] {
            for pc in 0..12 {
                let p = band_pitch(pc, center);
                assert_eq!(p % 12, pc);
                assert!(p as i32 >= center as i32 - 6 && (p as i32) < center as i32 + 6);
            }
        }
    }
}
