//! Staggered generation deadlines and freeze recovery arithmetic.
//!
//! Each performer regenerates once per 16-bar window, at a bar offset spread
//! evenly across the ensemble so that blocking generations do not coincide.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::music::{
    ceil_to_grid, NoteEvent, NoteSequence, Tick, TransportClock, SIXTEENTH_TICKS, WINDOW_BARS,
};

pub const MAX_PERFORMERS: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StaggerError {
    #[error("performer count {0} outside 1..=16")]
    PerformerCount(u32),
    #[error("performer index {index} out of range for {n} performers")]
    PerformerIndex { index: u32, n: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaggerSchedule {
    n_performers: u32,
    offsets: Vec<u32>,
}

impl StaggerSchedule {
    pub fn n_performers(&self) -> u32 {
        self.n_performers
    }

    pub fn window_bars(&self) -> u32 {
        WINDOW_BARS
    }

    pub fn offsets(&self) -> &[u32] {
        &self.offsets
    }

    pub fn offset(&self, performer: u32) -> Result<u32, StaggerError> {
        self.offsets
            .get(performer as usize)
            .copied()
            .ok_or(StaggerError::PerformerIndex {
                index: performer,
                n: self.n_performers,
            })
    }

    /// Schedule with arbitrary offsets, for fault injection.
    pub fn with_offsets(offsets: Vec<u32>) -> Result<Self, StaggerError> {
        let n = offsets.len() as u32;
        if n == 0 || n > MAX_PERFORMERS {
            return Err(StaggerError::PerformerCount(n));
        }
        Ok(StaggerSchedule {
            n_performers: n,
            offsets: offsets.into_iter().map(|o| o % WINDOW_BARS).collect(),
        })
    }
}

/// Offsets `floor(i * 16 / n)` bars for performer `i`.
pub fn build_schedule(n_performers: u32) -> Result<StaggerSchedule, StaggerError> {
    if !(1..=MAX_PERFORMERS).contains(&n_performers) {
        return Err(StaggerError::PerformerCount(n_performers));
    }
    let offsets = (0..n_performers)
        .map(|i| i * WINDOW_BARS / n_performers)
        .collect();
    Ok(StaggerSchedule {
        n_performers,
        offsets,
    })
}

/// Smallest `offset + 16k` strictly greater than `current_bar`.
pub fn next_deadline(
    schedule: &StaggerSchedule,
    performer: u32,
    current_bar: u32,
) -> Result<u32, StaggerError> {
    let offset = schedule.offset(performer)?;
    if current_bar < offset {
        return Ok(offset);
    }
    let k = (current_bar - offset) / WINDOW_BARS + 1;
    Ok(offset + k * WINDOW_BARS)
}

/// First sixteenth-grid tick at or after the position the transport reached
/// while the performer was frozen.
pub fn reinsertion_tick(freeze_start_tick: Tick, freeze_ms: f64, clock: &TransportClock) -> Tick {
    debug_assert!(freeze_ms >= 0.0);
    let raw = freeze_start_tick + clock.ms_to_tick_delta(freeze_ms);
    ceil_to_grid(raw, SIXTEENTH_TICKS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeRecord {
    pub performer_id: u32,
    pub freeze_start_tick: Tick,
    pub freeze_ms: u64,
    pub resume_tick: Tick,
}

/// Drops events starting inside `[freeze_start, resume)` and truncates those
/// sounding across `freeze_start`; the truncated pitches are returned so the
/// playback layer can send their note-offs immediately.
pub fn prune_frozen_span(
    seq: &NoteSequence,
    freeze_start: Tick,
    resume: Tick,
) -> (NoteSequence, Vec<u8>) {
    debug_assert!(freeze_start <= resume);
    if freeze_start >= resume {
        return (seq.clone(), Vec::new());
    }
    let mut forced_offs = Vec::new();
    let mut events = Vec::with_capacity(seq.len());
    for e in seq.events() {
        if e.onset >= freeze_start && e.onset < resume {
            continue;
        }
        if e.onset < freeze_start && e.end() > freeze_start {
            forced_offs.push(e.pitch);
            events.push(NoteEvent {
                duration: freeze_start - e.onset,
                ..*e
            });
        } else {
            events.push(*e);
        }
    }
    (
        NoteSequence::new(events, seq.length_bars()).expect("pruning keeps order and bounds"),
        forced_offs,
    )
}

/// Wall-clock length of `bars` bars at `tempo_bpm`.
pub fn bars_to_ms(bars: f64, tempo_bpm: f64) -> f64 {
    bars * 4.0 * 60_000.0 / tempo_bpm
}

/// The largest freeze for which even staggering guarantees separation.
pub fn freeze_bound_ms(n_performers: u32, tempo_bpm: f64) -> f64 {
    bars_to_ms(WINDOW_BARS as f64 / n_performers as f64, tempo_bpm)
}
