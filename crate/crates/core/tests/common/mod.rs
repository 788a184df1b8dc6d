#![allow(dead_code)]

use ensemble_core::music::{
    Chord, ChordProgression, NoteEvent, NoteSequence, ProgressionEntry, Quality, TempoStep,
};
use ensemble_core::protocol::{ControlSetting, EngagementMode, Message, PlanInstruction, Role};
use proptest::prelude::*;

pub fn arb_chord() -> impl Strategy<Value = Chord> {
    (
        0u8..12,
        prop_oneof![Just(Quality::Major), Just(Quality::Minor)],
    )
        .prop_map(|(r, q)| Chord::new(r, q).unwrap())
}

pub fn arb_progression() -> impl Strategy<Value = ChordProgression> {
    (
        prop::collection::vec((1u32..8, arb_chord()), 1..6),
        any::<bool>(),
    )
        .prop_map(|(steps, looped)| {
            let mut bar = 0;
            let mut entries = Vec::new();
            for (i, (gap, chord)) in steps.into_iter().enumerate() {
                if i > 0 {
                    bar += gap;
                }
                entries.push(ProgressionEntry { bar, chord });
            }
            let loop_bars = looped.then_some(bar + 1);
            ChordProgression::new(entries, loop_bars).unwrap()
        })
}

pub fn arb_sequence() -> impl Strategy<Value = NoteSequence> {
    (1u32..=16)
        .prop_flat_map(|bars| {
            let end = bars as u64 * 1920;
            let ev =
                (0u32..128, 0..end, 1u64..960, 0u32..128).prop_map(move |(p, onset, dur, vel)| {
                    NoteEvent::new(p, onset, dur.min(end - onset), vel).unwrap()
                });
            (Just(bars), prop::collection::vec(ev, 0..24))
        })
        .prop_map(|(bars, events)| NoteSequence::from_unsorted(events, bars).unwrap())
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e9..1e9f64,
        Just(0.0),
        Just(-0.0),
        any::<i32>().prop_map(f64::from)
    ]
}

fn text() -> impl Strategy<Value = String> {
    "[ -~\u{e9}\u{266a}\"\\\\]{0,24}"
}

pub fn arb_control() -> impl Strategy<Value = ControlSetting> {
    prop_oneof![
        finite().prop_map(ControlSetting::Temperature),
        any::<i32>().prop_map(ControlSetting::Transpose),
        finite().prop_map(ControlSetting::Volume),
        prop_oneof![
            Just(EngagementMode::Manual),
            Just(EngagementMode::Hybrid),
            Just(EngagementMode::Auto)
        ]
        .prop_map(ControlSetting::Mode),
        any::<bool>().prop_map(ControlSetting::AutoFade),
    ]
}

pub fn arb_message() -> impl Strategy<Value = Message> {
    let tempo_steps = prop::collection::vec((any::<u32>(), finite()), 0..4).prop_map(|v| {
        v.into_iter()
            .map(|(bar, tempo_bpm)| TempoStep { bar, tempo_bpm })
            .collect::<Vec<_>>()
    });
    prop_oneof![
        (
            text(),
            prop_oneof![Just(Role::Performer), Just(Role::Conductor)]
        )
            .prop_map(|(client_name, role)| Message::Hello { client_name, role }),
        (any::<u32>(), any::<u32>()).prop_map(|(performer_id, n_expected)| Message::Welcome {
            performer_id,
            n_expected
        }),
        text().prop_map(|reason| Message::Reject { reason }),
        (arb_progression(), arb_sequence(), finite(), any::<u32>()).prop_map(
            |(progression, seed_melody, tempo_bpm, ppq)| Message::Seed {
                progression,
                seed_melody,
                tempo_bpm,
                ppq
            }
        ),
        any::<u32>().prop_map(|performer_id| Message::Ready { performer_id }),
        Just(Message::RequestStart {}),
        finite().prop_map(|start_epoch_ms| Message::Start { start_epoch_ms }),
        Just(Message::Stop {}),
        finite().prop_map(|client_send_ms| Message::ClockPing { client_send_ms }),
        (finite(), finite()).prop_map(|(client_send_ms, server_ms)| Message::ClockPong {
            client_send_ms,
            server_ms
        }),
        (any::<u32>(), any::<u64>()).prop_map(|(performer_id, freeze_start_tick)| {
            Message::GenStart {
                performer_id,
                freeze_start_tick,
            }
        }),
        (any::<u32>(), finite()).prop_map(|(performer_id, latency_ms)| Message::GenDone {
            performer_id,
            latency_ms
        }),
        (any::<u32>(), arb_control()).prop_map(|(performer_id, setting)| Message::Control {
            performer_id,
            setting
        }),
        (finite(), any::<u32>()).prop_map(|(tempo_bpm, effective_bar)| Message::TempoChange {
            tempo_bpm,
            effective_bar
        }),
        prop::collection::vec((any::<u32>(), text()), 0..4).prop_map(|v| Message::Plan {
            instructions: v
                .into_iter()
                .map(|(bar, text)| PlanInstruction { bar, text })
                .collect()
        }),
        any::<u32>().prop_map(|performer_id| Message::Rejoin { performer_id }),
        (any::<u32>(), finite(), tempo_steps, finite(), any::<u64>()).prop_map(
            |(performer_id, start_epoch_ms, tempo_changes, server_ms, server_tick)| {
                Message::Resync {
                    performer_id,
                    start_epoch_ms,
                    tempo_changes,
                    server_ms,
                    server_tick,
                }
            }
        ),
        any::<u32>().prop_map(|performer_id| Message::Bye { performer_id }),
    ]
}

/// A probability vector with at least one positive entry and a unique maximum.
pub fn arb_distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, 2..14).prop_filter_map("needs a unique positive max", |w| {
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let p: Vec<f64> = w.iter().map(|x| x / total).collect();
        let max = p.iter().cloned().fold(0.0, f64::max);
        let ties = p.iter().filter(|x| **x == max).count();
        (ties == 1).then_some(p)
    })
}
