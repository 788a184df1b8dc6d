//! Batch execution of independent simulations and generations.
//!
//! With the `parallel` feature the batch is spread over rayon's pool; without
//! it, or with [`Execution::Sequential`], items run in order on the caller's
//! thread. Results are returned in input order either way.

use rand::SeedableRng;

use crate::generator::{GeneratorError, MelodyGenerator, SessionRng, Temperature};
use crate::music::{ChordProgression, NoteSequence};
use crate::sim::{run, SimConfig, SimError, SimReport};
use crate::stagger::freeze_bound_ms;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Parallel,
    Sequential,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

pub fn par_map<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

pub fn run_batch(configs: &[SimConfig], exec: Execution) -> Vec<Result<SimReport, SimError>> {
    par_map(configs, exec, |c| run(c.clone()))
}

/// One independent generation; `seed` fixes its random stream.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub prev: NoteSequence,
    pub progression: ChordProgression,
    pub start_bar: u32,
    pub temperature: Temperature,
    pub seed: u64,
}

pub fn generate_batch<G: MelodyGenerator>(
    generator: &G,
    requests: &[GenerationRequest],
    exec: Execution,
) -> Vec<Result<NoteSequence, GeneratorError>> {
    par_map(requests, exec, |r| {
        let mut rng = SessionRng::seed_from_u64(r.seed);
        generator.generate(
            &r.prev,
            &r.progression,
            r.start_bar,
            r.temperature,
            &mut rng,
        )
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCase {
    pub n_performers: u32,
    pub tempo_bpm: f64,
    pub freeze_ms: f64,
}

/// The cartesian product, keeping only freezes within the stagger bound.
pub fn bounded_cases(ns: &[u32], tempos: &[f64], freezes: &[f64]) -> Vec<SweepCase> {
    let mut out = Vec::new();
    for &n in ns {
        for &tempo_bpm in tempos {
            for &freeze_ms in freezes {
                if freeze_ms <= freeze_bound_ms(n, tempo_bpm) {
                    out.push(SweepCase {
                        n_performers: n,
                        tempo_bpm,
                        freeze_ms,
                    });
                }
            }
        }
    }
    out
}

impl SweepCase {
    pub fn config(&self, duration_bars: u32, seed: u64) -> SimConfig {
        SimConfig::new(
            self.n_performers,
            duration_bars,
            self.tempo_bpm,
            self.freeze_ms,
            seed,
        )
    }
}
