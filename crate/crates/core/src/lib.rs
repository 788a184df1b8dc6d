//! Core of a networked laptop-ensemble performance system: a conductor that
//! owns the transport clock, performers that generate chord-conditioned
//! melodies in staggered 16-bar windows, the wire protocol between them, and
//! a deterministic simulator that drives the same state machines on a
//! virtual clock.

pub mod conductor;
pub mod generator;
pub mod music;
pub mod performer;
pub mod protocol;
pub mod sim;
pub mod stagger;
pub mod sweep;
