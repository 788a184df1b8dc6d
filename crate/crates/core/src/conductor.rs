//! The conductor: session registry, authoritative transport clock, seed
//! distribution, start/stop, tempo and progression control, plan broadcast
//! and disconnect handling.
//!
//! [`Conductor`] performs no I/O. Drivers feed it connection events and
//! decoded messages with the current server time and deliver the returned
//! [`Outbound`] frames in order.

use std::collections::BTreeMap;

use log::{info, warn};
use thiserror::Error;

use crate::music::{bar_of, ChordProgression, MusicError, NoteSequence, TempoMap, Tick, PPQ};
use crate::protocol::{HandshakeState, Message, PlanInstruction, Role};

pub type ConnId = u64;

pub const DEFAULT_LEAD_IN_MS: f64 = 1000.0;
pub const DEFAULT_GRACE_MS: f64 = 60_000.0;
pub const MIN_TEMPO_BPM: f64 = 40.0;
pub const MAX_TEMPO_BPM: f64 = 240.0;
const LATENCY_EMA_ALPHA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConductorError {
    #[error("tempo {0} BPM outside [40, 240]")]
    TempoRange(f64),
    #[error("tempo change at bar {requested} is not after the current bar {current}")]
    TempoNotInFuture { requested: u32, current: u32 },
    #[error("progression cannot change once the performance is running")]
    ProgressionWhileRunning,
    #[error(transparent)]
    Music(#[from] MusicError),
    #[error("plan line {line}: {reason}")]
    PlanParse { line: usize, reason: String },
}

/// Bar-indexed performance instructions, sorted by bar.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PerformancePlan {
    instructions: Vec<PlanInstruction>,
}

impl PerformancePlan {
    pub fn new(mut instructions: Vec<PlanInstruction>) -> Self {
        instructions.sort_by_key(|i| i.bar);
        PerformancePlan { instructions }
    }

    pub fn instructions(&self) -> &[PlanInstruction] {
        &self.instructions
    }

    /// Accepts `@Bar <n>: <text>` or `<n>: <text>` per line.
    pub fn from_text(text: &str) -> Result<Self, ConductorError> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| ConductorError::PlanParse {
                line: i + 1,
                reason: reason.to_string(),
            };
            let body = l
                .strip_prefix("@Bar")
                .or_else(|| l.strip_prefix("@bar"))
                .unwrap_or(l);
            let (bar, text) = body
                .split_once(':')
                .ok_or_else(|| bad("expected `@Bar <n>: <text>`"))?;
            let bar = bar
                .trim()
                .parse::<u32>()
                .map_err(|_| bad("bar is not a number"))?;
            out.push(PlanInstruction {
                bar,
                text: text.trim().to_string(),
            });
        }
        Ok(PerformancePlan::new(out))
    }

    /// Instruction in force at `bar`, if any has started.
    pub fn active_at(&self, bar: u32) -> Option<&PlanInstruction> {
        self.instructions.iter().rev().find(|i| i.bar <= bar)
    }
}

#[derive(Debug, Clone)]
pub struct ConductorConfig {
    pub n_expected: u32,
    pub tempo_bpm: f64,
    pub progression: ChordProgression,
    pub seed_melody: NoteSequence,
    pub plan: PerformancePlan,
    pub lead_in_ms: f64,
    pub grace_ms: f64,
    /// Start as soon as `n_expected` performers report ready.
    pub auto_start: bool,
}

impl ConductorConfig {
    pub fn new(
        n_expected: u32,
        tempo_bpm: f64,
        progression: ChordProgression,
        seed_melody: NoteSequence,
    ) -> Self {
        ConductorConfig {
            n_expected,
            tempo_bpm,
            progression,
            seed_melody,
            plan: PerformancePlan::default(),
            lead_in_ms: DEFAULT_LEAD_IN_MS,
            grace_ms: DEFAULT_GRACE_MS,
            auto_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub performer_id: u32,
    pub name: String,
    pub state: HandshakeState,
    pub last_seen_ms: f64,
    pub latency_ema_ms: Option<f64>,
    pub conn: Option<ConnId>,
    pub lost_at_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Peer {
    Pending,
    Performer(u32),
    Observer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Gathering,
    Running,
    Stopped,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outbound {
    To(ConnId, Message),
    Close(ConnId),
}

#[derive(Debug)]
pub struct Conductor {
    config: ConductorConfig,
    sessions: BTreeMap<u32, Session>,
    peers: BTreeMap<ConnId, Peer>,
    phase: Phase,
    tempo: TempoMap,
    start_epoch_ms: Option<f64>,
    starts_sent: u32,
}

impl Conductor {
    pub fn new(config: ConductorConfig) -> Result<Self, ConductorError> {
        check_tempo(config.tempo_bpm)?;
        let tempo = TempoMap::new(0.0, config.tempo_bpm)?;
        Ok(Conductor {
            config,
            sessions: BTreeMap::new(),
            peers: BTreeMap::new(),
            phase: Phase::Gathering,
            tempo,
            start_epoch_ms: None,
            starts_sent: 0,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn session(&self, performer_id: u32) -> Option<&Session> {
        self.sessions.get(&performer_id)
    }

    pub fn start_epoch_ms(&self) -> Option<f64> {
        self.start_epoch_ms
    }

    pub fn starts_sent(&self) -> u32 {
        self.starts_sent
    }

    pub fn tempo_map(&self) -> &TempoMap {
        &self.tempo
    }

    pub fn config(&self) -> &ConductorConfig {
        &self.config
    }

    /// Server tick at `now_ms`, once running.
    pub fn current_tick(&self, now_ms: f64) -> Option<Tick> {
        self.start_epoch_ms?;
        self.tempo.ms_to_tick(now_ms).ok()
    }

    pub fn connect(&mut self, conn: ConnId) {
        self.peers.insert(conn, Peer::Pending);
    }

    fn seed_message(&self) -> Message {
        Message::Seed {
            progression: self.config.progression.clone(),
            seed_melody: self.config.seed_melody.clone(),
            tempo_bpm: self.tempo.steps()[0].tempo_bpm,
            ppq: PPQ,
        }
    }

    fn plan_message(&self) -> Message {
        Message::Plan {
            instructions: self.config.plan.instructions().to_vec(),
        }
    }

    fn broadcast(&self, msg: &Message) -> Vec<Outbound> {
        self.peers
            .iter()
            .filter(|(_, p)| !matches!(p, Peer::Pending))
            .map(|(c, _)| Outbound::To(*c, msg.clone()))
            .collect()
    }

    fn to_observers(&self, msg: &Message) -> Vec<Outbound> {
        self.peers
            .iter()
            .filter(|(_, p)| matches!(p, Peer::Observer))
            .map(|(c, _)| Outbound::To(*c, msg.clone()))
            .collect()
    }

    /// Registers a performer under the lowest free id. Late joins are
    /// rejected once the performance is running.
    pub fn admit(&mut self, conn: ConnId, client_name: &str, now_ms: f64) -> Message {
        if self.phase != Phase::Gathering {
            warn!("event=reject reason=running name={client_name}");
            return Message::Reject {
                reason: "performance already running; rejoin with your performer id".into(),
            };
        }
        let Some(id) = (0..self.config.n_expected).find(|i| !self.sessions.contains_key(i)) else {
            warn!("event=reject reason=full name={client_name}");
            return Message::Reject {
                reason: format!("ensemble full ({} performers)", self.config.n_expected),
            };
        };
        self.sessions.insert(
            id,
            Session {
                performer_id: id,
                name: client_name.to_string(),
                state: HandshakeState::Welcomed,
                last_seen_ms: now_ms,
                latency_ema_ms: None,
                conn: Some(conn),
                lost_at_ms: None,
            },
        );
        self.peers.insert(conn, Peer::Performer(id));
        info!("event=admit performer_id={id} name={client_name} conn={conn}");
        Message::Welcome {
            performer_id: id,
            n_expected: self.config.n_expected,
        }
    }

    pub fn receive(&mut self, conn: ConnId, msg: Message, now_ms: f64) -> Vec<Outbound> {
        let peer = *self.peers.entry(conn).or_insert(Peer::Pending);
        if let Peer::Performer(id) = peer {
            if let Some(s) = self.sessions.get_mut(&id) {
                s.last_seen_ms = now_ms;
            }
        }
        match (peer, msg) {
            (_, Message::ClockPing { client_send_ms }) => vec![Outbound::To(
                conn,
                Message::ClockPong {
                    client_send_ms,
                    server_ms: now_ms,
                },
            )],
            (
                Peer::Pending,
                Message::Hello {
                    client_name,
                    role: Role::Performer,
                },
            ) => {
                let reply = self.admit(conn, &client_name, now_ms);
                let mut out = vec![Outbound::To(conn, reply.clone())];
                if let Message::Welcome { performer_id, .. } = reply {
                    out.push(Outbound::To(conn, self.seed_message()));
                    out.push(Outbound::To(conn, self.plan_message()));
                    if let Some(s) = self.sessions.get_mut(&performer_id) {
                        s.state = HandshakeState::Seeded;
                    }
                }
                out
            }
            (
                Peer::Pending,
                Message::Hello {
                    client_name,
                    role: Role::Conductor,
                },
            ) => {
                info!("event=observer conn={conn} name={client_name}");
                self.peers.insert(conn, Peer::Observer);
                vec![
                    Outbound::To(conn, self.seed_message()),
                    Outbound::To(conn, self.plan_message()),
                ]
            }
            (Peer::Pending, Message::Rejoin { performer_id }) => {
                self.handle_rejoin(conn, performer_id, now_ms)
            }
            (Peer::Performer(id), Message::Ready { .. }) => {
                if let Some(s) = self.sessions.get_mut(&id) {
                    if s.state == HandshakeState::Seeded {
                        s.state = HandshakeState::ModelReady;
                        info!("event=ready performer_id={id}");
                    }
                }
                let all_present = self.sessions.len() as u32 == self.config.n_expected;
                if self.config.auto_start && all_present && self.all_ready() {
                    self.start_when_ready(now_ms)
                } else {
                    Vec::new()
                }
            }
            (Peer::Performer(id), m @ Message::GenStart { .. }) => {
                info!("event=gen_start performer_id={id}");
                self.to_observers(&m)
            }
            (Peer::Performer(id), m @ Message::GenDone { latency_ms, .. }) => {
                if let Some(s) = self.sessions.get_mut(&id) {
                    s.latency_ema_ms = Some(match s.latency_ema_ms {
                        Some(prev) => {
                            LATENCY_EMA_ALPHA * latency_ms + (1.0 - LATENCY_EMA_ALPHA) * prev
                        }
                        None => latency_ms,
                    });
                }
                info!("event=gen_done performer_id={id} latency_ms={latency_ms:.1}");
                self.to_observers(&m)
            }
            // control echo from the performer, after applying it
            (Peer::Performer(_), m @ Message::Control { .. }) => self.to_observers(&m),
            (Peer::Performer(id), Message::Bye { .. }) => {
                info!("event=bye performer_id={id}");
                self.disconnect(conn, now_ms)
            }
            (Peer::Observer, m @ Message::Control { performer_id, .. }) => {
                self.route_control(performer_id, m)
            }
            (
                Peer::Observer,
                Message::TempoChange {
                    tempo_bpm,
                    effective_bar,
                },
            ) => self
                .set_tempo(tempo_bpm, effective_bar, now_ms)
                .unwrap_or_else(|e| {
                    warn!("event=tempo_rejected reason=\"{e}\"");
                    vec![Outbound::To(
                        conn,
                        Message::Reject {
                            reason: e.to_string(),
                        },
                    )]
                }),
            (Peer::Observer, Message::Seed { progression, .. }) => {
                self.set_progression(progression).unwrap_or_else(|e| {
                    warn!("event=progression_rejected reason=\"{e}\"");
                    vec![Outbound::To(
                        conn,
                        Message::Reject {
                            reason: e.to_string(),
                        },
                    )]
                })
            }
            (Peer::Observer, Message::Plan { instructions }) => {
                self.set_plan(PerformancePlan::new(instructions))
            }
            (Peer::Observer, Message::RequestStart {}) => self.start_when_ready(now_ms),
            (Peer::Observer, Message::Stop {}) => self.stop(now_ms),
            (peer, m) => {
                warn!(
                    "event=protocol_violation conn={conn} peer={peer:?} type={}",
                    m.tag()
                );
                Vec::new()
            }
        }
    }

    fn all_ready(&self) -> bool {
        !self.sessions.is_empty()
            && self
                .sessions
                .values()
                .all(|s| s.state == HandshakeState::ModelReady && s.conn.is_some())
    }

    /// Broadcasts Start once every admitted performer is ready; otherwise a
    /// warning and no output.
    pub fn start_when_ready(&mut self, now_ms: f64) -> Vec<Outbound> {
        if self.phase != Phase::Gathering {
            warn!("event=start_ignored reason=phase phase={:?}", self.phase);
            return Vec::new();
        }
        if !self.all_ready() {
            let ready = self
                .sessions
                .values()
                .filter(|s| s.state == HandshakeState::ModelReady)
                .count();
            warn!(
                "event=start_ignored reason=not_ready ready={ready} admitted={}",
                self.sessions.len()
            );
            return Vec::new();
        }
        let epoch = now_ms + self.config.lead_in_ms;
        let steps = self.tempo.steps();
        self.tempo = TempoMap::from_steps(epoch, &steps).expect("existing tempo steps are valid");
        self.start_epoch_ms = Some(epoch);
        self.phase = Phase::Running;
        self.starts_sent += 1;
        for s in self.sessions.values_mut() {
            s.state = HandshakeState::Running;
        }
        info!(
            "event=start start_epoch_ms={epoch:.3} performers={}",
            self.sessions.len()
        );
        self.broadcast(&Message::Start {
            start_epoch_ms: epoch,
        })
    }

    pub fn set_tempo(
        &mut self,
        tempo_bpm: f64,
        effective_bar: u32,
        now_ms: f64,
    ) -> Result<Vec<Outbound>, ConductorError> {
        check_tempo(tempo_bpm)?;
        let effective_bar = match self.phase {
            Phase::Running => {
                let current = self.current_tick(now_ms).map(bar_of).unwrap_or(0);
                if effective_bar <= current {
                    return Err(ConductorError::TempoNotInFuture {
                        requested: effective_bar,
                        current,
                    });
                }
                effective_bar
            }
            _ => 0,
        };
        self.tempo.set_tempo_at_bar(effective_bar, tempo_bpm)?;
        info!("event=tempo tempo_bpm={tempo_bpm} effective_bar={effective_bar}");
        Ok(self.broadcast(&Message::TempoChange {
            tempo_bpm,
            effective_bar,
        }))
    }

    pub fn set_progression(
        &mut self,
        progression: ChordProgression,
    ) -> Result<Vec<Outbound>, ConductorError> {
        if self.phase != Phase::Gathering {
            return Err(ConductorError::ProgressionWhileRunning);
        }
        self.config.progression = progression;
        for s in self.sessions.values_mut() {
            s.state = HandshakeState::Seeded;
        }
        info!(
            "event=progression entries={}",
            self.config.progression.entries().len()
        );
        Ok(self.broadcast(&self.seed_message()))
    }

    pub fn set_plan(&mut self, plan: PerformancePlan) -> Vec<Outbound> {
        self.config.plan = plan;
        info!(
            "event=plan instructions={}",
            self.config.plan.instructions().len()
        );
        self.broadcast(&self.plan_message())
    }

    pub fn route_control(&mut self, performer_id: u32, msg: Message) -> Vec<Outbound> {
        match self.sessions.get(&performer_id).and_then(|s| s.conn) {
            Some(c) => vec![Outbound::To(c, msg)],
            None => {
                warn!("event=control_dropped performer_id={performer_id}");
                Vec::new()
            }
        }
    }

    pub fn stop(&mut self, _now_ms: f64) -> Vec<Outbound> {
        if self.phase == Phase::Stopped {
            return Vec::new();
        }
        self.phase = Phase::Stopped;
        for s in self.sessions.values_mut() {
            s.state = HandshakeState::Stopped;
        }
        info!("event=stop");
        self.broadcast(&Message::Stop {})
    }

    /// Before the start a lost performer frees its id; once running the
    /// session is kept so its stagger slot stays reserved for a rejoin.
    pub fn disconnect(&mut self, conn: ConnId, now_ms: f64) -> Vec<Outbound> {
        let Some(peer) = self.peers.remove(&conn) else {
            return Vec::new();
        };
        if let Peer::Performer(id) = peer {
            let still_attached = self.sessions.get(&id).is_some_and(|s| s.conn == Some(conn));
            if !still_attached {
                return Vec::new();
            }
            if self.phase == Phase::Gathering {
                self.sessions.remove(&id);
                info!("event=disconnect performer_id={id} phase=gathering");
            } else if let Some(s) = self.sessions.get_mut(&id) {
                s.conn = None;
                s.lost_at_ms = Some(now_ms);
                info!("event=disconnect performer_id={id} phase=running slot_reserved=true");
            }
        }
        Vec::new()
    }

    /// Reattaches a running performer that lost its connection, re-sending the
    /// seed, plan and current transport position so it resumes in sync.
    pub fn handle_rejoin(&mut self, conn: ConnId, performer_id: u32, now_ms: f64) -> Vec<Outbound> {
        let reject = |reason: &str| {
            warn!("event=rejoin_rejected performer_id={performer_id} reason={reason}");
            vec![Outbound::To(
                conn,
                Message::Reject {
                    reason: reason.to_string(),
                },
            )]
        };
        if self.phase != Phase::Running {
            return reject("not_running");
        }
        let grace = self.config.grace_ms;
        let Some(session) = self.sessions.get_mut(&performer_id) else {
            return reject("unknown_performer");
        };
        let mut out = Vec::new();
        match (session.conn, session.lost_at_ms) {
            (None, Some(lost)) if now_ms - lost > grace => return reject("grace_expired"),
            (Some(old), _) => {
                // the old connection has not been noticed as dead yet
                self.peers.remove(&old);
                out.push(Outbound::Close(old));
            }
            _ => {}
        }
        session.conn = Some(conn);
        session.lost_at_ms = None;
        session.last_seen_ms = now_ms;
        self.peers.insert(conn, Peer::Performer(performer_id));
        let server_tick = self.current_tick(now_ms).unwrap_or(0);
        info!("event=rejoin performer_id={performer_id} server_tick={server_tick}");
        out.push(Outbound::To(
            conn,
            Message::Welcome {
                performer_id,
                n_expected: self.config.n_expected,
            },
        ));
        out.push(Outbound::To(conn, self.seed_message()));
        out.push(Outbound::To(conn, self.plan_message()));
        out.push(Outbound::To(
            conn,
            Message::Resync {
                performer_id,
                start_epoch_ms: self.start_epoch_ms.unwrap_or(0.0),
                tempo_changes: self.tempo.steps(),
                server_ms: now_ms,
                server_tick,
            },
        ));
        out
    }
}

fn check_tempo(bpm: f64) -> Result<(), ConductorError> {
    if (MIN_TEMPO_BPM..=MAX_TEMPO_BPM).contains(&bpm) {
        Ok(())
    } else {
        Err(ConductorError::TempoRange(bpm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::music::Chord;

    fn conductor(n: u32) -> Conductor {
        let prog = ChordProgression::single("Cmaj".parse::<Chord>().unwrap());
        Conductor::new(ConductorConfig::new(
            n,
            120.0,
            prog,
            NoteSequence::empty(16),
        ))
        .unwrap()
    }

    fn hello(name: &str) -> Message {
        Message::Hello {
            client_name: name.into(),
            role: Role::Performer,
        }
    }

    fn join_all(c: &mut Conductor, n: u32) {
        for i in 0..n {
            c.connect(i as ConnId);
            c.receive(i as ConnId, hello("p"), 0.0);
        }
    }

    fn ready_all(c: &mut Conductor, n: u32, now: f64) -> Vec<Outbound> {
        let mut out = Vec::new();
        for i in 0..n {
            out.extend(c.receive(i as ConnId, Message::Ready { performer_id: i }, now));
        }
        out
    }

    fn starts(out: &[Outbound]) -> Vec<(ConnId, f64)> {
        out.iter()
            .filter_map(|o| match o {
                Outbound::To(c, Message::Start { start_epoch_ms }) => Some((*c, *start_epoch_ms)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn admits_sequential_ids() {
        let mut c = conductor(4);
        for i in 0..4u64 {
            c.connect(i);
            let out = c.receive(i, hello("p"), 0.0);
            assert_eq!(
                out[0],
                Outbound::To(
                    i,
                    Message::Welcome {
                        performer_id: i as u32,
                        n_expected: 4
                    }
                )
            );
            assert!(matches!(out[1], Outbound::To(_, Message::Seed { .. })));
        }
        c.connect(9);
        assert!(matches!(
            c.receive(9, hello("late"), 0.0)[0],
            Outbound::To(9, Message::Reject { .. })
        ));
    }

    #[test]
    fn hello_while_running_rejected() {
        let mut c = conductor(1);
        join_all(&mut c, 1);
        ready_all(&mut c, 1, 5.0);
        assert_eq!(c.phase(), Phase::Running);
        assert!(matches!(c.admit(7, "late", 6.0), Message::Reject { .. }));
    }

    #[test]
    fn start_only_when_all_ready() {
        let mut c = conductor(4);
        join_all(&mut c, 4);
        for i in 0..3u32 {
            assert!(c
                .receive(i as u64, Message::Ready { performer_id: i }, 1.0)
                .is_empty());
        }
        assert!(c.start_when_ready(2.0).is_empty());
        assert_eq!(c.phase(), Phase::Gathering);
        let out = c.receive(3, Message::Ready { performer_id: 3 }, 10.0);
        let s = starts(&out);
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|(_, e)| *e == 1010.0));
        assert!(c.start_when_ready(20.0).is_empty());
        assert_eq!(c.starts_sent(), 1);
    }

    #[test]
    fn pings_answered_with_server_time() {
        let mut c = conductor(1);
        c.connect(0);
        let out = c.receive(
            0,
            Message::ClockPing {
                client_send_ms: 3.5,
            },
            42.0,
        );
        assert_eq!(
            out,
            vec![Outbound::To(
                0,
                Message::ClockPong {
                    client_send_ms: 3.5,
                    server_ms: 42.0
                }
            )]
        );
    }

    #[test]
    fn tempo_rules() {
        let mut c = conductor(1);
        join_all(&mut c, 1);
        ready_all(&mut c, 1, 0.0);
        // epoch at 1000 ms; bar 20 at 120 BPM is 40 s later
        let now = 1000.0 + 20.0 * 2000.0 + 1.0;
        assert_eq!(c.current_tick(now).map(bar_of), Some(20));
        let out = c.set_tempo(120.0, 32, now).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(
            c.set_tempo(300.0, 40, now),
            Err(ConductorError::TempoRange(300.0))
        );
        assert!(matches!(
            c.set_tempo(100.0, 20, now),
            Err(ConductorError::TempoNotInFuture { .. })
        ));
        assert_eq!(
            c.set_progression(ChordProgression::single("Gmaj".parse().unwrap())),
            Err(ConductorError::ProgressionWhileRunning)
        );
    }

    #[test]
    fn progression_change_before_start_reseeds() {
        let mut c = conductor(2);
        join_all(&mut c, 2);
        c.receive(0, Message::Ready { performer_id: 0 }, 0.0);
        let out = c
            .set_progression(ChordProgression::single("Amin".parse().unwrap()))
            .unwrap();
        assert_eq!(out.len(), 2);
        assert!(c.sessions().all(|s| s.state == HandshakeState::Seeded));
    }

    #[test]
    fn disconnect_and_rejoin() {
        let mut c = conductor(2);
        join_all(&mut c, 2);
        ready_all(&mut c, 2, 0.0);
        c.disconnect(1, 5_000.0);
        assert_eq!(c.session(1).unwrap().conn, None);
        c.connect(50);
        let out = c.receive(50, Message::Rejoin { performer_id: 1 }, 9_000.0);
        assert!(matches!(
            out[0],
            Outbound::To(
                50,
                Message::Welcome {
                    performer_id: 1,
                    ..
                }
            )
        ));
        match out.last().unwrap() {
            Outbound::To(50, Message::Resync { server_tick, .. }) => {
                assert_eq!(*server_tick, c.current_tick(9_000.0).unwrap())
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(c.session(1).unwrap().conn, Some(50));
        // same ids reserved
        let ids: Vec<u32> = c.sessions().map(|s| s.performer_id).collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn rejoin_rejections() {
        let mut c = conductor(1);
        join_all(&mut c, 1);
        ready_all(&mut c, 1, 0.0);
        c.connect(5);
        assert!(matches!(
            c.receive(5, Message::Rejoin { performer_id: 9 }, 1.0)[0],
            Outbound::To(5, Message::Reject { .. })
        ));
        c.disconnect(0, 100.0);
        c.connect(6);
        let late = 100.0 + DEFAULT_GRACE_MS + 1.0;
        assert!(matches!(
            c.receive(6, Message::Rejoin { performer_id: 0 }, late)[0],
            Outbound::To(6, Message::Reject { .. })
        ));
    }

    #[test]
    fn gathering_disconnect_frees_id() {
        let mut c = conductor(3);
        join_all(&mut c, 3);
        c.disconnect(1, 0.0);
        c.connect(10);
        let out = c.receive(10, hello("again"), 1.0);
        assert!(matches!(
            out[0],
            Outbound::To(
                10,
                Message::Welcome {
                    performer_id: 1,
                    ..
                }
            )
        ));
    }

    #[test]
    fn observer_routes_control_and_receives_echo() {
        use crate::protocol::ControlSetting;
        let mut c = conductor(1);
        join_all(&mut c, 1);
        c.connect(99);
        c.receive(
            99,
            Message::Hello {
                client_name: "desk".into(),
                role: Role::Conductor,
            },
            0.0,
        );
        let ctl = Message::Control {
            performer_id: 0,
            setting: ControlSetting::Volume(0.5),
        };
        assert_eq!(
            c.receive(99, ctl.clone(), 1.0),
            vec![Outbound::To(0, ctl.clone())]
        );
        assert_eq!(c.receive(0, ctl.clone(), 2.0), vec![Outbound::To(99, ctl)]);
    }

    #[test]
    fn gen_done_updates_ema() {
        let mut c = conductor(1);
        join_all(&mut c, 1);
        c.receive(
            0,
            Message::GenDone {
                performer_id: 0,
                latency_ms: 2000.0,
            },
            0.0,
        );
        c.receive(
            0,
            Message::GenDone {
                performer_id: 0,
                latency_ms: 1000.0,
            },
            0.0,
        );
        assert_eq!(c.session(0).unwrap().latency_ema_ms, Some(1500.0));
    }

    #[test]
    fn plan_parsing() {
        let plan = PerformancePlan::from_text(
            "@Bar 120: begin to lower the intensity until soft by bar 150\n0: open sparse\n",
        )
        .unwrap();
        assert_eq!(plan.instructions()[0].bar, 0);
        assert_eq!(plan.instructions()[1].bar, 120);
        assert_eq!(plan.active_at(130).unwrap().bar, 120);
        assert!(PerformancePlan::from_text("soon: play").is_err());
    }
}
