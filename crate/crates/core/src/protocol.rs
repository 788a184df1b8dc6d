//! Wire vocabulary between the conductor and its clients, the client
//! handshake state machine, and clock-offset estimation.
//!
//! Every frame is a UTF-8 JSON object with a protocol version `v` and a
//! `type` tag; field names are the public contract shared with the browser
//! clients.

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::generator::Temperature;
use crate::music::{ChordProgression, NoteSequence, TempoStep, Tick};

pub const PROTOCOL_VERSION: u64 = 1;
pub const DEFAULT_PORT: u16 = 8765;
pub const MIN_CLOCK_SAMPLES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[default]
    Performer,
    Conductor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngagementMode {
    /// Human notes only; the model keeps generating but is not heard.
    Manual,
    Hybrid,
    #[default]
    Auto,
}

impl std::str::FromStr for EngagementMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "manual" => Ok(EngagementMode::Manual),
            "hybrid" => Ok(EngagementMode::Hybrid),
            "auto" => Ok(EngagementMode::Auto),
            _ => Err(format!("unknown mode `{s}`")),
        }
    }
}

/// One live control change, encoded as `"field": ..., "value": ...`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "field", content = "value", rename_all = "snake_case")]
pub enum ControlSetting {
    Temperature(f64),
    Transpose(i32),
    Volume(f64),
    Mode(EngagementMode),
    AutoFade(bool),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanInstruction {
    pub bar: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Message {
    Hello {
        client_name: String,
        #[serde(default)]
        role: Role,
    },
    Welcome {
        performer_id: u32,
        n_expected: u32,
    },
    Reject {
        reason: String,
    },
    Seed {
        progression: ChordProgression,
        seed_melody: NoteSequence,
        tempo_bpm: f64,
        ppq: u32,
    },
    Ready {
        performer_id: u32,
    },
    /// Sent by a conductor client to ask the server to start.
    RequestStart {},
    Start {
        start_epoch_ms: f64,
    },
    Stop {},
    ClockPing {
        client_send_ms: f64,
    },
    ClockPong {
        client_send_ms: f64,
        server_ms: f64,
    },
    GenStart {
        performer_id: u32,
        freeze_start_tick: Tick,
    },
    GenDone {
        performer_id: u32,
        latency_ms: f64,
    },
    Control {
        performer_id: u32,
        #[serde(flatten)]
        setting: ControlSetting,
    },
    TempoChange {
        tempo_bpm: f64,
        effective_bar: u32,
    },
    Plan {
        instructions: Vec<PlanInstruction>,
    },
    /// A performer reconnecting under its previous id.
    Rejoin {
        performer_id: u32,
    },
    /// Server state sent to a rejoining performer after its Seed.
    Resync {
        performer_id: u32,
        start_epoch_ms: f64,
        tempo_changes: Vec<TempoStep>,
        server_ms: f64,
        server_tick: Tick,
    },
    Bye {
        performer_id: u32,
    },
}

impl Message {
    pub fn tag(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "Hello",
            Message::Welcome { .. } => "Welcome",
            Message::Reject { .. } => "Reject",
            Message::Seed { .. } => "Seed",
            Message::Ready { .. } => "Ready",
            Message::RequestStart {} => "RequestStart",
            Message::Start { .. } => "Start",
            Message::Stop {} => "Stop",
            Message::ClockPing { .. } => "ClockPing",
            Message::ClockPong { .. } => "ClockPong",
            Message::GenStart { .. } => "GenStart",
            Message::GenDone { .. } => "GenDone",
            Message::Control { .. } => "Control",
            Message::TempoChange { .. } => "TempoChange",
            Message::Plan { .. } => "Plan",
            Message::Rejoin { .. } => "Rejoin",
            Message::Resync { .. } => "Resync",
            Message::Bye { .. } => "Bye",
        }
    }
}

const KNOWN_TAGS: &[&str] = &[
    "Hello",
    "Welcome",
    "Reject",
    "Seed",
    "Ready",
    "RequestStart",
    "Start",
    "Stop",
    "ClockPing",
    "ClockPong",
    "GenStart",
    "GenDone",
    "Control",
    "TempoChange",
    "Plan",
    "Rejoin",
    "Resync",
    "Bye",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("empty payload")]
    Empty,
    #[error("payload is not a JSON object: {0}")]
    NotAnObject(String),
    #[error("missing `type` tag")]
    MissingTag,
    #[error("unknown message type `{0}`")]
    UnknownTag(String),
    #[error("unsupported protocol version {0:?}")]
    Version(Option<u64>),
    #[error("malformed `{tag}` message: {reason}")]
    Malformed { tag: String, reason: String },
}

pub fn encode(msg: &Message) -> Vec<u8> {
    encode_text(msg).into_bytes()
}

pub fn encode_text(msg: &Message) -> String {
    let mut value = serde_json::to_value(msg).expect("messages always serialize");
    if let Value::Object(map) = &mut value {
        map.insert("v".into(), Value::from(PROTOCOL_VERSION));
    }
    value.to_string()
}

pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(DecodeError::Empty);
    }
    let mut value: Value =
        serde_json::from_slice(bytes).map_err(|e| DecodeError::NotAnObject(e.to_string()))?;
    let map = value
        .as_object_mut()
        .ok_or_else(|| DecodeError::NotAnObject("top-level value is not an object".into()))?;
    let tag = match map.get("type") {
        Some(Value::String(t)) => t.clone(),
        _ => return Err(DecodeError::MissingTag),
    };
    if !KNOWN_TAGS.contains(&tag.as_str()) {
        return Err(DecodeError::UnknownTag(tag));
    }
    match map.remove("v").map(|v| v.as_u64()) {
        Some(Some(PROTOCOL_VERSION)) => {}
        Some(v) => return Err(DecodeError::Version(v)),
        None => return Err(DecodeError::Version(None)),
    }
    serde_json::from_value(value).map_err(|e| DecodeError::Malformed {
        tag,
        reason: e.to_string(),
    })
}

pub fn decode_text(text: &str) -> Result<Message, DecodeError> {
    decode(text.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HandshakeState {
    Connected,
    Welcomed,
    Seeded,
    ModelReady,
    Running,
    Stopped,
}

/// Inputs to the client handshake: a server message or the local signal that
/// both initial buffers exist.
#[derive(Debug, Clone, Copy)]
pub enum HandshakeInput<'a> {
    Message(&'a Message),
    ModelReady,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HandshakeAction {
    BeginInitialGeneration,
    SendReady,
    BeginPlayback {
        start_epoch_ms: f64,
    },
    Halt,
    ProtocolViolation {
        state: HandshakeState,
        input: String,
    },
}

/// Client handshake transition. Out-of-order inputs leave the state unchanged
/// and produce a violation action.
pub fn handshake_step(
    state: HandshakeState,
    input: HandshakeInput<'_>,
) -> (HandshakeState, Vec<HandshakeAction>) {
    use HandshakeState::*;
    match (state, input) {
        (_, HandshakeInput::Message(Message::Stop {})) => (Stopped, vec![HandshakeAction::Halt]),
        (Connected, HandshakeInput::Message(Message::Welcome { .. })) => (Welcomed, vec![]),
        (Welcomed, HandshakeInput::Message(Message::Seed { .. })) => {
            (Seeded, vec![HandshakeAction::BeginInitialGeneration])
        }
        (Seeded, HandshakeInput::ModelReady) => (ModelReady, vec![HandshakeAction::SendReady]),
        (ModelReady, HandshakeInput::Message(Message::Start { start_epoch_ms })) => (
            Running,
            vec![HandshakeAction::BeginPlayback {
                start_epoch_ms: *start_epoch_ms,
            }],
        ),
        (state, input) => {
            let input = match input {
                HandshakeInput::Message(m) => m.tag().to_string(),
                HandshakeInput::ModelReady => "ModelReady".to_string(),
            };
            warn!("event=protocol_violation state={state:?} input={input}");
            (
                state,
                vec![HandshakeAction::ProtocolViolation { state, input }],
            )
        }
    }
}

/// One ping exchange, all times in ms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockSample {
    pub client_send_ms: f64,
    pub server_ms: f64,
    pub client_recv_ms: f64,
}

impl ClockSample {
    pub fn rtt_ms(&self) -> f64 {
        self.client_recv_ms - self.client_send_ms
    }

    pub fn offset_ms(&self) -> f64 {
        self.server_ms - (self.client_send_ms + self.rtt_ms() / 2.0)
    }
}

/// `server_clock - client_clock`, from the median of the retained samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ClockEstimate {
    pub offset_ms: f64,
    /// `(rtt_ms, offset_sample)` of every sample considered.
    pub rtt_samples: Vec<(f64, f64)>,
}

impl ClockEstimate {
    pub fn server_ms(&self, local_ms: f64) -> f64 {
        local_ms + self.offset_ms
    }

    pub fn local_ms(&self, server_ms: f64) -> f64 {
        server_ms - self.offset_ms
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClockError {
    #[error("need at least {MIN_CLOCK_SAMPLES} samples, have {0}")]
    InsufficientSamples(usize),
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Cristian-style estimate: samples whose round trip exceeds three times the
/// median round trip are discarded, then the median offset is taken.
pub fn estimate_offset(samples: &[ClockSample]) -> Result<ClockEstimate, ClockError> {
    if samples.len() < MIN_CLOCK_SAMPLES {
        return Err(ClockError::InsufficientSamples(samples.len()));
    }
    let rtt_samples: Vec<(f64, f64)> = samples
        .iter()
        .map(|s| (s.rtt_ms(), s.offset_ms()))
        .collect();
    let mut rtts: Vec<f64> = rtt_samples.iter().map(|s| s.0).collect();
    let cutoff = 3.0 * median(&mut rtts);
    let mut kept: Vec<f64> = rtt_samples
        .iter()
        .filter(|s| s.0 <= cutoff)
        .map(|s| s.1)
        .collect();
    if kept.is_empty() {
        // only possible when every rtt is negative or NaN
        kept = rtt_samples.iter().map(|s| s.1).collect();
    }
    Ok(ClockEstimate {
        offset_ms: median(&mut kept),
        rtt_samples,
    })
}

/// Client-side ping bookkeeping with a sliding window of samples.
#[derive(Debug, Clone, Default)]
pub struct ClockSync {
    samples: Vec<ClockSample>,
    estimate: Option<ClockEstimate>,
    window: usize,
}

impl ClockSync {
    pub fn new(window: usize) -> Self {
        ClockSync {
            samples: Vec::new(),
            estimate: None,
            window: window.max(MIN_CLOCK_SAMPLES),
        }
    }

    pub fn record(&mut self, sample: ClockSample) {
        self.samples.push(sample);
        if self.samples.len() > self.window {
            self.samples.remove(0);
        }
        if let Ok(e) = estimate_offset(&self.samples) {
            self.estimate = Some(e);
        }
    }

    pub fn estimate(&self) -> Option<&ClockEstimate> {
        self.estimate.as_ref()
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }
}

/// Range-checks a control value.
pub fn validate_control(setting: &ControlSetting) -> Result<(), String> {
    match *setting {
        ControlSetting::Temperature(t) => {
            Temperature::new(t).map(|_| ()).map_err(|e| e.to_string())
        }
        ControlSetting::Transpose(k) if !(-36..=36).contains(&k) => {
            Err(format!("transpose {k} outside [-36, 36]"))
        }
        ControlSetting::Volume(v) if !(0.0..=1.0).contains(&v) => {
            Err(format!("volume {v} outside [0, 1]"))
        }
        _ => Ok(()),
    }
}
