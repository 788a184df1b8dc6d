//! WebSocket driver for a [`Performer`].
//!
//! The engine is stepped from one task; generations run on the blocking pool
//! and report back over a channel no earlier than their modelled latency.
//! On a lost connection the client keeps retrying and rejoins under its id.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail};
use ensemble_core::generator::{GenerationResult, GeneratorError, GeneratorModel};
use ensemble_core::performer::{EngineConfig, EngineOutput, Performer, ResyncRecord};
use ensemble_core::protocol::{decode_text, encode_text, HandshakeState, Message};
use ensemble_core::stagger::FreezeRecord;
use futures::{SinkExt, StreamExt};
use log::{info, warn};
use tokio::sync::mpsc;
use tokio::time::{sleep, sleep_until, Instant};
use tokio_tungstenite::tungstenite::Message as WsMessage;

use crate::commands::PerformerCommand;
use crate::server::WallClock;
use crate::sink::Sink;

#[derive(Debug, Clone)]
pub struct PerformOptions {
    /// e.g. `ws://127.0.0.1:8765/ws`
    pub url: String,
    pub engine: EngineConfig,
    pub model: GeneratorModel,
    pub reconnect_interval: Duration,
    /// Give up after this many consecutive failed connection attempts.
    pub max_attempts: u32,
}

impl PerformOptions {
    pub fn new(url: impl Into<String>, engine: EngineConfig) -> Self {
        PerformOptions {
            url: url.into(),
            engine,
            model: GeneratorModel::default_with_seed(0),
            reconnect_interval: Duration::from_millis(500),
            max_attempts: 120,
        }
    }
}

/// `host:port` or a full `ws://` URL.
pub fn ws_url(host: &str) -> String {
    if host.starts_with("ws://") || host.starts_with("wss://") {
        host.to_string()
    } else {
        format!("ws://{host}/ws")
    }
}

#[derive(Debug, Clone, Default)]
pub struct PerformSummary {
    pub performer_id: Option<u32>,
    pub events: usize,
    pub freezes: Vec<FreezeRecord>,
    pub resyncs: Vec<ResyncRecord>,
    pub underruns: Vec<u32>,
    pub reconnects: u32,
}

type Completion = (u64, Result<GenerationResult, GeneratorError>);

struct Driver<'a, S: Sink> {
    engine: Performer,
    clock: WallClock,
    model: Arc<GeneratorModel>,
    sink: &'a mut S,
    done_tx: mpsc::UnboundedSender<Completion>,
    outbox: Vec<Message>,
    events: usize,
}

impl<S: Sink> Driver<'_, S> {
    fn now(&self) -> f64 {
        self.clock.now_ms()
    }

    fn dispatch(&mut self, out: Vec<EngineOutput>) -> anyhow::Result<()> {
        for o in out {
            match o {
                EngineOutput::Send(msg) => self.outbox.push(msg),
                EngineOutput::Sink(e) => {
                    self.events += 1;
                    if let Err(err) = self.sink.emit(&e) {
                        warn!("event=sink_error reason=\"{err}\"");
                    }
                }
                EngineOutput::Volume(v) => {
                    if let Err(err) = self.sink.volume(&v) {
                        warn!("event=sink_error reason=\"{err}\"");
                    }
                }
                EngineOutput::Generate(job) => {
                    let model = self.model.clone();
                    let tx = self.done_tx.clone();
                    let started = Instant::now();
                    tokio::spawn(async move {
                        let id = job.id;
                        let result =
                            match tokio::task::spawn_blocking(move || job.run(&*model)).await {
                                Ok(r) => r,
                                Err(e) => Err(GeneratorError::Latency(format!(
                                    "generation task failed: {e}"
                                ))),
                            };
                        if let Ok(r) = &result {
                            sleep_until(started + Duration::from_secs_f64(r.latency_ms / 1000.0))
                                .await;
                        }
                        let _ = tx.send((id, result));
                    });
                }
                EngineOutput::Abort(reason) => bail!("engine aborted: {reason}"),
            }
        }
        Ok(())
    }

    fn wake_at(&self) -> Option<Instant> {
        self.engine
            .next_wakeup()
            .map(|ms| Instant::from_std(self.clock.instant_at(ms)))
    }

    fn summary(&self, reconnects: u32) -> PerformSummary {
        PerformSummary {
            performer_id: self.engine.performer_id(),
            events: self.events,
            freezes: self.engine.freeze_records().to_vec(),
            resyncs: self.engine.resyncs().to_vec(),
            underruns: self.engine.underruns().to_vec(),
            reconnects,
        }
    }
}

fn apply_command<S: Sink>(d: &mut Driver<'_, S>, cmd: PerformerCommand) -> anyhow::Result<()> {
    let now = d.now();
    let out = match cmd {
        PerformerCommand::NoteOn { pitch, velocity } => {
            d.engine.manual_note_on(pitch, velocity, now)
        }
        PerformerCommand::NoteOff { pitch } => d.engine.manual_note_off(pitch, now),
        PerformerCommand::Control(setting) => match d.engine.handle_control(setting, now) {
            Ok(out) => out,
            Err(e) => {
                warn!("event=control_rejected reason=\"{e}\"");
                Vec::new()
            }
        },
    };
    d.dispatch(out)
}

/// Runs one performer until the conductor stops the piece, `shutdown`
/// resolves, or the server stays unreachable for `max_attempts` tries.
pub async fn perform<S: Sink>(
    opts: PerformOptions,
    sink: &mut S,
    mut commands: Option<mpsc::UnboundedReceiver<PerformerCommand>>,
    shutdown: impl Future<Output = ()>,
) -> anyhow::Result<PerformSummary> {
    let (done_tx, mut done_rx) = mpsc::unbounded_channel();
    let mut d = Driver {
        engine: Performer::new(opts.engine.clone()),
        clock: WallClock::new(),
        model: Arc::new(opts.model.clone()),
        sink,
        done_tx,
        outbox: Vec::new(),
        events: 0,
    };
    tokio::pin!(shutdown);
    let mut failures = 0u32;
    let mut reconnects = 0u32;
    let mut ever_connected = false;

    loop {
        let ws = tokio::select! {
            r = tokio_tungstenite::connect_async(opts.url.as_str()) => r,
            _ = &mut shutdown => break,
        };
        let ws = match ws {
            Ok((ws, _)) => ws,
            Err(e) => {
                failures += 1;
                if failures >= opts.max_attempts {
                    return Err(anyhow!(
                        "giving up on {} after {failures} attempts: {e}",
                        opts.url
                    ));
                }
                tokio::select! {
                    _ = sleep(opts.reconnect_interval) => {}
                    _ = &mut shutdown => break,
                }
                continue;
            }
        };
        failures = 0;
        if ever_connected {
            reconnects += 1;
        }
        ever_connected = true;
        info!("event=connected url={}", opts.url);
        let (mut tx, mut rx) = ws.split();
        let now = d.now();
        let out = d.engine.connect(now);
        d.dispatch(out)?;

        let lost = loop {
            for msg in std::mem::take(&mut d.outbox) {
                if tx
                    .send(WsMessage::Text(encode_text(&msg).into()))
                    .await
                    .is_err()
                {
                    break;
                }
            }
            if d.engine.handshake_state() == HandshakeState::Stopped {
                let _ = d.sink.flush();
                let _ = tx.send(WsMessage::Close(None)).await;
                return Ok(d.summary(reconnects));
            }
            let wake = d.wake_at();
            tokio::select! {
                frame = rx.next() => match frame {
                    Some(Ok(WsMessage::Text(t))) => match decode_text(&t) {
                        Ok(msg) => {
                            let now = d.now();
                            let out = d.engine.on_message(msg, now);
                            d.dispatch(out)?;
                        }
                        Err(e) => warn!("event=bad_frame reason=\"{e}\""),
                    },
                    Some(Ok(WsMessage::Close(_))) | Some(Err(_)) | None => break true,
                    Some(Ok(_)) => {}
                },
                Some((id, result)) = done_rx.recv() => {
                    let now = d.now();
                    let out = d.engine.on_generation_complete(id, result, now);
                    d.dispatch(out)?;
                }
                _ = async { sleep_until(wake.unwrap_or_else(Instant::now)).await }, if wake.is_some() => {
                    let now = d.now();
                    let out = d.engine.poll(now);
                    d.dispatch(out)?;
                }
                Some(cmd) = async {
                    match commands.as_mut() {
                        Some(rx) => rx.recv().await,
                        None => std::future::pending().await,
                    }
                } => apply_command(&mut d, cmd)?,
                _ = &mut shutdown => break false,
            }
        };
        if !lost {
            let _ = tx.send(WsMessage::Close(None)).await;
            break;
        }
        warn!("event=connection_lost");
        let now = d.now();
        let out = d.engine.on_disconnect(now);
        d.dispatch(out)?;
        d.outbox.clear();
        if d.engine.handshake_state() == HandshakeState::Stopped {
            break;
        }
        tokio::select! {
            _ = sleep(opts.reconnect_interval) => {}
            _ = &mut shutdown => break,
        }
    }
    let _ = d.sink.flush();
    Ok(d.summary(reconnects))
}
