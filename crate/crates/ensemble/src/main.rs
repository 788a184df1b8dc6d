use std::fs;
use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use ensemble::client::{perform, ws_url, PerformOptions};
use ensemble::commands::{PerformerCommand, ServerCommand};
use ensemble::server;
use ensemble::sink::{LogSink, MidiSink, NullSink, Sink, Tee};
use ensemble_core::conductor::{ConductorConfig, PerformancePlan};
use ensemble_core::generator::{GeneratorModel, LatencyModel};
use ensemble_core::music::{ChordProgression, NoteSequence};
use ensemble_core::performer::{EngineConfig, SinkMode};
use ensemble_core::protocol::{ControlSetting, EngagementMode, DEFAULT_PORT};
use ensemble_core::sim::{self, default_progression, Scenario, SimConfig};
use tokio::sync::mpsc;

#[derive(Parser)]
#[command(
    name = "ensemble",
    version,
    about = "Networked laptop-ensemble performance system"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the conductor server.
    Server(ServerArgs),
    /// Run one performer engine against a server.
    Perform(PerformArgs),
    /// Simulate a whole ensemble on a virtual clock.
    Sim(SimArgs),
    /// Print the default generator model in its editable text format.
    DumpModel,
}

#[derive(Parser)]
struct ServerArgs {
    #[arg(long, env = "ENSEMBLE_PORT", default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "0.0.0.0")]
    bind: String,
    #[arg(long, default_value_t = 120.0)]
    tempo: f64,
    /// Progression file, one `<bar>:<chord>` per line.
    #[arg(long)]
    progression: Option<PathBuf>,
    /// Plan file, one `@Bar <n>: <text>` per line.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    performers: u32,
    /// Seed melody in the note-sequence text format.
    #[arg(long)]
    seed_melody: Option<PathBuf>,
    /// Directory served at `/` (the browser UI).
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1000.0)]
    lead_in_ms: f64,
    #[arg(long, default_value_t = 60_000.0)]
    grace_ms: f64,
    /// Wait for `start` on stdin instead of starting when all are ready.
    #[arg(long)]
    manual_start: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SinkKind {
    Log,
    Midi,
    Null,
}

#[derive(Parser)]
struct PerformArgs {
    /// `host:port` or a `ws://` URL.
    #[arg(long, default_value = "127.0.0.1:8765")]
    host: String,
    #[arg(long, default_value = "performer")]
    name: String,
    #[arg(long, default_value = "auto")]
    mode: EngagementMode,
    #[arg(long, value_enum, default_value = "log")]
    sink: SinkKind,
    /// Raw MIDI output device or file, for `--sink midi`.
    #[arg(long)]
    midi_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    midi_channel: u8,
    /// Also write every event to this file.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long, default_value = "non-blocking")]
    sink_mode: SinkMode,
    /// Fixed generation latency; the measured compute time when absent.
    #[arg(long)]
    freeze_ms: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    transpose: i32,
    #[arg(long, default_value_t = 1.0)]
    volume: f64,
    #[arg(long)]
    auto_fade: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generator model file (see `dump-model`).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Read note and control commands from stdin.
    #[arg(long)]
    stdin_commands: bool,
}

#[derive(Parser)]
struct SimArgs {
    #[arg(long, default_value_t = 4)]
    performers: u32,
    #[arg(long, default_value_t = 120)]
    bars: u32,
    #[arg(long, default_value_t = 120.0)]
    tempo: f64,
    #[arg(long, default_value_t = 2000.0)]
    freeze_ms: f64,
    /// Upper bound of a uniform freeze model starting at `--freeze-ms`.
    #[arg(long)]
    freeze_max_ms: Option<f64>,
    #[arg(long, default_value_t = 20.0)]
    latency: f64,
    #[arg(long, default_value_t = 5.0)]
    jitter: f64,
    #[arg(long, default_value_t = 0.0)]
    drop: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "nominal")]
    scenario: Scenario,
    #[arg(long, default_value = "blocking")]
    sink_mode: SinkMode,
    /// Comma-separated stagger offsets in bars, one per performer.
    #[arg(long, value_delimiter = ',')]
    offsets: Option<Vec<u32>>,
    #[arg(long)]
    progression: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn read(path: &PathBuf) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_progression(path: &Option<PathBuf>) -> anyhow::Result<ChordProgression> {
    match path {
        Some(p) => Ok(ChordProgression::from_text(&read(p)?)?),
        None => Ok(default_progression()),
    }
}

fn stdin_lines<T: std::str::FromStr<Err = anyhow::Error> + Send + 'static>(
) -> mpsc::UnboundedReceiver<T> {
    let (tx, rx) = mpsc::unbounded_channel();
    std::thread::spawn(move || {
        for line in io::stdin().lock().lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            match line.parse::<T>() {
                Ok(cmd) => {
                    if tx.send(cmd).is_err() {
                        break;
                    }
                }
                Err(e) => eprintln!("{e}"),
            }
        }
    });
    rx
}

async fn run_server(args: ServerArgs) -> anyhow::Result<ExitCode> {
    let progression = load_progression(&args.progression)?;
    let seed_melody = match &args.seed_melody {
        Some(p) => NoteSequence::from_text(&read(p)?)?,
        None => NoteSequence::empty(16),
    };
    let mut config = ConductorConfig::new(args.performers, args.tempo, progression, seed_melody);
    if let Some(p) = &args.plan {
        config.plan = PerformancePlan::from_text(&read(p)?)?;
    }
    config.lead_in_ms = args.lead_in_ms;
    config.grace_ms = args.grace_ms;
    config.auto_start = !args.manual_start;
    let bind: SocketAddr = format!("{}:{}", args.bind, args.port).parse()?;
    let handle = server::spawn(bind, config, args.static_dir).await?;
    eprintln!("listening on ws://{}/ws", handle.addr);
    let mut commands = stdin_lines::<ServerCommand>();
    loop {
        tokio::select! {
            Some(cmd) = commands.recv() => handle.command(cmd),
            _ = tokio::signal::ctrl_c() => break,
        }
    }
    handle.shutdown().await?;
    Ok(ExitCode::SUCCESS)
}

async fn run_perform(args: PerformArgs) -> anyhow::Result<ExitCode> {
    let mut engine = EngineConfig::new(args.name.clone());
    engine.seed = args.seed;
    engine.sink_mode = args.sink_mode;
    engine.latency = match args.freeze_ms {
        Some(ms) => LatencyModel::Fixed { ms },
        None => LatencyModel::Measured,
    };
    for setting in [
        ControlSetting::Temperature(args.temperature),
        ControlSetting::Transpose(args.transpose),
        ControlSetting::Volume(args.volume),
        ControlSetting::Mode(args.mode),
        ControlSetting::AutoFade(args.auto_fade),
    ] {
        engine.controls.apply(setting).map_err(anyhow::Error::msg)?;
    }
    let mut opts = PerformOptions::new(ws_url(&args.host), engine);
    if let Some(p) = &args.model {
        opts.model = GeneratorModel::from_text(&read(p)?)?;
    }

    let primary: Box<dyn Sink> = match args.sink {
        SinkKind::Log => Box::new(LogSink::new(io::stdout())),
        SinkKind::Null => Box::new(NullSink),
        SinkKind::Midi => {
            let path = args
                .midi_out
                .as_ref()
                .context("--sink midi needs --midi-out")?;
            let dev = fs::OpenOptions::new()
                .append(true)
                .create(true)
                .open(path)?;
            Box::new(MidiSink::new(dev, args.midi_channel))
        }
    };
    let recorder: Box<dyn Sink> = match &args.record {
        Some(p) => Box::new(LogSink::new(io::BufWriter::new(fs::File::create(p)?))),
        None => Box::new(NullSink),
    };
    let mut sink = Tee {
        first: primary,
        second: recorder,
    };
    let commands = args.stdin_commands.then(stdin_lines::<PerformerCommand>);
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    let summary = perform(opts, &mut sink, commands, shutdown).await?;
    eprintln!(
        "performer_id={:?} events={} freezes={} resyncs={} underruns={} reconnects={}",
        summary.performer_id,
        summary.events,
        summary.freezes.len(),
        summary.resyncs.len(),
        summary.underruns.len(),
        summary.reconnects
    );
    Ok(ExitCode::SUCCESS)
}

fn run_sim(args: SimArgs) -> anyhow::Result<ExitCode> {
    let mut c = SimConfig::new(
        args.performers,
        args.bars,
        args.tempo,
        args.freeze_ms,
        args.seed,
    );
    if let Some(max_ms) = args.freeze_max_ms {
        c.freeze = LatencyModel::Uniform {
            min_ms: args.freeze_ms,
            max_ms,
        };
    }
    c.network.latency_ms = args.latency;
    c.network.jitter_ms = args.jitter;
    c.network.drop_probability = args.drop;
    c.scenario = args.scenario;
    c.sink_mode = args.sink_mode;
    c.schedule_override = args.offsets;
    c.progression = load_progression(&args.progression)?;
    let started = std::time::Instant::now();
    let report = sim::run(c)?;
    let text = report.to_text();
    match &args.report {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    let s = &report.summary;
    eprintln!(
        "violations={} note_ons={} freezes={} max_desync_ms={:.3} wall_ms={}",
        s.violations,
        s.note_ons,
        s.freezes,
        s.max_desync_ms,
        started.elapsed().as_millis()
    );
    for v in &report.violations {
        eprintln!(
            "violation {} performer={:?} tick={} {}",
            v.name, v.performer_id, v.tick, v.detail
        );
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match cli.command {
        Command::Server(_) | Command::Perform(_) => "info",
        Command::Sim(_) | Command::DumpModel => "warn",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .format(|buf, record| {
            let ts = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0);
            writeln!(
                buf,
                "ts_ms={ts} level={} {}",
                record.level().as_str().to_lowercase(),
                record.args()
            )
        })
        .init();
    let result = match cli.command {
        Command::Sim(args) => run_sim(args),
        Command::DumpModel => {
            print!("{}", GeneratorModel::default_with_seed(0).to_text());
            Ok(ExitCode::SUCCESS)
        }
        Command::Server(args) => runtime().and_then(|rt| rt.block_on(run_server(args))),
        Command::Perform(args) => runtime().and_then(|rt| rt.block_on(run_perform(args))),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn runtime() -> anyhow::Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .thread_keep_alive(Duration::from_secs(5))
        .build()?)
}
