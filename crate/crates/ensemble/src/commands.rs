//! Line-oriented operator commands read from stdin by the CLI drivers.

use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use ensemble_core::protocol::ControlSetting;

/// `temperature 1.5`, `transpose -12`, `volume 0.4`, `mode hybrid`,
/// `autofade on`.
pub fn parse_control(field: &str, value: &str) -> anyhow::Result<ControlSetting> {
    Ok(match field {
        "temperature" => ControlSetting::Temperature(value.parse().context("temperature")?),
        "transpose" => ControlSetting::Transpose(value.parse().context("transpose")?),
        "volume" => ControlSetting::Volume(value.parse().context("volume")?),
        "mode" => ControlSetting::Mode(value.parse().map_err(|e: String| anyhow!(e))?),
        "autofade" => ControlSetting::AutoFade(match value {
            "on" | "true" | "1" => true,
            "off" | "false" | "0" => false,
            _ => bail!("autofade takes on|off"),
        }),
        _ => bail!("unknown control `{field}`"),
    })
}

/// Commands for the conductor server.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerCommand {
    Start,
    Stop,
    Tempo {
        bpm: f64,
        bar: u32,
    },
    Control {
        performer_id: u32,
        setting: ControlSetting,
    },
}

impl FromStr for ServerCommand {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let words: Vec<&str> = s.split_whitespace().collect();
        match words.as_slice() {
            ["start"] => Ok(ServerCommand::Start),
            ["stop"] => Ok(ServerCommand::Stop),
            ["tempo", bpm, bar] => Ok(ServerCommand::Tempo {
                bpm: bpm.parse()?,
                bar: bar.parse()?,
            }),
            ["tempo", bpm] => Ok(ServerCommand::Tempo {
                bpm: bpm.parse()?,
                bar: 0,
            }),
            ["control", id, field, value] => Ok(ServerCommand::Control {
                performer_id: id.parse()?,
                setting: parse_control(field, value)?,
            }),
            _ => bail!("expected start | stop | tempo <bpm> [bar] | control <id> <field> <value>"),
        }
    }
}

/// Commands for a performer client.
#[derive(Debug, Clone, PartialEq)]
pub enum PerformerCommand {
    NoteOn { pitch: u8, velocity: u8 },
    NoteOff { pitch: u8 },
    Control(ControlSetting),
}

impl FromStr for PerformerCommand {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let words: Vec<&str> = s.split_whitespace().collect();
        match words.as_slice() {
            ["on", pitch] => Ok(PerformerCommand::NoteOn {
                pitch: pitch.parse()?,
                velocity: 100,
            }),
            ["on", pitch, velocity] => Ok(PerformerCommand::NoteOn {
                pitch: pitch.parse()?,
                velocity: velocity.parse()?,
            }),
            ["off", pitch] => Ok(PerformerCommand::NoteOff {
                pitch: pitch.parse()?,
            }),
            [field, value] => Ok(PerformerCommand::Control(parse_control(field, value)?)),
            _ => bail!("expected on <pitch> [velocity] | off <pitch> | <control> <value>"),
        }
    }
}
