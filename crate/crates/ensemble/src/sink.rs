//! Consumers of performer output.

use std::io::{self, Write};

use ensemble_core::performer::{NoteKind, SinkEvent, VolumeCommand};

pub trait Sink: Send {
    fn emit(&mut self, event: &SinkEvent) -> io::Result<()>;

    fn volume(&mut self, _command: &VolumeCommand) -> io::Result<()> {
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// One `tick,kind,pitch,velocity` line per event.
pub struct LogSink<W: Write + Send> {
    out: W,
}

impl<W: Write + Send> LogSink<W> {
    pub fn new(out: W) -> Self {
        LogSink { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write + Send> Sink for LogSink<W> {
    fn emit(&mut self, event: &SinkEvent) -> io::Result<()> {
        writeln!(self.out, "{}", event.log_line())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

pub struct NullSink;

impl Sink for NullSink {
    fn emit(&mut self, _event: &SinkEvent) -> io::Result<()> {
        Ok(())
    }
}

/// Raw MIDI bytes on one channel, e.g. to a `/dev/snd/midiC*D*` device.
/// Volume maps to controller 7.
pub struct MidiSink<W: Write + Send> {
    out: W,
    channel: u8,
}

impl<W: Write + Send> MidiSink<W> {
    pub fn new(out: W, channel: u8) -> Self {
        MidiSink {
            out,
            channel: channel & 0x0f,
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write + Send> Sink for MidiSink<W> {
    fn emit(&mut self, event: &SinkEvent) -> io::Result<()> {
        let bytes = match event.kind {
            NoteKind::NoteOn => [
                0x90 | self.channel,
                event.pitch & 0x7f,
                event.velocity & 0x7f,
            ],
            NoteKind::NoteOff => [0x80 | self.channel, event.pitch & 0x7f, 0],
        };
        self.out.write_all(&bytes)?;
        self.out.flush()
    }

    fn volume(&mut self, command: &VolumeCommand) -> io::Result<()> {
        let value = (command.target.clamp(0.0, 1.0) * 127.0).round() as u8;
        self.out.write_all(&[0xb0 | self.channel, 7, value])?;
        self.out.flush()
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// Sends every event to both sinks.
pub struct Tee<A: Sink, B: Sink> {
    pub first: A,
    pub second: B,
}

impl<A: Sink, B: Sink> Sink for Tee<A, B> {
    fn emit(&mut self, event: &SinkEvent) -> io::Result<()> {
        self.first.emit(event)?;
        self.second.emit(event)
    }

    fn volume(&mut self, command: &VolumeCommand) -> io::Result<()> {
        self.first.volume(command)?;
        self.second.volume(command)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.first.flush()?;
        self.second.flush()
    }
}

impl Sink for Box<dyn Sink> {
    fn emit(&mut self, event: &SinkEvent) -> io::Result<()> {
        (**self).emit(event)
    }

    fn volume(&mut self, command: &VolumeCommand) -> io::Result<()> {
        (**self).volume(command)
    }

    fn flush(&mut self) -> io::Result<()> {
        (**self).flush()
    }
}
