//! Networked drivers for the ensemble state machines: a WebSocket conductor
//! server, a performer client, output sinks, and the operator command
//! grammar shared by the CLI.

pub mod client;
pub mod commands;
pub mod server;
pub mod sink;
