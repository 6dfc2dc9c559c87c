//! Originator side: path selection, telescoping circuit construction, and
//! byte streams carried over a circuit.

mod circuit;
mod manager;
pub mod path;
mod stream;

pub use circuit::{
    build_circuit, CircuitHandle, ClosedReason, CONNECTED_TIMEOUT, HANDSHAKE_TIMEOUT,
    RESOLVE_TIMEOUT,
};
pub use manager::CircuitManager;
pub use path::{enumerate_paths, select_path, MAX_PATH_LEN, MIN_PATH_LEN};
pub use stream::CircuitStream;

use crate::directory::DirectoryError;
use crate::onion::EndReason;

#[derive(Debug, thiserror::Error)]
pub enum CircuitError {
    #[error("path length {0} outside 1..=8")]
    PathLength(usize),
    #[error("need {need} suitable relays, directory has {have}")]
    InsufficientRelays { need: usize, have: usize },
    /// `hop` is 1-based: 1 is the entry.
    #[error("circuit build failed at hop {hop}: {reason}")]
    Build { hop: usize, reason: String },
    #[error("circuit is closed")]
    CircuitClosed,
    #[error("exit refused stream: {0:?}")]
    StreamRefused(EndReason),
    #[error("exit could not resolve {host} (code {code:#04x})")]
    Resolution { host: String, code: u8 },
    #[error("{0} timed out")]
    Timeout(&'static str),
    #[error("destination must be host:port, got {0:?}")]
    Destination(String),
    #[error("circuit is retiring and accepts no new streams")]
    Retiring,
    #[error(transparent)]
    Directory(#[from] DirectoryError),
}
