//! Cell framing, layered encryption, and the per-hop handshake.

pub mod cell;
pub mod handshake;
pub mod layer;
pub mod message;

pub use cell::{decode_cell, encode_cell, Cell, CellCommand, DestroyReason, CELL_LEN, CELL_PAYLOAD_LEN};
pub use handshake::{derive_session_key, ClientHandshake, IdentityKeypair, RelayId};
pub use layer::{
    max_wrapped_plaintext, onion_wrap, unwrap_backward, unwrap_layer, wrap_backward,
    DirectionalKey, LayerFlag, LayerKey, OnionLayer, SessionKey, LAYER_OVERHEAD, MAX_HOPS,
};
pub use message::{EndReason, RelayCommand, RelayMessage};

#[derive(Debug, thiserror::Error)]
pub enum OnionError {
    #[error("cell frame must be 512 octets, got {0}")]
    Framing(usize),
    #[error("unknown cell command {0}")]
    UnknownCommand(u8),
    #[error("unknown relay command {0}")]
    UnknownRelayCommand(u8),
    #[error("payload of {len} octets exceeds {max}")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("message of {len} octets exceeds wrapped capacity {max}")]
    MessageTooLarge { len: usize, max: usize },
    #[error("layer authentication failed")]
    Authentication,
    #[error("replayed layer at counter {counter}")]
    Replay { counter: u64 },
    #[error("nonce counter exhausted")]
    CounterExhausted,
    #[error("malformed layer")]
    MalformedLayer,
    #[error("no hop at index {0}")]
    NoSuchHop(usize),
    #[error("sealed handshake blob did not open")]
    Unseal,
    #[error("handshake confirmation tag mismatch")]
    Confirmation,
    #[error("malformed {0}")]
    Malformed(&'static str),
}
