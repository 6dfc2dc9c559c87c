//! Fixed-size cell framing.
//!
//! Every unit exchanged between two nodes is exactly [`CELL_LEN`] octets:
//!
//! ```text
//! 0      4     5         7                                  512
//! +------+-----+---------+------------------+---------------+
//! | circ | cmd | len(BE) | payload[..len]   | random pad    |
//! +------+-----+---------+------------------+---------------+
//! ```

use rand::RngCore;

use super::OnionError;

/// Serialized size of every cell.
pub const CELL_LEN: usize = 512;
/// Header: circuit id (4) + command (1) + payload length (2).
pub const CELL_HEADER_LEN: usize = 7;
/// Payload capacity of a cell.
pub const CELL_PAYLOAD_LEN: usize = CELL_LEN - CELL_HEADER_LEN;

/// Link-level cell command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum CellCommand {
    Create = 1,
    Created = 2,
    Relay = 3,
    Destroy = 4,
}

impl TryFrom<u8> for CellCommand {
    type Error = OnionError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            1 => Ok(CellCommand::Create),
            2 => Ok(CellCommand::Created),
            3 => Ok(CellCommand::Relay),
            4 => Ok(CellCommand::Destroy),
            other => Err(OnionError::UnknownCommand(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub circuit_id: u32,
    pub command: CellCommand,
    /// Meaningful payload octets; padding is added at encode time.
    pub payload: Vec<u8>,
}

impl Cell {
    pub fn new(circuit_id: u32, command: CellCommand, payload: Vec<u8>) -> Self {
        Cell {
            circuit_id,
            command,
            payload,
        }
    }

    /// DESTROY carrying a single reason octet.
    pub fn destroy(circuit_id: u32, reason: DestroyReason) -> Self {
        Cell::new(circuit_id, CellCommand::Destroy, vec![reason as u8])
    }

    pub fn payload_len(&self) -> usize {
        self.payload.len()
    }
}

/// Reason octet carried in DESTROY cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DestroyReason {
    None = 0,
    Protocol = 1,
    Internal = 2,
    Requested = 3,
    HandshakeFailed = 4,
    AuthFailed = 5,
    ConnectFailed = 6,
    Finished = 9,
}

impl DestroyReason {
    pub fn from_u8(v: u8) -> Self {
        match v {
            1 => DestroyReason::Protocol,
            2 => DestroyReason::Internal,
            3 => DestroyReason::Requested,
            4 => DestroyReason::HandshakeFailed,
            5 => DestroyReason::AuthFailed,
            6 => DestroyReason::ConnectFailed,
            9 => DestroyReason::Finished,
            _ => DestroyReason::None,
        }
    }
}

/// Serialize a cell into exactly [`CELL_LEN`] octets. The unused tail of the
/// payload area is filled from the thread-local CSPRNG.
pub fn encode_cell(cell: &Cell) -> Result<[u8; CELL_LEN], OnionError> {
    let mut out = [0u8; CELL_LEN];
    encode_cell_into(cell, &mut out)?;
    Ok(out)
}

pub fn encode_cell_into(cell: &Cell, out: &mut [u8; CELL_LEN]) -> Result<(), OnionError> {
    let len = cell.payload.len();
    if len > CELL_PAYLOAD_LEN {
        return Err(OnionError::PayloadTooLarge {
            len,
            max: CELL_PAYLOAD_LEN,
        });
    }
    out[0..4].copy_from_slice(&cell.circuit_id.to_be_bytes());
    out[4] = cell.command as u8;
    out[5..7].copy_from_slice(&(len as u16).to_be_bytes());
    out[CELL_HEADER_LEN..CELL_HEADER_LEN + len].copy_from_slice(&cell.payload);
    rand::thread_rng().fill_bytes(&mut out[CELL_HEADER_LEN + len..]);
    Ok(())
}

/// Parse a 512-octet frame. Padding is discarded.
pub fn decode_cell(raw: &[u8]) -> Result<Cell, OnionError> {
    if raw.len() != CELL_LEN {
        return Err(OnionError::Framing(raw.len()));
    }
    let circuit_id = u32::from_be_bytes([raw[0], raw[1], raw[2], raw[3]]);
    let command = CellCommand::try_from(raw[4])?;
    let len = u16::from_be_bytes([raw[5], raw[6]]) as usize;
    if len > CELL_PAYLOAD_LEN {
        return Err(OnionError::PayloadTooLarge {
            len,
            max: CELL_PAYLOAD_LEN,
        });
    }
    Ok(Cell {
        circuit_id,
        command,
        payload: raw[CELL_HEADER_LEN..CELL_HEADER_LEN + len].to_vec(),
    })
}
