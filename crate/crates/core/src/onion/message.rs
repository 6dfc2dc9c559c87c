//! Relay messages carried inside the innermost layer, plus the small payload
//! formats used by individual commands.

use std::net::Ipv4Addr;

use super::cell::CELL_PAYLOAD_LEN;
use super::layer::{LAYER_OVERHEAD, MAX_HOPS};
use super::OnionError;

/// stream id (2) + command (1)
pub const RELAY_HEADER_LEN: usize = 3;

/// Largest DATA body the originator can send on an `hops`-long circuit.
pub const fn max_forward_data(hops: usize) -> usize {
    CELL_PAYLOAD_LEN - RELAY_HEADER_LEN - hops * LAYER_OVERHEAD
}

/// Largest body a relay may originate. The originating hop cannot see how
/// many layers the return path will add, so it budgets for [`MAX_HOPS`].
pub const MAX_BACKWARD_DATA: usize = CELL_PAYLOAD_LEN - RELAY_HEADER_LEN - MAX_HOPS * LAYER_OVERHEAD;

/// DATA cells a stream end may have outstanding before it needs credit.
pub const STREAM_WINDOW: usize = 64;
/// Credit granted by one SENDME.
pub const SENDME_INCREMENT: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum RelayCommand {
    Begin = 1,
    Data = 2,
    End = 3,
    Extend = 4,
    Extended = 5,
    Resolve = 6,
    Resolved = 7,
    Connected = 8,
    /// Stream-level flow-control credit.
    Sendme = 9,
}

impl RelayCommand {
    pub fn is_circuit_level(self) -> bool {
        matches!(self, RelayCommand::Extend | RelayCommand::Extended)
    }
}

impl TryFrom<u8> for RelayCommand {
    type Error = OnionError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Ok(match value {
            1 => RelayCommand::Begin,
            2 => RelayCommand::Data,
            3 => RelayCommand::End,
            4 => RelayCommand::Extend,
            5 => RelayCommand::Extended,
            6 => RelayCommand::Resolve,
            7 => RelayCommand::Resolved,
            8 => RelayCommand::Connected,
            9 => RelayCommand::Sendme,
            other => return Err(OnionError::UnknownRelayCommand(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayMessage {
    pub stream_id: u16,
    pub command: RelayCommand,
    pub data: Vec<u8>,
}

impl RelayMessage {
    pub fn new(stream_id: u16, command: RelayCommand, data: Vec<u8>) -> Self {
        RelayMessage {
            stream_id,
            command,
            data,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RELAY_HEADER_LEN + self.data.len());
        out.extend_from_slice(&self.stream_id.to_be_bytes());
        out.push(self.command as u8);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(raw: &[u8]) -> Result<Self, OnionError> {
        if raw.len() < RELAY_HEADER_LEN {
            return Err(OnionError::Malformed("relay message header"));
        }
        let stream_id = u16::from_be_bytes([raw[0], raw[1]]);
        let command = RelayCommand::try_from(raw[2])?;
        if command.is_circuit_level() != (stream_id == 0) {
            return Err(OnionError::Malformed("stream id does not match command level"));
        }
        Ok(RelayMessage {
            stream_id,
            command,
            data: raw[RELAY_HEADER_LEN..].to_vec(),
        })
    }
}

/// Reason octet carried by END.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum EndReason {
    Misc = 1,
    ResolveFailed = 2,
    ConnectRefused = 3,
    Timeout = 4,
    /// Orderly close of the sender's half of the stream.
    Done = 6,
    Protocol = 7,
    UnknownStream = 8,
    Io = 9,
}

impl EndReason {
    pub fn from_u8(v: u8) -> Self {
        match v {
            2 => EndReason::ResolveFailed,
            3 => EndReason::ConnectRefused,
            4 => EndReason::Timeout,
            6 => EndReason::Done,
            7 => EndReason::Protocol,
            8 => EndReason::UnknownStream,
            9 => EndReason::Io,
            _ => EndReason::Misc,
        }
    }

    pub fn from_payload(data: &[u8]) -> Self {
        data.first().map(|&b| Self::from_u8(b)).unwrap_or(EndReason::Misc)
    }
}

pub const RESOLVED_OK: u8 = 0x00;
/// Unknown host.
pub const RESOLVED_UNKNOWN_HOST: u8 = 0x04;

pub fn encode_resolved(answer: Option<Ipv4Addr>) -> Vec<u8> {
    match answer {
        Some(ip) => {
            let mut v = vec![RESOLVED_OK];
            v.extend_from_slice(&ip.octets());
            v
        }
        None => vec![RESOLVED_UNKNOWN_HOST],
    }
}

/// `Ok(ip)` on success, `Err(code)` on a failure answer.
pub fn decode_resolved(data: &[u8]) -> Result<Result<Ipv4Addr, u8>, OnionError> {
    match data {
        [RESOLVED_OK, a, b, c, d] => Ok(Ok(Ipv4Addr::new(*a, *b, *c, *d))),
        [code] if *code != RESOLVED_OK => Ok(Err(*code)),
        _ => Err(OnionError::Malformed("RESOLVED body")),
    }
}

/// EXTEND body: target address and the sealed CREATE blob, which the
/// extending relay forwards without being able to read.
pub fn encode_extend(target: &str, blob: &[u8]) -> Result<Vec<u8>, OnionError> {
    let addr = target.as_bytes();
    if addr.is_empty() || addr.len() > u8::MAX as usize {
        return Err(OnionError::Malformed("EXTEND target length"));
    }
    let mut v = Vec::with_capacity(1 + addr.len() + blob.len());
    v.push(addr.len() as u8);
    v.extend_from_slice(addr);
    v.extend_from_slice(blob);
    Ok(v)
}

pub fn decode_extend(data: &[u8]) -> Result<(String, Vec<u8>), OnionError> {
    let (&len, rest) = data.split_first().ok_or(OnionError::Malformed("EXTEND body"))?;
    let len = len as usize;
    if len == 0 || rest.len() < len {
        return Err(OnionError::Malformed("EXTEND body"));
    }
    let target = std::str::from_utf8(&rest[..len])
        .map_err(|_| OnionError::Malformed("EXTEND target utf-8"))?
        .to_string();
    Ok((target, rest[len..].to_vec()))
}

pub const EXTENDED_OK: u8 = 0;

pub fn encode_extended(result: Result<&[u8], u8>) -> Vec<u8> {
    match result {
        Ok(created) => {
            let mut v = vec![EXTENDED_OK];
            v.extend_from_slice(created);
            v
        }
        Err(code) => vec![code.max(1)],
    }
}

pub fn decode_extended(data: &[u8]) -> Result<Result<Vec<u8>, u8>, OnionError> {
    match data.split_first() {
        Some((&EXTENDED_OK, created)) => Ok(Ok(created.to_vec())),
        Some((&code, _)) => Ok(Err(code)),
        None => Err(OnionError::Malformed("EXTENDED body")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn budgets() {
        assert_eq!(max_forward_data(3), 505 - 3 - 51);
        assert_eq!(MAX_BACKWARD_DATA, 505 - 3 - 8 * 17);
    }

    #[test]
    fn stream_id_level_rule() {
        let bad = RelayMessage::new(3, RelayCommand::Extend, vec![]).encode();
        assert!(RelayMessage::decode(&bad).is_err());
        let bad = RelayMessage::new(0, RelayCommand::Data, vec![]).encode();
        assert!(RelayMessage::decode(&bad).is_err());
        let good = RelayMessage::new(0, RelayCommand::Extended, vec![1]).encode();
        assert!(RelayMessage::decode(&good).is_ok());
    }

    #[test]
    fn unknown_relay_command() {
        assert!(matches!(
            RelayMessage::decode(&[0, 1, 42]),
            Err(OnionError::UnknownRelayCommand(42))
        ));
    }

    #[test]
    fn resolved_codes() {
        let ok = encode_resolved(Some(Ipv4Addr::new(10, 0, 0, 9)));
        assert_eq!(decode_resolved(&ok).unwrap(), Ok(Ipv4Addr::new(10, 0, 0, 9)));
        let fail = encode_resolved(None);
        assert_eq!(fail, vec![0x04]);
        assert_eq!(decode_resolved(&fail).unwrap(), Err(0x04));
    }

    #[test]
    fn extend_body() {
        let v = encode_extend("127.0.0.1:9001", &[1, 2, 3]).unwrap();
        assert_eq!(decode_extend(&v).unwrap(), ("127.0.0.1:9001".into(), vec![1, 2, 3]));
        assert!(decode_extend(&[5, b'a']).is_err());
    }

    proptest! {
        #[test]
        fn relay_message_round_trip(
            sid in 1u16..,
            cmd in prop::sample::select(vec![1u8, 2, 3, 6, 7, 8, 9]),
            data in proptest::collection::vec(any::<u8>(), 0..400),
        ) {
            let m = RelayMessage::new(sid, RelayCommand::try_from(cmd).unwrap(), data);
            prop_assert_eq!(RelayMessage::decode(&m.encode()).unwrap(), m);
        }
    }
}
