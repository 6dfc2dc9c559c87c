//! Layered authenticated encryption.
//!
//! Each layer is ChaCha20-Poly1305 over `flag || body`, with the nonce taken
//! from an implicit per-direction counter. Counters never appear on the wire;
//! both ends advance them in lock step, so a replayed or reordered layer fails
//! authentication.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};

use super::cell::CELL_PAYLOAD_LEN;
use super::OnionError;

pub const KEY_LEN: usize = 32;
pub const TAG_LEN: usize = 16;
/// Bytes added by one layer: flag octet plus authentication tag.
pub const LAYER_OVERHEAD: usize = 1 + TAG_LEN;
/// Upper bound on circuit length. Backward traffic is budgeted against it
/// because the originating hop does not know its position.
pub const MAX_HOPS: usize = 8;

/// Largest message `onion_wrap` accepts for `hops` layers.
pub const fn max_wrapped_plaintext(hops: usize) -> usize {
    CELL_PAYLOAD_LEN.saturating_sub(hops * LAYER_OVERHEAD)
}

#[derive(Clone, PartialEq, Eq)]
pub struct LayerKey([u8; KEY_LEN]);

impl LayerKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        LayerKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new(Key::from_slice(&self.0))
    }
}

impl serde::Serialize for LayerKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LayerKey({}..)", hex::encode(&self.0[..4]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum LayerFlag {
    Forward = 0,
    Deliver = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OnionLayer {
    pub flag: LayerFlag,
    pub body: Vec<u8>,
}

fn nonce_for(counter: u64) -> Nonce {
    let mut nonce = [0u8; 12];
    nonce[4..].copy_from_slice(&counter.to_be_bytes());
    *Nonce::from_slice(&nonce)
}

/// Encrypt one layer under `(key, counter)`.
pub fn seal_layer(key: &LayerKey, counter: u64, flag: LayerFlag, body: &[u8]) -> Vec<u8> {
    let mut plain = Vec::with_capacity(body.len() + 1);
    plain.push(flag as u8);
    plain.extend_from_slice(body);
    key.cipher()
        .encrypt(&nonce_for(counter), plain.as_slice())
        .expect("chacha20poly1305 encryption is infallible for in-range lengths")
}

fn open_at(key: &LayerKey, counter: u64, ciphertext: &[u8]) -> Option<Vec<u8>> {
    key.cipher()
        .decrypt(&nonce_for(counter), ciphertext)
        .ok()
}

/// Authenticate and decrypt one layer at the expected counter, advancing it on
/// success. A ciphertext that only verifies at the previous counter value is
/// reported as a replay.
pub fn unwrap_layer(
    ciphertext: &[u8],
    key: &LayerKey,
    counter: &mut u64,
) -> Result<OnionLayer, OnionError> {
    if *counter == u64::MAX {
        return Err(OnionError::CounterExhausted);
    }
    let plain = match open_at(key, *counter, ciphertext) {
        Some(p) => p,
        None => {
            if *counter > 0 && open_at(key, *counter - 1, ciphertext).is_some() {
                return Err(OnionError::Replay {
                    counter: *counter - 1,
                });
            }
            return Err(OnionError::Authentication);
        }
    };
    *counter += 1;
    let (flag, body) = plain.split_first().ok_or(OnionError::MalformedLayer)?;
    let flag = match flag {
        0 => LayerFlag::Forward,
        1 => LayerFlag::Deliver,
        _ => return Err(OnionError::MalformedLayer),
    };
    Ok(OnionLayer {
        flag,
        body: body.to_vec(),
    })
}

/// One direction of a hop's session: a key and its nonce counter.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct DirectionalKey {
    key: LayerKey,
    counter: u64,
}

impl DirectionalKey {
    pub fn new(key: LayerKey) -> Self {
        DirectionalKey { key, counter: 0 }
    }

    pub fn key(&self) -> &LayerKey {
        &self.key
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn seal(&mut self, flag: LayerFlag, body: &[u8]) -> Result<Vec<u8>, OnionError> {
        if self.counter == u64::MAX {
            return Err(OnionError::CounterExhausted);
        }
        let ct = seal_layer(&self.key, self.counter, flag, body);
        self.counter += 1;
        Ok(ct)
    }

    pub fn open(&mut self, ciphertext: &[u8]) -> Result<OnionLayer, OnionError> {
        unwrap_layer(ciphertext, &self.key, &mut self.counter)
    }
}

/// Per-hop symmetric state shared between the originator and one relay.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct SessionKey {
    /// Originator to exit.
    pub forward: DirectionalKey,
    /// Exit to originator.
    pub backward: DirectionalKey,
}

impl SessionKey {
    pub fn new(forward: LayerKey, backward: LayerKey) -> Self {
        SessionKey {
            forward: DirectionalKey::new(forward),
            backward: DirectionalKey::new(backward),
        }
    }
}

/// Wrap `message` for a path, innermost layer under the last key and
/// outermost under the first. Every key's counter advances by one.
pub fn onion_wrap<'a, I>(message: &[u8], hops: I) -> Result<Vec<u8>, OnionError>
where
    I: IntoIterator<Item = &'a mut DirectionalKey>,
    I::IntoIter: DoubleEndedIterator + ExactSizeIterator,
{
    let hops = hops.into_iter();
    let n = hops.len();
    if n == 0 {
        return Ok(message.to_vec());
    }
    let max = max_wrapped_plaintext(n);
    if message.len() > max {
        return Err(OnionError::MessageTooLarge {
            len: message.len(),
            max,
        });
    }
    let mut keys: Vec<&mut DirectionalKey> = hops.collect();
    if keys.iter().any(|k| k.counter == u64::MAX) {
        return Err(OnionError::CounterExhausted);
    }
    let mut body = keys[n - 1].seal(LayerFlag::Deliver, message)?;
    for key in keys.iter_mut().rev().skip(1) {
        body = key.seal(LayerFlag::Forward, &body)?;
    }
    Ok(body)
}

/// Build a reply as it would look after travelling the return path:
/// `hops[from_hop]` seals the message, then each earlier hop adds its layer.
pub fn wrap_backward(
    message: &[u8],
    hops: &mut [DirectionalKey],
    from_hop: usize,
) -> Result<Vec<u8>, OnionError> {
    if from_hop >= hops.len() {
        return Err(OnionError::NoSuchHop(from_hop));
    }
    let mut body = hops[from_hop].seal(LayerFlag::Deliver, message)?;
    for key in hops[..from_hop].iter_mut().rev() {
        body = key.seal(LayerFlag::Forward, &body)?;
    }
    if body.len() > CELL_PAYLOAD_LEN {
        return Err(OnionError::MessageTooLarge {
            len: body.len(),
            max: CELL_PAYLOAD_LEN,
        });
    }
    Ok(body)
}

/// Strip return-path layers at the originator, entry first. Returns the
/// index of the hop that sealed the message and the message itself.
pub fn unwrap_backward<'a, I>(ciphertext: &[u8], hops: I) -> Result<(usize, Vec<u8>), OnionError>
where
    I: IntoIterator<Item = &'a mut DirectionalKey>,
{
    let mut body = ciphertext.to_vec();
    for (index, key) in hops.into_iter().enumerate() {
        let layer = key.open(&body)?;
        match layer.flag {
            LayerFlag::Deliver => return Ok((index, layer.body)),
            LayerFlag::Forward => body = layer.body,
        }
    }
    Err(OnionError::MalformedLayer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore};

    fn random_key(rng: &mut impl RngCore) -> DirectionalKey {
        let mut k = [0u8; KEY_LEN];
        rng.fill_bytes(&mut k);
        DirectionalKey::new(LayerKey::from_bytes(k))
    }

    fn keys(n: usize) -> Vec<DirectionalKey> {
        let mut rng = rand::thread_rng();
        (0..n).map(|_| random_key(&mut rng)).collect()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn zero_hops_is_identity() {
        let m = b"plain".to_vec();
        assert_eq!(onion_wrap(&m, Vec::<&mut DirectionalKey>::new()).unwrap(), m);
    }

    #[test]
    fn single_layer_round_trip() {
        let mut sender = keys(1);
        let mut receiver = sender.clone();
        let ct = onion_wrap(b"hello", sender.iter_mut()).unwrap();
        let layer = receiver[0].open(&ct).unwrap();
        assert_eq!(
            layer,
            OnionLayer {
                flag: LayerFlag::Deliver,
                body: b"hello".to_vec()
            }
        );
    }

    #[test]
    fn only_identity_ordering_unwraps_three_layers() {
        let sender = keys(3);
        for perm in permutations(3) {
            let mut s = sender.clone();
            let mut r = sender.clone();
            let ct = onion_wrap(b"msg", s.iter_mut()).unwrap();
            let mut body = ct;
            let mut ok = true;
            for (step, &hop) in perm.iter().enumerate() {
                match r[hop].open(&body) {
                    Ok(layer) => {
                        let expect = if step == 2 {
                            LayerFlag::Deliver
                        } else {
                            LayerFlag::Forward
                        };
                        assert_eq!(layer.flag, expect);
                        body = layer.body;
                    }
                    Err(OnionError::Authentication) => {
                        ok = false;
                        break;
                    }
                    Err(e) => panic!("unexpected {e:?}"),
                }
            }
            assert_eq!(ok, perm == vec![0, 1, 2], "perm {perm:?}");
            if ok {
                assert_eq!(body, b"msg");
            }
        }
    }

    #[test]
    fn wrong_key_fails() {
        let mut s = keys(1);
        let mut other = keys(1);
        let ct = onion_wrap(b"x", s.iter_mut()).unwrap();
        assert!(matches!(other[0].open(&ct), Err(OnionError::Authentication)));
    }

    #[test]
    fn replay_detected() {
        let mut s = keys(1);
        let mut r = s.clone();
        let ct = onion_wrap(b"x", s.iter_mut()).unwrap();
        r[0].open(&ct).unwrap();
        assert!(matches!(r[0].open(&ct), Err(OnionError::Replay { counter: 0 })));
    }

    #[test]
    fn unwrap_layer_advances_counter() {
        let mut s = keys(1);
        let key = s[0].key().clone();
        let ct = onion_wrap(b"abc", s.iter_mut()).unwrap();
        let mut counter = 0;
        unwrap_layer(&ct, &key, &mut counter).unwrap();
        assert_eq!(counter, 1);
        assert_eq!(s[0].counter(), 1);
    }

    #[test]
    fn oversize_message_rejected() {
        let mut s = keys(3);
        let max = max_wrapped_plaintext(3);
        assert_eq!(max, 505 - 3 * 17);
        assert!(onion_wrap(&vec![0u8; max], s.clone().iter_mut()).is_ok());
        let err = onion_wrap(&vec![0u8; max + 1], s.iter_mut()).unwrap_err();
        assert!(matches!(err, OnionError::MessageTooLarge { .. }));
        // Size check happens before any counter moves.
        assert!(s.iter().all(|k| k.counter() == 0));
    }

    #[test]
    fn full_wrap_fits_cell_exactly() {
        let mut s = keys(5);
        let max = max_wrapped_plaintext(5);
        let ct = onion_wrap(&vec![7u8; max], s.iter_mut()).unwrap();
        assert_eq!(ct.len(), CELL_PAYLOAD_LEN);
    }

    #[test]
    fn three_layers_round_trip_random_messages() {
        let mut rng = rand::thread_rng();
        let mut s = keys(3);
        let mut r = s.clone();
        for _ in 0..1000 {
            let len = rng.gen_range(0..=max_wrapped_plaintext(3));
            let mut m = vec![0u8; len];
            rng.fill_bytes(&mut m);
            let mut body = onion_wrap(&m, s.iter_mut()).unwrap();
            for (i, hop) in r.iter_mut().enumerate() {
                let layer = hop.open(&body).unwrap();
                assert_eq!(layer.flag == LayerFlag::Deliver, i == 2);
                body = layer.body;
            }
            assert_eq!(body, m);
        }
    }

    #[test]
    fn backward_reply_takes_one_unwrap_per_hop() {
        let mut relay_side = keys(3);
        let mut client_side = relay_side.clone();
        let ct = wrap_backward(b"reply", &mut relay_side, 2).unwrap();
        let mut opened = 0;
        let mut body = ct;
        for hop in client_side.iter_mut() {
            let layer = hop.open(&body).unwrap();
            opened += 1;
            body = layer.body;
            if layer.flag == LayerFlag::Deliver {
                break;
            }
        }
        assert_eq!(opened, 3);
        assert_eq!(body, b"reply");
    }

    #[test]
    fn backward_reversed_order_fails() {
        let mut relay_side = keys(3);
        let mut client_side = relay_side.clone();
        let ct = wrap_backward(b"reply", &mut relay_side, 2).unwrap();
        assert!(matches!(
            unwrap_backward(&ct, client_side.iter_mut().rev()),
            Err(OnionError::Authentication)
        ));
    }

    #[test]
    fn backward_round_trip_identifies_origin() {
        for from in 0..3 {
            let mut relay_side = keys(3);
            let mut client_side = relay_side.clone();
            let ct = wrap_backward(b"r", &mut relay_side, from).unwrap();
            let (origin, m) = unwrap_backward(&ct, client_side.iter_mut()).unwrap();
            assert_eq!(origin, from);
            assert_eq!(m, b"r");
        }
    }
}
