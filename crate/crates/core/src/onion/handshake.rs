//! Key agreement for one hop.
//!
//! The originator seals a fresh X25519 public value to the relay's long-term
//! key (ephemeral-static ECIES). The relay answers with its own ephemeral
//! value and a confirmation tag. Both sides mix the ephemeral-ephemeral and
//! ephemeral-static Diffie-Hellman outputs, so only the holder of the
//! long-term secret can produce a matching tag.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::rngs::OsRng;
use sha2::{Digest, Sha256};
use x25519_dalek::{EphemeralSecret, PublicKey, StaticSecret};

use super::layer::{LayerKey, SessionKey, KEY_LEN};
use super::OnionError;

const PROTOCOL_ID: &[u8] = b"onionbox-handshake-v1";
const SEAL_INFO: &[u8] = b"onionbox-seal-v1";

/// Size of the sealed CREATE blob: ephemeral public + sealed client key + tag.
pub const CREATE_BLOB_LEN: usize = 32 + 32 + 16;
/// Size of a CREATED reply: relay ephemeral public + confirmation tag.
pub const CREATED_LEN: usize = 32 + 32;

pub type ConfirmTag = [u8; 32];

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelayId(pub [u8; 16]);

impl RelayId {
    pub fn from_public_key(public: &[u8; 32]) -> Self {
        let digest = Sha256::digest(public);
        let mut id = [0u8; 16];
        id.copy_from_slice(&digest[..16]);
        RelayId(id)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, OnionError> {
        let bytes = hex::decode(s).map_err(|_| OnionError::Malformed("relay id hex"))?;
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|_| OnionError::Malformed("relay id length"))?;
        Ok(RelayId(arr))
    }
}

impl fmt::Debug for RelayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RelayId({})", &self.to_hex()[..8])
    }
}

impl fmt::Display for RelayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// A relay's long-term X25519 keypair.
#[derive(Clone)]
pub struct IdentityKeypair {
    secret: StaticSecret,
    public: PublicKey,
}

impl IdentityKeypair {
    pub fn generate() -> Self {
        let secret = StaticSecret::random_from_rng(OsRng);
        let public = PublicKey::from(&secret);
        IdentityKeypair { secret, public }
    }

    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        let secret = StaticSecret::from(bytes);
        let public = PublicKey::from(&secret);
        IdentityKeypair { secret, public }
    }

    pub fn public_bytes(&self) -> [u8; 32] {
        self.public.to_bytes()
    }

    pub fn relay_id(&self) -> RelayId {
        RelayId::from_public_key(self.public.as_bytes())
    }

    /// 64 octets, secret then public.
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&self.secret.to_bytes());
        out[32..].copy_from_slice(self.public.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, OnionError> {
        if bytes.len() != 64 {
            return Err(OnionError::Malformed("identity must be 64 octets"));
        }
        let mut secret = [0u8; 32];
        secret.copy_from_slice(&bytes[..32]);
        let pair = Self::from_secret_bytes(secret);
        if pair.public.as_bytes()[..] != bytes[32..] {
            return Err(OnionError::Malformed("identity public half does not match secret"));
        }
        Ok(pair)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, OnionError> {
        let bytes = hex::decode(s.trim()).map_err(|_| OnionError::Malformed("identity hex"))?;
        Self::from_bytes(&bytes)
    }
}

impl fmt::Debug for IdentityKeypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IdentityKeypair")
            .field("public", &hex::encode(self.public.as_bytes()))
            .finish_non_exhaustive()
    }
}

fn seal_key(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> ChaCha20Poly1305 {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = [0u8; KEY_LEN];
    hk.expand(SEAL_INFO, &mut okm).expect("32 is a valid HKDF length");
    ChaCha20Poly1305::new(Key::from_slice(&okm))
}

/// Encrypt `plaintext` so only the holder of `recipient`'s secret can read it.
pub fn seal_to(recipient: &[u8; 32], plaintext: &[u8]) -> Vec<u8> {
    let ephemeral = EphemeralSecret::random_from_rng(OsRng);
    let ephemeral_pub = PublicKey::from(&ephemeral);
    let shared = ephemeral.diffie_hellman(&PublicKey::from(*recipient));
    let cipher = seal_key(shared.as_bytes(), ephemeral_pub.as_bytes(), recipient);
    let ct = cipher
        .encrypt(Nonce::from_slice(&[0u8; 12]), plaintext)
        .expect("seal");
    let mut out = Vec::with_capacity(32 + ct.len());
    out.extend_from_slice(ephemeral_pub.as_bytes());
    out.extend_from_slice(&ct);
    out
}

pub fn unseal(identity: &IdentityKeypair, blob: &[u8]) -> Result<Vec<u8>, OnionError> {
    if blob.len() < 32 + 16 {
        return Err(OnionError::Unseal);
    }
    let mut ephemeral = [0u8; 32];
    ephemeral.copy_from_slice(&blob[..32]);
    let shared = identity.secret.diffie_hellman(&PublicKey::from(ephemeral));
    let cipher = seal_key(shared.as_bytes(), &ephemeral, identity.public.as_bytes());
    cipher
        .decrypt(Nonce::from_slice(&[0u8; 12]), &blob[32..])
        .map_err(|_| OnionError::Unseal)
}

/// Deterministically derive a hop's session key and a confirmation tag over
/// the handshake transcript. Forward and backward keys use distinct labels.
pub fn derive_session_key(shared_secret: &[u8], transcript: &[u8]) -> (SessionKey, ConfirmTag) {
    let hk = Hkdf::<Sha256>::new(Some(transcript), shared_secret);
    let mut fwd = [0u8; KEY_LEN];
    let mut bwd = [0u8; KEY_LEN];
    let mut confirm = [0u8; 32];
    hk.expand(b"fwd", &mut fwd).expect("hkdf");
    hk.expand(b"bwd", &mut bwd).expect("hkdf");
    hk.expand(b"confirm", &mut confirm).expect("hkdf");
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&confirm).expect("hmac key");
    mac.update(transcript);
    let tag: ConfirmTag = mac.finalize().into_bytes().into();
    (
        SessionKey::new(LayerKey::from_bytes(fwd), LayerKey::from_bytes(bwd)),
        tag,
    )
}

fn transcript(relay_id: &RelayId, relay_pub: &[u8; 32], client: &[u8; 32], server: &[u8; 32]) -> Vec<u8> {
    let mut t = Vec::with_capacity(PROTOCOL_ID.len() + 16 + 96);
    t.extend_from_slice(PROTOCOL_ID);
    t.extend_from_slice(&relay_id.0);
    t.extend_from_slice(relay_pub);
    t.extend_from_slice(client);
    t.extend_from_slice(server);
    t
}

/// Originator half of a hop handshake.
pub struct ClientHandshake {
    secret: StaticSecret,
    public: [u8; 32],
    relay_id: RelayId,
    relay_pub: [u8; 32],
}

impl ClientHandshake {
    /// Returns the pending state and the opaque CREATE blob for the relay.
    pub fn start(relay_id: RelayId, relay_pub: [u8; 32]) -> (Self, Vec<u8>) {
        // StaticSecret because the value is used for two DH operations.
        let secret = StaticSecret::random_from_rng(OsRng);
        let public = PublicKey::from(&secret).to_bytes();
        let blob = seal_to(&relay_pub, &public);
        (
            ClientHandshake {
                secret,
                public,
                relay_id,
                relay_pub,
            },
            blob,
        )
    }

    pub fn finish(self, created: &[u8]) -> Result<SessionKey, OnionError> {
        if created.len() != CREATED_LEN {
            return Err(OnionError::Malformed("CREATED length"));
        }
        let mut server = [0u8; 32];
        server.copy_from_slice(&created[..32]);
        let ee = self.secret.diffie_hellman(&PublicKey::from(server));
        let es = self.secret.diffie_hellman(&PublicKey::from(self.relay_pub));
        let mut shared = [0u8; 64];
        shared[..32].copy_from_slice(ee.as_bytes());
        shared[32..].copy_from_slice(es.as_bytes());
        let t = transcript(&self.relay_id, &self.relay_pub, &self.public, &server);
        let (keys, tag) = derive_session_key(&shared, &t);
        if !constant_time_eq(&tag, &created[32..]) {
            return Err(OnionError::Confirmation);
        }
        Ok(keys)
    }
}

/// Relay half: unseal the CREATE blob, derive keys, build the CREATED reply.
pub fn server_handshake(
    identity: &IdentityKeypair,
    blob: &[u8],
) -> Result<(SessionKey, Vec<u8>), OnionError> {
    let client_pub: [u8; 32] = unseal(identity, blob)?
        .try_into()
        .map_err(|_| OnionError::Unseal)?;
    let secret = EphemeralSecret::random_from_rng(OsRng);
    let server_pub = PublicKey::from(&secret).to_bytes();
    let client = PublicKey::from(client_pub);
    let es = identity.secret.diffie_hellman(&client);
    let ee = secret.diffie_hellman(&client);
    let mut shared = [0u8; 64];
    shared[..32].copy_from_slice(ee.as_bytes());
    shared[32..].copy_from_slice(es.as_bytes());
    let t = transcript(
        &identity.relay_id(),
        identity.public.as_bytes(),
        &client_pub,
        &server_pub,
    );
    let (keys, tag) = derive_session_key(&shared, &t);
    let mut created = Vec::with_capacity(CREATED_LEN);
    created.extend_from_slice(&server_pub);
    created.extend_from_slice(&tag);
    Ok((keys, created))
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore};

    #[test]
    fn derivation_is_deterministic() {
        let (a, ta) = derive_session_key(b"secret", b"transcript");
        let (b, tb) = derive_session_key(b"secret", b"transcript");
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn transcript_bit_flip_changes_tag() {
        let mut rng = rand::thread_rng();
        let mut secret = [0u8; 64];
        let mut t = vec![0u8; 128];
        for _ in 0..100 {
            rng.fill_bytes(&mut secret);
            rng.fill_bytes(&mut t);
            let (_, tag) = derive_session_key(&secret, &t);
            let bit = rng.gen_range(0..t.len() * 8);
            let mut flipped = t.clone();
            flipped[bit / 8] ^= 1 << (bit % 8);
            let (_, tag2) = derive_session_key(&secret, &flipped);
            assert_ne!(tag, tag2);
        }
    }

    #[test]
    fn forward_and_backward_keys_differ() {
        let mut rng = rand::thread_rng();
        let mut secret = [0u8; 32];
        for _ in 0..1000 {
            rng.fill_bytes(&mut secret);
            let (keys, _) = derive_session_key(&secret, b"t");
            assert_ne!(keys.forward.key(), keys.backward.key());
        }
    }

    #[test]
    fn handshake_agrees() {
        let relay = IdentityKeypair::generate();
        let (client, blob) = ClientHandshake::start(relay.relay_id(), relay.public_bytes());
        assert_eq!(blob.len(), CREATE_BLOB_LEN);
        let (relay_keys, created) = server_handshake(&relay, &blob).unwrap();
        assert_eq!(created.len(), CREATED_LEN);
        let client_keys = client.finish(&created).unwrap();
        assert_eq!(client_keys, relay_keys);
    }

    #[test]
    fn blob_for_other_relay_does_not_unseal() {
        let relay = IdentityKeypair::generate();
        let other = IdentityKeypair::generate();
        let (_, blob) = ClientHandshake::start(other.relay_id(), other.public_bytes());
        assert!(matches!(server_handshake(&relay, &blob), Err(OnionError::Unseal)));
    }

    #[test]
    fn impostor_cannot_confirm() {
        // Relay that somehow received the blob but holds a different identity
        // cannot produce a valid tag.
        let real = IdentityKeypair::generate();
        let (client, _) = ClientHandshake::start(real.relay_id(), real.public_bytes());
        let impostor = IdentityKeypair::generate();
        let (_, blob2) = ClientHandshake::start(impostor.relay_id(), impostor.public_bytes());
        let (_, created) = server_handshake(&impostor, &blob2).unwrap();
        assert!(matches!(client.finish(&created), Err(OnionError::Confirmation)));
    }

    #[test]
    fn identity_hex_round_trip() {
        let id = IdentityKeypair::generate();
        let hex = id.to_hex();
        assert_eq!(hex.len(), 128);
        let back = IdentityKeypair::from_hex(&hex).unwrap();
        assert_eq!(back.public_bytes(), id.public_bytes());
        let mut bad = id.to_bytes();
        bad[40] ^= 1;
        assert!(IdentityKeypair::from_bytes(&bad).is_err());
    }
}
