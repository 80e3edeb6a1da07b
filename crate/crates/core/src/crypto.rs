//! Signatures, digests, certificates and key rotation.
//!
//! Ed25519 signs, SHA-256 hashes. Keys are derived deterministically from a
//! `u64` seed so that every simulation run is reproducible.

use std::fmt;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::codec::{DecodeError, Decoder, Encoder};

pub const DIGEST_LEN: usize = 32;
pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

macro_rules! hex_bytes_newtype {
    ($name:ident, $len:expr, $what:literal) => {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
                let mut out = [0u8; $len];
                hex::decode_to_slice(s, &mut out)?;
                Ok(Self(out))
            }

            pub fn from_slice(raw: &[u8]) -> Result<Self, DecodeError> {
                raw.try_into().map(Self).map_err(|_| DecodeError::BadLength {
                    what: $what,
                    got: raw.len(),
                    expected: $len,
                })
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({}..)", stringify!($name), &self.to_hex()[..12])
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_bytes_newtype!(Digest, DIGEST_LEN, "digest");
hex_bytes_newtype!(PublicKey, PUBLIC_KEY_LEN, "public key");
hex_bytes_newtype!(Signature, SIGNATURE_LEN, "signature");

impl Digest {
    /// Marks the root of a per-key transaction ledger and the parent of the
    /// first block.
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub fn is_zero(&self) -> bool {
        self.0 == [0u8; DIGEST_LEN]
    }
}

impl Default for Digest {
    fn default() -> Self {
        Digest::ZERO
    }
}

pub fn digest(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Secret half of a key pair. Never printed.
#[derive(Clone)]
pub struct SecretKey(SigningKey);

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl SecretKey {
    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

impl KeyPair {
    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        let signing = SigningKey::from_bytes(&bytes);
        KeyPair { public: PublicKey(signing.verifying_key().to_bytes()), secret: SecretKey(signing) }
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        sign(message, &self.secret)
    }
}

/// Derives a key pair from `seed`; equal seeds give equal keys.
pub fn generate_keypair(seed: u64) -> KeyPair {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut secret = [0u8; 32];
    rng.fill_bytes(&mut secret);
    KeyPair::from_secret_bytes(secret)
}

pub fn sign(message: &[u8], secret: &SecretKey) -> Signature {
    Signature(secret.0.sign(message).to_bytes())
}

/// Strict Ed25519 verification. Malformed public keys never verify.
pub fn verify(message: &[u8], signature: &Signature, public_key: &PublicKey) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&public_key.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    vk.verify_strict(message, &sig).is_ok()
}

/// CA-issued binding of a role name to a public key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub subject_identity: String,
    pub subject_pk: PublicKey,
    pub ca_signature: Signature,
}

impl Certificate {
    fn signed_body(identity: &str, pk: &PublicKey) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str(identity).bytes(pk.as_bytes());
        enc.finish()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str(&self.subject_identity).bytes(self.subject_pk.as_bytes()).bytes(self.ca_signature.as_bytes());
        enc.finish()
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(raw);
        let cert = Certificate {
            subject_identity: dec.string("subject identity")?,
            subject_pk: PublicKey(dec.fixed("subject pk")?),
            ca_signature: Signature(dec.fixed("ca signature")?),
        };
        dec.finish()?;
        Ok(cert)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }
}

pub fn issue_certificate(ca: &KeyPair, identity: &str, subject_pk: PublicKey) -> Certificate {
    let body = Certificate::signed_body(identity, &subject_pk);
    Certificate { subject_identity: identity.to_owned(), subject_pk, ca_signature: ca.sign(&body) }
}

pub fn verify_certificate(cert: &Certificate, ca_pk: &PublicKey) -> bool {
    let body = Certificate::signed_body(&cert.subject_identity, &cert.subject_pk);
    verify(&body, &cert.ca_signature, ca_pk)
}

/// Keys held by one actor.
///
/// `current` is the rotating key used for outbound transactions. A certified
/// key, when present, never rotates; rotated-out keys stay in `history` so the
/// actor can still prove ownership of its older ledger entries.
#[derive(Clone, Debug)]
pub struct KeyRing {
    certified: Option<(KeyPair, Certificate)>,
    current: KeyPair,
    history: Vec<KeyPair>,
}

impl KeyRing {
    pub fn new(current: KeyPair) -> Self {
        KeyRing { certified: None, current, history: Vec::new() }
    }

    /// Ring whose current key starts out as the certified key. Rotation moves
    /// `current` to a fresh auxiliary key and leaves the certified one alone.
    pub fn certified(key: KeyPair, cert: Certificate) -> Self {
        KeyRing { certified: Some((key.clone(), cert)), current: key, history: Vec::new() }
    }

    pub fn current(&self) -> &KeyPair {
        &self.current
    }

    pub fn certified_key(&self) -> Option<&KeyPair> {
        self.certified.as_ref().map(|(k, _)| k)
    }

    pub fn certificate(&self) -> Option<&Certificate> {
        self.certified.as_ref().map(|(_, c)| c)
    }

    pub fn history(&self) -> &[KeyPair] {
        &self.history
    }

    /// True if `pk` is, or ever was, one of this ring's keys.
    pub fn owns(&self, pk: &PublicKey) -> bool {
        self.current.public == *pk
            || self.history.iter().any(|k| k.public == *pk)
            || self.certified_key().is_some_and(|k| k.public == *pk)
    }

    pub fn find(&self, pk: &PublicKey) -> Option<&KeyPair> {
        if self.current.public == *pk {
            return Some(&self.current);
        }
        self.certified_key().filter(|k| k.public == *pk).or_else(|| self.history.iter().find(|k| k.public == *pk))
    }

    pub fn rotate(&mut self, seed: u64) -> &KeyPair {
        let fresh = generate_keypair(seed);
        let old = std::mem::replace(&mut self.current, fresh);
        self.history.push(old);
        &self.current
    }
}

/// Replaces the actor's current key with one derived from `seed`.
pub fn rotate_key(ring: &mut KeyRing, seed: u64) -> KeyPair {
    ring.rotate(seed).clone()
}
