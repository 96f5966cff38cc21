//! SHA-512 digests and secp256k1 key management.

use std::fmt;
use std::fs;
use std::path::Path;

use k256::ecdsa::signature::{Signer, Verifier};
use k256::ecdsa::{Signature, SigningKey, VerifyingKey};
use rand::RngCore;
use sha2::{Digest, Sha512};
use thiserror::Error;

/// Hex length of a SHA-512 digest.
pub const DIGEST_HEX_LEN: usize = 128;
/// Hex length of a compressed secp256k1 public key.
pub const PUBLIC_KEY_HEX_LEN: usize = 66;
/// Hex length of a compact (r || s) signature.
pub const SIGNATURE_HEX_LEN: usize = 128;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("invalid private key scalar")]
    InvalidScalar,
    #[error("malformed public key")]
    MalformedPublicKey,
    #[error("malformed signature")]
    MalformedSignature,
    #[error("refusing to sign an empty message")]
    EmptyMessage,
    #[error("key file: {0}")]
    KeyFile(String),
}

pub fn sha512_bytes(data: &[u8]) -> [u8; 64] {
    Sha512::digest(data).into()
}

/// Lowercase hex SHA-512 of `data`.
pub fn sha512_digest(data: &[u8]) -> String {
    hex::encode(sha512_bytes(data))
}

#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
    public_hex: String,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public_key", &self.public_hex)
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    /// Builds a key pair from a 32-byte scalar; zero and values at or above
    /// the curve order are rejected.
    pub fn from_seed(seed: &[u8; 32]) -> Result<Self, CryptoError> {
        let signing = SigningKey::from_bytes(seed.into()).map_err(|_| CryptoError::InvalidScalar)?;
        Ok(Self::from_signing(signing))
    }

    pub fn random() -> Self {
        let mut rng = rand::thread_rng();
        loop {
            let mut seed = [0u8; 32];
            rng.fill_bytes(&mut seed);
            if let Ok(kp) = Self::from_seed(&seed) {
                return kp;
            }
        }
    }

    pub fn from_private_hex(hex_key: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(hex_key.trim()).map_err(|_| CryptoError::InvalidScalar)?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| CryptoError::InvalidScalar)?;
        Self::from_seed(&seed)
    }

    fn from_signing(signing: SigningKey) -> Self {
        let point = signing.verifying_key().to_encoded_point(true);
        Self {
            public_hex: hex::encode(point.as_bytes()),
            signing,
        }
    }

    pub fn public_key_hex(&self) -> &str {
        &self.public_hex
    }

    pub fn private_key_hex(&self) -> String {
        hex::encode(self.signing.to_bytes())
    }

    /// Deterministic (RFC 6979) ECDSA over SHA-256 of `message`, low-S,
    /// returned as 64-byte compact hex.
    pub fn sign(&self, message: &[u8]) -> Result<String, CryptoError> {
        if message.is_empty() {
            return Err(CryptoError::EmptyMessage);
        }
        let sig: Signature = self.signing.sign(message);
        Ok(hex::encode(sig.to_bytes()))
    }

    /// Reads a two-line key file: private key hex, then public key hex.
    pub fn load(path: &Path) -> Result<Self, CryptoError> {
        let text = fs::read_to_string(path).map_err(|e| CryptoError::KeyFile(e.to_string()))?;
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let private = lines
            .next()
            .ok_or_else(|| CryptoError::KeyFile("missing private key line".into()))?;
        let kp = Self::from_private_hex(private)?;
        if let Some(public) = lines.next() {
            if public != kp.public_hex {
                return Err(CryptoError::KeyFile(
                    "public key does not match private key".into(),
                ));
            }
        }
        Ok(kp)
    }

    pub fn save(&self, path: &Path) -> Result<(), CryptoError> {
        let text = format!("{}\n{}\n", self.private_key_hex(), self.public_hex);
        fs::write(path, text).map_err(|e| CryptoError::KeyFile(e.to_string()))
    }
}

/// Generates a key pair, deterministically when a seed is supplied.
pub fn keypair_generate(seed: Option<&[u8; 32]>) -> Result<KeyPair, CryptoError> {
    match seed {
        Some(seed) => KeyPair::from_seed(seed),
        None => Ok(KeyPair::random()),
    }
}

pub fn sign(header_bytes: &[u8], key: &KeyPair) -> Result<String, CryptoError> {
    key.sign(header_bytes)
}

/// Verifies a compact hex signature. Malformed keys or signatures are errors;
/// a well-formed signature that does not match yields `Ok(false)`.
pub fn verify(header_bytes: &[u8], signature_hex: &str, public_key_hex: &str) -> Result<bool, CryptoError> {
    let key_bytes = hex::decode(public_key_hex).map_err(|_| CryptoError::MalformedPublicKey)?;
    let key = VerifyingKey::from_sec1_bytes(&key_bytes).map_err(|_| CryptoError::MalformedPublicKey)?;
    if signature_hex.len() != SIGNATURE_HEX_LEN {
        return Err(CryptoError::MalformedSignature);
    }
    let sig_bytes = hex::decode(signature_hex).map_err(|_| CryptoError::MalformedSignature)?;
    let sig = Signature::from_slice(&sig_bytes).map_err(|_| CryptoError::MalformedSignature)?;
    Ok(key.verify(header_bytes, &sig).is_ok())
}

/// Fills a fresh random 16-byte nonce as hex.
pub fn random_nonce() -> String {
    let mut bytes = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EMPTY_SHA512: &str = "cf83e1357eefb8bdf1542850d66d8007d620e4050b5715dc83f4a921d36ce9ce\
                                47d0d13c5d85f2b0ff8318d2877eec2f63b931bd47417a81a538327af927da3e";

    #[test]
    fn empty_input_digest() {
        assert_eq!(sha512_digest(b""), EMPTY_SHA512);
        assert_eq!(sha512_digest(b"abc"), sha512_digest(b"abc"));
    }

    #[test]
    fn one_bit_flips_change_digest() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let len = rng.gen_range(1..64);
            let mut data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let before = sha512_bytes(&data);
            let bit = rng.gen_range(0..len * 8);
            data[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(before, sha512_bytes(&data));
        }
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let seed = [7u8; 32];
        let a = keypair_generate(Some(&seed)).unwrap();
        let b = keypair_generate(Some(&seed)).unwrap();
        assert_eq!(a.public_key_hex(), b.public_key_hex());
        assert_eq!(a.public_key_hex().len(), PUBLIC_KEY_HEX_LEN);
        assert_eq!(a.private_key_hex(), hex::encode(seed));
    }

    #[test]
    fn zero_and_overflowing_seeds_are_rejected() {
        assert_eq!(keypair_generate(Some(&[0u8; 32])).unwrap_err(), CryptoError::InvalidScalar);
        assert_eq!(keypair_generate(Some(&[0xff; 32])).unwrap_err(), CryptoError::InvalidScalar);
    }

    #[test]
    fn sign_verify_and_tamper() {
        let kp = keypair_generate(Some(&[3u8; 32])).unwrap();
        let msg = b"header bytes".to_vec();
        let sig = sign(&msg, &kp).unwrap();
        assert_eq!(sig, sign(&msg, &kp).unwrap(), "signing must be deterministic");
        assert!(verify(&msg, &sig, kp.public_key_hex()).unwrap());
        let mut tampered = msg.clone();
        tampered[0] ^= 1;
        assert!(!verify(&tampered, &sig, kp.public_key_hex()).unwrap());
        assert_eq!(sign(b"", &kp).unwrap_err(), CryptoError::EmptyMessage);
        assert_eq!(verify(&msg, "zz", kp.public_key_hex()).unwrap_err(), CryptoError::MalformedSignature);
        assert_eq!(verify(&msg, &sig, "02ab").unwrap_err(), CryptoError::MalformedPublicKey);
    }

    #[test]
    fn key_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("node.key");
        let kp = KeyPair::random();
        kp.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let loaded = KeyPair::load(&path).unwrap();
        assert_eq!(loaded.public_key_hex(), kp.public_key_hex());
    }
}
