//! TCP framing: a 4-byte big-endian length, then a canonical envelope
//! `{type, sender, payload, signature}` where the signature covers the
//! payload bytes.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Message;
use crate::codec::{self, hex_bytes};
use crate::crypto::{self, KeyPair};

pub const MAX_FRAME: usize = 4 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("bad envelope signature")]
    BadSignature,
    #[error("envelope type {0:?} does not match its payload")]
    TypeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    #[serde(rename = "type")]
    pub kind: String,
    pub sender: String,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    pub signature: String,
}

impl Envelope {
    pub fn seal(message: &Message, signer: &KeyPair) -> Result<Self, FrameError> {
        let payload = codec::to_canonical(message).map_err(|e| FrameError::Malformed(e.to_string()))?;
        let signature = signer.sign(&payload).map_err(|e| FrameError::Malformed(e.to_string()))?;
        Ok(Self {
            kind: message.kind().to_string(),
            sender: signer.public_key_hex().to_string(),
            payload,
            signature,
        })
    }

    /// Checks the signature and decodes the message.
    pub fn open(&self) -> Result<Message, FrameError> {
        match crypto::verify(&self.payload, &self.signature, &self.sender) {
            Ok(true) => {}
            _ => return Err(FrameError::BadSignature),
        }
        let message: Message = codec::from_canonical(&self.payload).map_err(|e| FrameError::Malformed(e.to_string()))?;
        if message.kind() != self.kind {
            return Err(FrameError::TypeMismatch(self.kind.clone()));
        }
        Ok(message)
    }
}

pub fn encode_frame(envelope: &Envelope) -> Result<Vec<u8>, FrameError> {
    let body = codec::to_canonical(envelope).map_err(|e| FrameError::Malformed(e.to_string()))?;
    if body.len() > MAX_FRAME {
        return Err(FrameError::TooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn write_frame(w: &mut impl Write, envelope: &Envelope) -> Result<(), FrameError> {
    w.write_all(&encode_frame(envelope)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Envelope, FrameError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(FrameError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode_body(&body)
}

pub fn decode_body(body: &[u8]) -> Result<Envelope, FrameError> {
    codec::from_canonical(body).map_err(|e| FrameError::Malformed(e.to_string()))
}
