//! Canonical text encoding for consensus-critical records.
//!
//! Records are rendered as a JSON-compatible map with keys sorted
//! lexicographically (by UTF-8 bytes), no insignificant whitespace, integers
//! in decimal and byte strings as lowercase hex. Floats, booleans and nulls
//! are rejected so that two implementations can never disagree on the bytes
//! of a record.

use serde::{de::DeserializeOwned, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("unsupported value kind: {0}")]
    Unsupported(&'static str),
    #[error("malformed encoding: {0}")]
    Malformed(String),
}

impl From<serde_json::Error> for CodecError {
    fn from(e: serde_json::Error) -> Self {
        CodecError::Malformed(e.to_string())
    }
}

/// Encodes a record into its canonical byte form.
pub fn canonical_encode(record: &Value) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(128);
    write_value(&mut out, record)?;
    Ok(out)
}

/// Parses canonical bytes back into a record, rejecting any value kind the
/// encoder would refuse to emit.
pub fn canonical_decode(bytes: &[u8]) -> Result<Value, CodecError> {
    let value: Value = serde_json::from_slice(bytes)?;
    check_value(&value)?;
    Ok(value)
}

/// Serializes a typed record through the canonical encoder.
pub fn to_canonical<T: Serialize + ?Sized>(record: &T) -> Result<Vec<u8>, CodecError> {
    canonical_encode(&serde_json::to_value(record)?)
}

pub fn from_canonical<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, CodecError> {
    let value = canonical_decode(bytes)?;
    Ok(serde_json::from_value(value)?)
}

fn write_value(out: &mut Vec<u8>, value: &Value) -> Result<(), CodecError> {
    match value {
        Value::Null => return Err(CodecError::Unsupported("null")),
        Value::Bool(_) => return Err(CodecError::Unsupported("boolean")),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.extend_from_slice(i.to_string().as_bytes());
            } else if let Some(u) = n.as_u64() {
                out.extend_from_slice(u.to_string().as_bytes());
            } else {
                return Err(CodecError::Unsupported("fractional number"));
            }
        }
        Value::String(s) => write_str(out, s)?,
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(out, item)?;
            }
            out.push(b']');
        }
        Value::Object(map) => {
            // serde_json may be built with `preserve_order`, so sort explicitly.
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push(b'{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_str(out, key)?;
                out.push(b':');
                write_value(out, &map[key])?;
            }
            out.push(b'}');
        }
    }
    Ok(())
}

fn write_str(out: &mut Vec<u8>, s: &str) -> Result<(), CodecError> {
    serde_json::to_writer(&mut *out, s)?;
    Ok(())
}

fn check_value(value: &Value) -> Result<(), CodecError> {
    match value {
        Value::Null => Err(CodecError::Unsupported("null")),
        Value::Bool(_) => Err(CodecError::Unsupported("boolean")),
        Value::Number(n) if n.is_f64() => Err(CodecError::Unsupported("fractional number")),
        Value::Number(_) | Value::String(_) => Ok(()),
        Value::Array(items) => items.iter().try_for_each(check_value),
        Value::Object(map) => map.values().try_for_each(check_value),
    }
}

/// Serde adapter rendering byte strings as lowercase hex.
pub mod hex_bytes {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        if text.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(D::Error::custom("hex must be lowercase"));
        }
        hex::decode(&text).map_err(D::Error::custom)
    }
}

/// Returns true when `s` is non-empty lowercase hex of exactly `len` chars.
pub fn is_lower_hex(s: &str, len: usize) -> bool {
    s.len() == len && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}
