//! Transactions, batches and blocks: construction, identity and structural
//! validation.
//!
//! Every header is signed over its canonical encoding. A transaction's id is
//! its header signature, as is a batch's; a block's id is the SHA-512 of its
//! canonical header encoding.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, hex_bytes, is_lower_hex, CodecError};
use crate::crypto::{self, sha512_digest, CryptoError, KeyPair, DIGEST_HEX_LEN, PUBLIC_KEY_HEX_LEN};

/// previous_block_id of the genesis block.
pub const GENESIS_PREVIOUS_ID: &str = "00000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("payload must not be empty")]
    EmptyPayload,
    #[error("a batch needs at least one transaction")]
    EmptyTransactionList,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransactionHeader {
    pub family_name: String,
    pub family_version: String,
    pub signer_public_key: String,
    pub payload_sha512: String,
    pub nonce: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transaction {
    pub header: TransactionHeader,
    pub header_signature: String,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
}

impl Transaction {
    pub fn id(&self) -> &str {
        &self.header_signature
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchHeader {
    pub signer_public_key: String,
    pub transaction_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Batch {
    pub header: BatchHeader,
    pub header_signature: String,
    pub transactions: Vec<Transaction>,
}

impl Batch {
    pub fn id(&self) -> &str {
        &self.header_signature
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockHeader {
    pub block_num: u64,
    pub previous_block_id: String,
    pub signer_public_key: String,
    pub batch_ids: Vec<String>,
    pub state_root_hash: String,
    #[serde(with = "hex_bytes")]
    pub consensus_payload: Vec<u8>,
}

impl BlockHeader {
    pub fn encode(&self) -> Vec<u8> {
        codec::to_canonical(self).expect("block headers hold only strings and integers")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub header: BlockHeader,
    pub header_signature: String,
    pub batches: Vec<Batch>,
}

impl Block {
    /// SHA-512 of the canonical header encoding.
    pub fn id(&self) -> String {
        block_id(&self.header)
    }

    pub fn num(&self) -> u64 {
        self.header.block_num
    }

    pub fn previous_id(&self) -> &str {
        &self.header.previous_block_id
    }

    pub fn is_genesis(&self) -> bool {
        self.header.block_num == 0 && self.header.previous_block_id == GENESIS_PREVIOUS_ID
    }
}

pub fn block_id(header: &BlockHeader) -> String {
    sha512_digest(&header.encode())
}

/// Identifies a transaction family and the address prefixes it declares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FamilySpec {
    pub name: String,
    pub version: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl FamilySpec {
    pub fn new(name: &str, version: &str, namespace: &str) -> Self {
        Self {
            name: name.to_string(),
            version: version.to_string(),
            inputs: vec![namespace.to_string()],
            outputs: vec![namespace.to_string()],
        }
    }
}

pub fn build_transaction(payload: &[u8], family: &FamilySpec, signer: &KeyPair) -> Result<Transaction, LedgerError> {
    build_transaction_with_nonce(payload, family, signer, crypto::random_nonce())
}

/// Like [`build_transaction`] with a caller-chosen nonce; used where every node
/// must derive the same transaction (genesis).
pub fn build_transaction_with_nonce(
    payload: &[u8],
    family: &FamilySpec,
    signer: &KeyPair,
    nonce: String,
) -> Result<Transaction, LedgerError> {
    if payload.is_empty() {
        return Err(LedgerError::EmptyPayload);
    }
    let header = TransactionHeader {
        family_name: family.name.clone(),
        family_version: family.version.clone(),
        signer_public_key: signer.public_key_hex().to_string(),
        payload_sha512: sha512_digest(payload),
        nonce,
        inputs: family.inputs.clone(),
        outputs: family.outputs.clone(),
    };
    let header_signature = signer.sign(&codec::to_canonical(&header)?)?;
    Ok(Transaction {
        header,
        header_signature,
        payload: payload.to_vec(),
    })
}

pub fn build_batch(transactions: Vec<Transaction>, signer: &KeyPair) -> Result<Batch, LedgerError> {
    if transactions.is_empty() {
        return Err(LedgerError::EmptyTransactionList);
    }
    let header = BatchHeader {
        signer_public_key: signer.public_key_hex().to_string(),
        transaction_ids: transactions.iter().map(|t| t.header_signature.clone()).collect(),
    };
    let header_signature = signer.sign(&codec::to_canonical(&header)?)?;
    Ok(Batch {
        header,
        header_signature,
        transactions,
    })
}

/// Signs a block header and assembles the block.
pub fn seal_block(header: BlockHeader, batches: Vec<Batch>, signer: &KeyPair) -> Result<Block, LedgerError> {
    let header_signature = signer.sign(&header.encode())?;
    Ok(Block {
        header,
        header_signature,
        batches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    PayloadDigestMismatch,
    InvalidTransactionSignature,
    InvalidBatchSignature,
    IdListMismatch,
    MalformedField,
    EmptyBatch,
    InvalidBlockSignature,
    BatchIdListMismatch,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::PayloadDigestMismatch => "payload digest mismatch",
            ViolationKind::InvalidTransactionSignature => "invalid transaction signature",
            ViolationKind::InvalidBatchSignature => "invalid batch signature",
            ViolationKind::IdListMismatch => "id list mismatch",
            ViolationKind::MalformedField => "malformed field",
            ViolationKind::EmptyBatch => "empty batch",
            ViolationKind::InvalidBlockSignature => "invalid block signature",
            ViolationKind::BatchIdListMismatch => "batch id list mismatch",
        }
    }
}

/// One structural problem found in a batch or block. `subject` names the
/// offending transaction, batch or block id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: String,
    pub subject: String,
    pub detail: String,
}

impl Violation {
    fn new(kind: ViolationKind, subject: &str, detail: impl Into<String>) -> Self {
        Self {
            kind: kind.as_str().to_string(),
            subject: subject.to_string(),
            detail: detail.into(),
        }
    }

    pub fn is(&self, kind: ViolationKind) -> bool {
        self.kind == kind.as_str()
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}): {}", self.kind, short(&self.subject), self.detail)
    }
}

fn short(id: &str) -> &str {
    &id[..id.len().min(16)]
}

fn check_signature(bytes: &[u8], sig: &str, key: &str) -> Result<(), String> {
    match crypto::verify(bytes, sig, key) {
        Ok(true) => Ok(()),
        Ok(false) => Err("signature does not verify".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn validate_transaction(txn: &Transaction, out: &mut Vec<Violation>) {
    let id = txn.header_signature.as_str();
    let header = &txn.header;
    if !is_lower_hex(&header.signer_public_key, PUBLIC_KEY_HEX_LEN) {
        out.push(Violation::new(ViolationKind::MalformedField, id, "signer_public_key"));
    }
    if !is_lower_hex(&header.nonce, 32) {
        out.push(Violation::new(ViolationKind::MalformedField, id, "nonce"));
    }
    if sha512_digest(&txn.payload) != header.payload_sha512 {
        out.push(Violation::new(
            ViolationKind::PayloadDigestMismatch,
            id,
            "payload_sha512 does not match payload",
        ));
    }
    match codec::to_canonical(header) {
        Ok(bytes) => {
            if let Err(detail) = check_signature(&bytes, id, &header.signer_public_key) {
                out.push(Violation::new(ViolationKind::InvalidTransactionSignature, id, detail));
            }
        }
        Err(e) => out.push(Violation::new(ViolationKind::MalformedField, id, e.to_string())),
    }
}

/// Checks every signature, every payload digest and the id list, reporting all
/// violations found.
pub fn validate_batch(batch: &Batch) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let id = batch.header_signature.as_str();
    if batch.transactions.is_empty() {
        violations.push(Violation::new(ViolationKind::EmptyBatch, id, "no transactions"));
    }
    let listed: Vec<&str> = batch.header.transaction_ids.iter().map(String::as_str).collect();
    let actual: Vec<&str> = batch.transactions.iter().map(Transaction::id).collect();
    if listed != actual {
        violations.push(Violation::new(
            ViolationKind::IdListMismatch,
            id,
            "transaction_ids differ from contained transactions",
        ));
    }
    match codec::to_canonical(&batch.header) {
        Ok(bytes) => {
            if let Err(detail) = check_signature(&bytes, id, &batch.header.signer_public_key) {
                violations.push(Violation::new(ViolationKind::InvalidBatchSignature, id, detail));
            }
        }
        Err(e) => violations.push(Violation::new(ViolationKind::MalformedField, id, e.to_string())),
    }
    for txn in &batch.transactions {
        validate_transaction(txn, &mut violations);
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Structural block checks: header fields, signature, batch id list and
/// every contained batch. State and consensus checks live in the journal.
pub fn validate_block_structure(block: &Block) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let id = block.id();
    let header = &block.header;
    if !is_lower_hex(&header.previous_block_id, DIGEST_HEX_LEN) {
        violations.push(Violation::new(ViolationKind::MalformedField, &id, "previous_block_id"));
    }
    if !is_lower_hex(&header.state_root_hash, DIGEST_HEX_LEN) {
        violations.push(Violation::new(ViolationKind::MalformedField, &id, "state_root_hash"));
    }
    if let Err(detail) = check_signature(&header.encode(), &block.header_signature, &header.signer_public_key) {
        violations.push(Violation::new(ViolationKind::InvalidBlockSignature, &id, detail));
    }
    let listed: Vec<&str> = header.batch_ids.iter().map(String::as_str).collect();
    let actual: Vec<&str> = block.batches.iter().map(Batch::id).collect();
    if listed != actual {
        violations.push(Violation::new(
            ViolationKind::BatchIdListMismatch,
            &id,
            "batch_ids differ from contained batches",
        ));
    }
    for batch in &block.batches {
        if let Err(mut v) = validate_batch(batch) {
            violations.append(&mut v);
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}
