//! Transaction families and the dispatcher the journal executes them through.

pub mod airquality;
pub mod settings;

use thiserror::Error;

use crate::ledger::Transaction;
use crate::trie::{Address, Change, TrieError};

/// Namespace of the air-quality family ("air" in ASCII hex).
pub const AIRQUALITY_NAMESPACE: &str = "616972";
/// Namespace of on-chain settings.
pub const SETTINGS_NAMESPACE: &str = "000000";
/// Namespace reserved for registry mirrors ("reg" in ASCII hex).
pub const REGISTRY_NAMESPACE: &str = "726567";

/// Read access to the state a transaction executes against.
pub trait StateView {
    fn get(&self, address: &Address) -> Result<Option<Vec<u8>>, TrieError>;
}

/// Execution inputs that are not part of the transaction itself.
#[derive(Debug, Clone, Copy)]
pub struct TxnContext {
    /// Validator clock in Unix seconds.
    pub clock_s: i64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApplyError {
    #[error("codec error: {0}")]
    Codec(String),
    #[error("invalid: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("unauthorized family {0}")]
    UnauthorizedFamily(String),
    #[error("state error: {0}")]
    State(String),
}

impl From<TrieError> for ApplyError {
    fn from(e: TrieError) -> Self {
        ApplyError::State(e.to_string())
    }
}

/// Routes a transaction to its family handler and returns the state delta.
pub fn apply_transaction(txn: &Transaction, state: &dyn StateView, ctx: &TxnContext) -> Result<Vec<Change>, ApplyError> {
    match txn.header.family_name.as_str() {
        airquality::FAMILY_NAME => airquality::apply(txn, state, ctx),
        settings::FAMILY_NAME => settings::apply(txn, state),
        other => Err(ApplyError::UnauthorizedFamily(other.to_string())),
    }
}
