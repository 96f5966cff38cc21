//! On-chain settings, notably `consensus.algorithm` for dynamic consensus.

use serde::{Deserialize, Serialize};

use super::{ApplyError, StateView, SETTINGS_NAMESPACE};
use crate::codec;
use crate::consensus::Algorithm;
use crate::crypto::sha512_digest;
use crate::ledger::{FamilySpec, Transaction};
use crate::trie::{Address, Change};

pub const FAMILY_NAME: &str = "settings";
pub const FAMILY_VERSION: &str = "1.0";

pub const CONSENSUS_ALGORITHM_KEY: &str = "consensus.algorithm";
/// Comma-separated, sorted validator public keys.
pub const CONSENSUS_MEMBERS_KEY: &str = "consensus.members";

pub fn family_spec() -> FamilySpec {
    FamilySpec::new(FAMILY_NAME, FAMILY_VERSION, SETTINGS_NAMESPACE)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingPayload {
    pub key: String,
    pub value: String,
}

impl SettingPayload {
    pub fn new(key: &str, value: &str) -> Self {
        Self {
            key: key.to_string(),
            value: value.to_string(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        codec::to_canonical(self).expect("settings hold only strings")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ApplyError> {
        codec::from_canonical(bytes).map_err(|e| ApplyError::Codec(e.to_string()))
    }
}

pub fn setting_address(key: &str) -> Address {
    let digest = sha512_digest(key.as_bytes());
    Address::parse(&format!("{SETTINGS_NAMESPACE}{}", &digest[..64])).expect("well-formed by construction")
}

pub fn validate_setting(setting: &SettingPayload) -> Result<(), ApplyError> {
    if setting.key.is_empty() {
        return Err(ApplyError::Invalid(vec!["empty setting key".into()]));
    }
    match setting.key.as_str() {
        CONSENSUS_ALGORITHM_KEY => Algorithm::parse(&setting.value)
            .map(|_| ())
            .ok_or_else(|| ApplyError::Invalid(vec![format!("unknown consensus algorithm {:?}", setting.value)])),
        CONSENSUS_MEMBERS_KEY => {
            if setting.value.split(',').all(|m| codec::is_lower_hex(m, crate::crypto::PUBLIC_KEY_HEX_LEN)) {
                Ok(())
            } else {
                Err(ApplyError::Invalid(vec!["malformed member list".into()]))
            }
        }
        _ => Ok(()),
    }
}

/// Once a member list exists only members may change settings; before that
/// (the genesis batch) anyone may.
pub fn apply(txn: &Transaction, state: &dyn StateView) -> Result<Vec<Change>, ApplyError> {
    if txn.header.family_name != FAMILY_NAME {
        return Err(ApplyError::UnauthorizedFamily(txn.header.family_name.clone()));
    }
    if let Some(members) = read_setting(state, CONSENSUS_MEMBERS_KEY)? {
        if !members.split(',').any(|m| m == txn.header.signer_public_key) {
            return Err(ApplyError::Invalid(vec!["settings signer is not a validator".into()]));
        }
    }
    let setting = SettingPayload::decode(&txn.payload)?;
    validate_setting(&setting)?;
    Ok(vec![(setting_address(&setting.key), Some(setting.encode()))])
}

/// Reads a setting's value from state.
pub fn read_setting(state: &dyn StateView, key: &str) -> Result<Option<String>, ApplyError> {
    match state.get(&setting_address(key))? {
        Some(bytes) => Ok(Some(SettingPayload::decode(&bytes)?.value)),
        None => Ok(None),
    }
}
