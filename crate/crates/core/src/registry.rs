//! Off-chain API-key registry. Every mutation is appended to an event log as
//! one canonical record per line; opening the registry replays the log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::RwLock;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown key")]
    UnknownKey,
    #[error("malformed account id {0:?}")]
    MalformedAccount(String),
    #[error("storage: {0}")]
    Storage(#[from] io::Error),
    #[error("corrupt registry log line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyStatus {
    Active,
    Revoked,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiKey {
    pub key: String,
    pub status: KeyStatus,
    pub issued_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flag {
    pub reason: String,
    /// Z score scaled by 1000, when the flag came from win-rate monitoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_milli: Option<i64>,
    pub at: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub account_id: String,
    pub api_keys: Vec<ApiKey>,
    pub flags: Vec<Flag>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegistryEvent {
    Issue { account_id: String, key: String, at: i64 },
    Revoke { key: String, at: i64 },
    Flag { account_id: String, reason: String, #[serde(default, skip_serializing_if = "Option::is_none")] z_milli: Option<i64>, at: i64 },
}

#[derive(Debug, Default)]
struct State {
    accounts: BTreeMap<String, Account>,
    /// key -> owning account
    owners: BTreeMap<String, String>,
}

impl State {
    fn apply(&mut self, event: &RegistryEvent) -> Result<(), RegistryError> {
        match event {
            RegistryEvent::Issue { account_id, key, at } => {
                let account = self.accounts.entry(account_id.clone()).or_insert_with(|| Account {
                    account_id: account_id.clone(),
                    ..Account::default()
                });
                account.api_keys.push(ApiKey { key: key.clone(), status: KeyStatus::Active, issued_at: *at });
                self.owners.insert(key.clone(), account_id.clone());
            }
            RegistryEvent::Revoke { key, .. } => {
                let owner = self.owners.get(key).ok_or(RegistryError::UnknownKey)?;
                let account = self.accounts.get_mut(owner).expect("owner exists");
                for k in account.api_keys.iter_mut().filter(|k| k.key == *key) {
                    k.status = KeyStatus::Revoked;
                }
            }
            RegistryEvent::Flag { account_id, reason, z_milli, at } => {
                let account = self.accounts.entry(account_id.clone()).or_insert_with(|| Account {
                    account_id: account_id.clone(),
                    ..Account::default()
                });
                account.flags.push(Flag { reason: reason.clone(), z_milli: *z_milli, at: *at });
            }
        }
        Ok(())
    }

    fn status(&self, key: &str) -> KeyStatus {
        self.owners
            .get(key)
            .and_then(|owner| self.accounts[owner].api_keys.iter().find(|k| k.key == key))
            .map_or(KeyStatus::Unknown, |k| k.status)
    }
}

pub struct Registry {
    state: RwLock<State>,
    log: Option<std::sync::Mutex<File>>,
}

impl Registry {
    pub fn in_memory() -> Self {
        Self { state: RwLock::new(State::default()), log: None }
    }

    pub fn open(path: &Path) -> Result<Self, RegistryError> {
        let mut state = State::default();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let event: RegistryEvent = codec::from_canonical(line.as_bytes())
                    .map_err(|e| RegistryError::Corrupt { line: i + 1, reason: e.to_string() })?;
                state
                    .apply(&event)
                    .map_err(|e| RegistryError::Corrupt { line: i + 1, reason: e.to_string() })?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { state: RwLock::new(state), log: Some(std::sync::Mutex::new(file)) })
    }

    fn record(&self, state: &mut State, event: RegistryEvent) -> Result<(), RegistryError> {
        state.apply(&event)?;
        if let Some(log) = &self.log {
            let mut line = codec::to_canonical(&event).expect("events encode");
            line.push(b'\n');
            let mut file = log.lock().expect("registry log lock");
            file.write_all(&line)?;
            file.sync_data()?;
        }
        Ok(())
    }

    /// Issues a fresh random 32-byte key; unknown accounts are created.
    pub fn issue_key(&self, account_id: &str, now: i64) -> Result<String, RegistryError> {
        if account_id.is_empty() || !account_id.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
            return Err(RegistryError::MalformedAccount(account_id.to_string()));
        }
        let mut state = self.state.write().expect("registry lock");
        let key = loop {
            let mut bytes = [0u8; 32];
            rand::thread_rng().fill_bytes(&mut bytes);
            let key = hex::encode(bytes);
            if !state.owners.contains_key(&key) {
                break key;
            }
        };
        self.record(&mut state, RegistryEvent::Issue { account_id: account_id.to_string(), key: key.clone(), at: now })?;
        Ok(key)
    }

    /// Permanent and idempotent.
    pub fn revoke_key(&self, key: &str, now: i64) -> Result<(), RegistryError> {
        let mut state = self.state.write().expect("registry lock");
        match state.status(key) {
            KeyStatus::Unknown => Err(RegistryError::UnknownKey),
            KeyStatus::Revoked => Ok(()),
            KeyStatus::Active => self.record(&mut state, RegistryEvent::Revoke { key: key.to_string(), at: now }),
        }
    }

    pub fn check_key(&self, key: &str) -> KeyStatus {
        self.state.read().expect("registry lock").status(key)
    }

    pub fn flag(&self, account_id: &str, reason: &str, z_milli: Option<i64>, now: i64) -> Result<(), RegistryError> {
        let mut state = self.state.write().expect("registry lock");
        self.record(
            &mut state,
            RegistryEvent::Flag { account_id: account_id.to_string(), reason: reason.to_string(), z_milli, at: now },
        )
    }

    pub fn account(&self, account_id: &str) -> Option<Account> {
        self.state.read().expect("registry lock").accounts.get(account_id).cloned()
    }

    pub fn accounts(&self) -> Vec<Account> {
        self.state.read().expect("registry lock").accounts.values().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn issue_revoke_check() {
        let reg = Registry::in_memory();
        let a = reg.issue_key("ab01", 1).unwrap();
        let b = reg.issue_key("ab01", 2).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.len(), 64);
        assert_eq!(reg.check_key(&a), KeyStatus::Active);
        reg.revoke_key(&a, 3).unwrap();
        reg.revoke_key(&a, 4).unwrap();
        assert_eq!(reg.check_key(&a), KeyStatus::Revoked);
        assert_eq!(reg.check_key(&b), KeyStatus::Active);
        assert!(matches!(reg.revoke_key(&"00".repeat(32), 5), Err(RegistryError::UnknownKey)));
        assert!(reg.issue_key("not hex", 1).is_err());
    }

    #[test]
    fn ten_thousand_keys_are_distinct() {
        let reg = Registry::in_memory();
        let keys: HashSet<String> = (0..10_000).map(|_| reg.issue_key("01", 0).unwrap()).collect();
        assert_eq!(keys.len(), 10_000);
    }

    #[test]
    fn replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.log");
        let (a, b) = {
            let reg = Registry::open(&path).unwrap();
            let a = reg.issue_key("aa", 1).unwrap();
            let b = reg.issue_key("bb", 2).unwrap();
            reg.revoke_key(&a, 3).unwrap();
            reg.flag("bb", "win rate", Some(13_333), 4).unwrap();
            (a, b)
        };
        let reg = Registry::open(&path).unwrap();
        assert_eq!(reg.check_key(&a), KeyStatus::Revoked);
        assert_eq!(reg.check_key(&b), KeyStatus::Active);
        assert_eq!(reg.account("bb").unwrap().flags[0].z_milli, Some(13_333));
    }

    proptest! {
        #[test]
        fn check_matches_history(ops in proptest::collection::vec((0u8..3, 0usize..8), 1..60), probe in "[0-9a-f]{64}") {
            let reg = Registry::in_memory();
            let mut keys: Vec<String> = Vec::new();
            let mut revoked: HashSet<String> = HashSet::new();
            for (op, idx) in ops {
                match op {
                    0 | 1 => keys.push(reg.issue_key("0a", 0).unwrap()),
                    _ => {
                        if let Some(k) = keys.get(idx % keys.len().max(1)) {
                            reg.revoke_key(k, 0).unwrap();
                            revoked.insert(k.clone());
                        }
                    }
                }
            }
            for k in &keys {
                let expected = if revoked.contains(k) { KeyStatus::Revoked } else { KeyStatus::Active };
                prop_assert_eq!(reg.check_key(k), expected);
            }
            if !keys.contains(&probe) {
                prop_assert_eq!(reg.check_key(&probe), KeyStatus::Unknown);
            }
        }
    }
}
