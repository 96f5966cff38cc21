//! Fault bounds and win-rate monitoring.

use super::ConsensusError;

/// Largest Byzantine count a network of `n` tolerates: floor((n - 1) / 3).
pub fn max_faults(n: u64) -> u64 {
    n.saturating_sub(1) / 3
}

/// One-sided critical value (99.5%).
pub const Z_CRITICAL: f64 = 2.575;
/// Minimum rounds before a z-score is meaningful.
pub const MIN_ROUNDS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZTest {
    pub z: f64,
    pub flagged: bool,
}

/// Standardized deviation of a node's wins from the uniform expectation
/// `rounds / n`; flagged when above [`Z_CRITICAL`].
pub fn ztest_winrate(wins: u64, rounds: u64, n: u64) -> Result<ZTest, ConsensusError> {
    if n < 2 {
        return Err(ConsensusError::Domain("need at least two nodes".into()));
    }
    if rounds < MIN_ROUNDS {
        return Err(ConsensusError::InsufficientData { rounds, needed: MIN_ROUNDS });
    }
    let p = 1.0 / n as f64;
    let expected = rounds as f64 * p;
    let sigma = (rounds as f64 * p * (1.0 - p)).sqrt();
    let z = (wins as f64 - expected) / sigma;
    Ok(ZTest { z, flagged: z > Z_CRITICAL })
}

/// Fraction of compromised nodes sufficient to break an enclave-backed
/// lottery, modelled as ln(ln n) / ln n (unit constant, natural logs).
pub fn sybil_threshold(n: f64) -> Result<f64, ConsensusError> {
    if !(n > std::f64::consts::E) {
        return Err(ConsensusError::Domain(format!("n must exceed e, got {n}")));
    }
    let ln = n.ln();
    Ok(ln.ln() / ln)
}
