//! The air-quality transaction family: reading codec, validation, addressing,
//! state application and sensor calibration.

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ApplyError, StateView, TxnContext, AIRQUALITY_NAMESPACE};
use crate::codec::{self, CodecError};
use crate::crypto::sha512_digest;
use crate::ledger::{FamilySpec, Transaction};
use crate::trie::{Address, Change};

pub const FAMILY_NAME: &str = "airquality";
pub const FAMILY_VERSION: &str = "1.0";

/// Upper bound for every PM channel, µg/m³.
pub const PM_MAX: i64 = 1000;
pub const LAT_MAX_UDEG: i64 = 90_000_000;
pub const LON_MAX_UDEG: i64 = 180_000_000;
/// Allowed clock skew for reading timestamps, seconds.
pub const MAX_FUTURE_SKEW_S: i64 = 300;
pub const GEOHASH_LEN: usize = 5;

pub fn family_spec() -> FamilySpec {
    FamilySpec::new(FAMILY_NAME, FAMILY_VERSION, AIRQUALITY_NAMESPACE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFlag {
    Citizen,
    Government,
    Institutional,
    Other,
}

impl SourceFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceFlag::Citizen => "citizen",
            SourceFlag::Government => "government",
            SourceFlag::Institutional => "institutional",
            SourceFlag::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "citizen" => Some(SourceFlag::Citizen),
            "government" => Some(SourceFlag::Government),
            "institutional" => Some(SourceFlag::Institutional),
            "other" => Some(SourceFlag::Other),
            _ => None,
        }
    }
}

/// One PM observation. Concentrations are integer µg/m³, coordinates integer
/// microdegrees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AirReading {
    pub pm1_0: i64,
    pub pm2_5: i64,
    pub pm10_0: i64,
    pub lat_udeg: i64,
    pub lon_udeg: i64,
    pub timestamp_s: i64,
    pub source_flag: SourceFlag,
    pub reporter_public_key: String,
}

pub fn encode_reading(reading: &AirReading) -> Vec<u8> {
    codec::to_canonical(reading).expect("readings hold only strings and integers")
}

pub fn decode_reading(bytes: &[u8]) -> Result<AirReading, CodecError> {
    codec::from_canonical(bytes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReadingViolation {
    PmOutOfRange { channel: &'static str, value: i64 },
    LatitudeOutOfRange(i64),
    LongitudeOutOfRange(i64),
    TimestampInFuture { timestamp_s: i64, clock_s: i64 },
}

impl std::fmt::Display for ReadingViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReadingViolation::PmOutOfRange { channel, value } => write!(f, "pm out of range: {channel}={value}"),
            ReadingViolation::LatitudeOutOfRange(v) => write!(f, "latitude out of range: {v}"),
            ReadingViolation::LongitudeOutOfRange(v) => write!(f, "longitude out of range: {v}"),
            ReadingViolation::TimestampInFuture { timestamp_s, clock_s } => {
                write!(f, "timestamp in future: {timestamp_s} > {clock_s}+{MAX_FUTURE_SKEW_S}")
            }
        }
    }
}

pub fn validate_reading(r: &AirReading, validator_clock_s: i64) -> Result<(), Vec<ReadingViolation>> {
    let mut out = Vec::new();
    for (channel, value) in [("pm1_0", r.pm1_0), ("pm2_5", r.pm2_5), ("pm10_0", r.pm10_0)] {
        if !(0..=PM_MAX).contains(&value) {
            out.push(ReadingViolation::PmOutOfRange { channel, value });
        }
    }
    if !(-LAT_MAX_UDEG..=LAT_MAX_UDEG).contains(&r.lat_udeg) {
        out.push(ReadingViolation::LatitudeOutOfRange(r.lat_udeg));
    }
    if !(-LON_MAX_UDEG..=LON_MAX_UDEG).contains(&r.lon_udeg) {
        out.push(ReadingViolation::LongitudeOutOfRange(r.lon_udeg));
    }
    if r.timestamp_s > validator_clock_s.saturating_add(MAX_FUTURE_SKEW_S) {
        out.push(ReadingViolation::TimestampInFuture {
            timestamp_s: r.timestamp_s,
            clock_s: validator_clock_s,
        });
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

const GEOHASH_ALPHABET: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";

/// Geohash of a microdegree coordinate, computed with exact integer bisection.
/// A value on a cell midpoint falls in the upper half.
pub fn geohash(lat_udeg: i64, lon_udeg: i64, len: usize) -> String {
    // scale so every midpoint over `len` characters is an integer
    let scale = 1i128 << ((len * 5).div_ceil(2));
    let (mut lat_lo, mut lat_hi) = (-(LAT_MAX_UDEG as i128) * scale, LAT_MAX_UDEG as i128 * scale);
    let (mut lon_lo, mut lon_hi) = (-(LON_MAX_UDEG as i128) * scale, LON_MAX_UDEG as i128 * scale);
    let lat = lat_udeg as i128 * scale;
    let lon = lon_udeg as i128 * scale;
    let mut out = String::with_capacity(len);
    let mut even = true;
    for _ in 0..len {
        let mut ch = 0usize;
        for _ in 0..5 {
            let (v, lo, hi) = if even {
                (lon, &mut lon_lo, &mut lon_hi)
            } else {
                (lat, &mut lat_lo, &mut lat_hi)
            };
            let mid = (*lo + *hi) / 2;
            ch <<= 1;
            if v >= mid {
                ch |= 1;
                *lo = mid;
            } else {
                *hi = mid;
            }
            even = !even;
        }
        out.push(GEOHASH_ALPHABET[ch] as char);
    }
    out
}

/// Hour bucket of a Unix timestamp.
pub fn hour_bucket(timestamp_s: i64) -> i64 {
    timestamp_s.div_euclid(3600)
}

/// "616972" followed by the first 64 hex chars of
/// SHA-512(reporter key ‖ geohash5 ‖ decimal hour bucket).
pub fn reading_address(r: &AirReading) -> Address {
    let key = format!(
        "{}{}{}",
        r.reporter_public_key,
        geohash(r.lat_udeg, r.lon_udeg, GEOHASH_LEN),
        hour_bucket(r.timestamp_s)
    );
    let digest = sha512_digest(key.as_bytes());
    Address::parse(&format!("{AIRQUALITY_NAMESPACE}{}", &digest[..64])).expect("well-formed by construction")
}

/// Applies an air-quality transaction. A stored reading with a timestamp at
/// least as new as the incoming one wins; the transaction still succeeds but
/// writes nothing.
pub fn apply(txn: &Transaction, state: &dyn StateView, ctx: &TxnContext) -> Result<Vec<Change>, ApplyError> {
    if txn.header.family_name != FAMILY_NAME {
        return Err(ApplyError::UnauthorizedFamily(txn.header.family_name.clone()));
    }
    let reading = decode_reading(&txn.payload).map_err(|e| ApplyError::Codec(e.to_string()))?;
    let mut problems: Vec<String> = match validate_reading(&reading, ctx.clock_s) {
        Ok(()) => Vec::new(),
        Err(v) => v.iter().map(ToString::to_string).collect(),
    };
    if reading.reporter_public_key != txn.header.signer_public_key {
        problems.push("reporter_public_key differs from transaction signer".into());
    }
    if !problems.is_empty() {
        return Err(ApplyError::Invalid(problems));
    }
    let address = reading_address(&reading);
    if let Some(existing) = state.get(&address)? {
        if let Ok(stored) = decode_reading(&existing) {
            if stored.timestamp_s >= reading.timestamp_s {
                return Ok(Vec::new());
            }
        }
    }
    Ok(vec![(address, Some(encode_reading(&reading)))])
}

pub type Rational = Ratio<i128>;

/// Linear correction `slope·raw + intercept` with exact rational coefficients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationModel {
    pub slope: Rational,
    pub intercept: Rational,
}

impl CalibrationModel {
    pub fn identity() -> Self {
        Self {
            slope: Rational::from_integer(1),
            intercept: Rational::from_integer(0),
        }
    }

    pub fn new(slope: (i128, i128), intercept: (i128, i128)) -> Result<Self, FitError> {
        if slope.1 == 0 || intercept.1 == 0 {
            return Err(FitError::ZeroDenominator);
        }
        Ok(Self {
            slope: Rational::new(slope.0, slope.1),
            intercept: Rational::new(intercept.0, intercept.1),
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FitError {
    #[error("need at least two calibration pairs")]
    TooFewPoints,
    #[error("raw values have zero variance")]
    ZeroVariance,
    #[error("denominator must be nonzero")]
    ZeroDenominator,
}

/// round-half-up(slope·raw + intercept), clamped to [0, PM_MAX].
pub fn calibrate(raw: i64, model: &CalibrationModel) -> i64 {
    let corrected = model.slope * Rational::from_integer(raw as i128) + model.intercept;
    let rounded = (corrected + Rational::new(1, 2)).floor().to_integer();
    rounded.clamp(0, PM_MAX as i128).to_i64().expect("clamped into range")
}

/// Ordinary least squares over (raw, reference) pairs, solved exactly.
pub fn fit_calibration(pairs: &[(i64, i64)]) -> Result<CalibrationModel, FitError> {
    if pairs.len() < 2 {
        return Err(FitError::TooFewPoints);
    }
    let n = pairs.len() as i128;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0i128, 0i128, 0i128, 0i128);
    for &(x, y) in pairs {
        let (x, y) = (x as i128, y as i128);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let denom = n * sxx - sx * sx;
    if denom.is_zero() {
        return Err(FitError::ZeroVariance);
    }
    let slope = Rational::new(n * sxy - sx * sy, denom);
    let intercept = (Rational::from_integer(sy) - slope * Rational::from_integer(sx)) / Rational::from_integer(n);
    Ok(CalibrationModel { slope, intercept })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use crate::ledger::build_transaction;
    use crate::trie::{StateRoot, StateTrie, TrieError};
    use proptest::prelude::*;

    struct TrieView<'a>(&'a StateTrie, StateRoot);

    impl StateView for TrieView<'_> {
        fn get(&self, address: &Address) -> Result<Option<Vec<u8>>, TrieError> {
            self.0.get(&self.1, address)
        }
    }

    fn reading(key: &KeyPair) -> AirReading {
        AirReading {
            pm1_0: 12,
            pm2_5: 35,
            pm10_0: 40,
            lat_udeg: 38_818_000,
            lon_udeg: -77_168_000,
            timestamp_s: 1_700_000_000,
            source_flag: SourceFlag::Citizen,
            reporter_public_key: key.public_key_hex().to_string(),
        }
    }

    fn key() -> KeyPair {
        KeyPair::from_seed(&[4u8; 32]).unwrap()
    }

    #[test]
    fn zero_reading_round_trips() {
        let r = AirReading {
            pm1_0: 0,
            pm2_5: 0,
            pm10_0: 0,
            lat_udeg: 0,
            lon_udeg: 0,
            timestamp_s: 0,
            source_flag: SourceFlag::Other,
            reporter_public_key: String::new(),
        };
        assert_eq!(decode_reading(&encode_reading(&r)).unwrap(), r);
    }

    #[test]
    fn truncated_payload_is_codec_error() {
        let bytes = encode_reading(&reading(&key()));
        assert!(decode_reading(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn field_names_match_the_wire_format() {
        let text = String::from_utf8(encode_reading(&reading(&key()))).unwrap();
        for field in ["lat_udeg", "lon_udeg", "pm10_0", "pm1_0", "pm2_5", "reporter_public_key", "source_flag", "timestamp_s"] {
            assert!(text.contains(&format!("\"{field}\":")), "{field}");
        }
        assert!(text.contains("\"source_flag\":\"citizen\""));
    }

    #[test]
    fn range_violations() {
        let mut r = reading(&key());
        r.pm2_5 = 2000;
        let v = validate_reading(&r, r.timestamp_s).unwrap_err();
        assert!(v[0].to_string().starts_with("pm out of range"));
        let mut r = reading(&key());
        r.lat_udeg = 91_000_000;
        assert_eq!(validate_reading(&r, r.timestamp_s).unwrap_err(), vec![ReadingViolation::LatitudeOutOfRange(91_000_000)]);
        r.lat_udeg = 0;
        r.lon_udeg = -180_000_001;
        assert!(validate_reading(&r, r.timestamp_s).is_err());
    }

    #[test]
    fn future_skew_boundary() {
        let r = reading(&key());
        let clock = r.timestamp_s - 300;
        assert!(validate_reading(&r, clock).is_ok());
        assert!(validate_reading(&r, clock - 1).is_err());
        assert!(validate_reading(&r, r.timestamp_s - 600).is_err());
    }

    #[test]
    fn geohash_matches_reference_cells() {
        // 57.64911, 10.40744 -> u4pruydqqvj
        assert_eq!(geohash(57_649_110, 10_407_440, 5), "u4pru");
        assert_eq!(geohash(57_649_110, 10_407_440, 11), "u4pruydqqvj");
        // 42.6, -5.6 -> ezs42
        assert_eq!(geohash(42_600_000, -5_600_000, 5), "ezs42");
        assert_eq!(geohash(-90_000_000, -180_000_000, 5), "00000");
        assert_eq!(geohash(90_000_000, 180_000_000, 5), "zzzzz");
    }

    #[test]
    fn address_buckets_by_hour() {
        let k = key();
        let mut a = reading(&k);
        a.timestamp_s = 1_700_000_000 - 1_700_000_000 % 3600 + 60;
        let mut b = a.clone();
        b.timestamp_s += 1200;
        assert_eq!(reading_address(&a), reading_address(&b));
        b.timestamp_s += 3600;
        assert_ne!(reading_address(&a), reading_address(&b));
        let mut c = a.clone();
        c.reporter_public_key = KeyPair::from_seed(&[5u8; 32]).unwrap().public_key_hex().to_string();
        assert_ne!(reading_address(&a), reading_address(&c));
        assert!(reading_address(&a).as_str().starts_with("616972"));
    }

    #[test]
    fn address_matches_shell_hash_pipeline() {
        // printf '%s' "${key}dqchg472222" | sha512sum, key = 02 followed by 64 'a'
        let r = AirReading {
            reporter_public_key: format!("02{}", "a".repeat(64)),
            lat_udeg: 38_818_000,
            lon_udeg: -77_168_000,
            timestamp_s: 1_700_000_000,
            ..reading(&key())
        };
        assert_eq!(geohash(r.lat_udeg, r.lon_udeg, 5), "dqchg");
        assert_eq!(hour_bucket(r.timestamp_s), 472_222);
        assert_eq!(reading_address(&r).as_str(), EXPECTED_SHELL_ADDRESS);
    }

    const EXPECTED_SHELL_ADDRESS: &str = "6169729616cdb1536539fcbf4a700d6614259f1b5ac5e90f17ee2478083a16ea6a33ee";

    #[test]
    fn apply_writes_and_honours_last_write_wins() {
        let k = key();
        let trie = StateTrie::new();
        let ctx = TxnContext { clock_s: 1_700_000_000 };
        let r = reading(&k);
        let txn = build_transaction(&encode_reading(&r), &family_spec(), &k).unwrap();
        let delta = apply(&txn, &TrieView(&trie, trie.empty_root()), &ctx).unwrap();
        assert_eq!(delta, vec![(reading_address(&r), Some(encode_reading(&r)))]);
        let root = trie.apply(&trie.empty_root(), &delta).unwrap();

        let mut older = r.clone();
        older.timestamp_s -= 10;
        let txn = build_transaction(&encode_reading(&older), &family_spec(), &k).unwrap();
        assert!(apply(&txn, &TrieView(&trie, root), &ctx).unwrap().is_empty());

        let mut newer = r.clone();
        newer.timestamp_s += 10;
        newer.pm2_5 = 50;
        let txn = build_transaction(&encode_reading(&newer), &family_spec(), &k).unwrap();
        assert_eq!(apply(&txn, &TrieView(&trie, root), &ctx).unwrap().len(), 1);
    }

    #[test]
    fn apply_rejects_invalid_and_foreign_transactions() {
        let k = key();
        let trie = StateTrie::new();
        let ctx = TxnContext { clock_s: 1_700_000_000 };
        let mut r = reading(&k);
        r.pm10_0 = 5000;
        let txn = build_transaction(&encode_reading(&r), &family_spec(), &k).unwrap();
        assert!(matches!(apply(&txn, &TrieView(&trie, trie.empty_root()), &ctx), Err(ApplyError::Invalid(_))));

        let other = FamilySpec::new("intkey", "1.0", "1cf126");
        let txn = build_transaction(&encode_reading(&reading(&k)), &other, &k).unwrap();
        assert!(matches!(apply(&txn, &TrieView(&trie, trie.empty_root()), &ctx), Err(ApplyError::UnauthorizedFamily(_))));

        let txn = build_transaction(b"{\"pm1_0\":1", &family_spec(), &k).unwrap();
        assert!(matches!(apply(&txn, &TrieView(&trie, trie.empty_root()), &ctx), Err(ApplyError::Codec(_))));

        let stranger = KeyPair::from_seed(&[6u8; 32]).unwrap();
        let txn = build_transaction(&encode_reading(&reading(&k)), &family_spec(), &stranger).unwrap();
        assert!(matches!(apply(&txn, &TrieView(&trie, trie.empty_root()), &ctx), Err(ApplyError::Invalid(_))));
    }

    #[test]
    fn apply_is_deterministic() {
        let k = key();
        let trie = StateTrie::new();
        let ctx = TxnContext { clock_s: 1_700_000_000 };
        let txn = build_transaction(&encode_reading(&reading(&k)), &family_spec(), &k).unwrap();
        let view = TrieView(&trie, trie.empty_root());
        assert_eq!(apply(&txn, &view, &ctx).unwrap(), apply(&txn, &view, &ctx).unwrap());
    }

    #[test]
    fn calibrate_examples() {
        assert_eq!(calibrate(37, &CalibrationModel::identity()), 37);
        assert_eq!(calibrate(3, &CalibrationModel::new((2, 1), (1, 1)).unwrap()), 7);
        assert_eq!(calibrate(2, &CalibrationModel::new((3, 2), (-1, 6)).unwrap()), 3);
        assert_eq!(calibrate(900, &CalibrationModel::new((2, 1), (0, 1)).unwrap()), 1000);
        assert_eq!(calibrate(1, &CalibrationModel::new((1, 1), (-5, 1)).unwrap()), 0);
        // exactly half rounds up
        assert_eq!(calibrate(1, &CalibrationModel::new((1, 2), (0, 1)).unwrap()), 1);
        assert_eq!(CalibrationModel::new((1, 0), (0, 1)), Err(FitError::ZeroDenominator));
    }

    #[test]
    fn fit_examples() {
        let m = fit_calibration(&[(0, 1), (1, 3), (2, 5)]).unwrap();
        assert_eq!((m.slope, m.intercept), (Rational::from_integer(2), Rational::from_integer(1)));
        let m = fit_calibration(&[(0, 0), (1, 1), (2, 3)]).unwrap();
        assert_eq!((m.slope, m.intercept), (Rational::new(3, 2), Rational::new(-1, 6)));
        assert_eq!(fit_calibration(&[(1, 5), (1, 7)]), Err(FitError::ZeroVariance));
        assert_eq!(fit_calibration(&[(1, 5)]), Err(FitError::TooFewPoints));
    }

    fn arb_reading() -> impl Strategy<Value = AirReading> {
        (
            (0..=PM_MAX, 0..=PM_MAX, 0..=PM_MAX),
            (-LAT_MAX_UDEG..=LAT_MAX_UDEG, -LON_MAX_UDEG..=LON_MAX_UDEG),
            0i64..4_000_000_000,
            prop_oneof![
                Just(SourceFlag::Citizen),
                Just(SourceFlag::Government),
                Just(SourceFlag::Institutional),
                Just(SourceFlag::Other)
            ],
            "[0-9a-f]{66}",
        )
            .prop_map(|((a, b, c), (lat, lon), ts, flag, key)| AirReading {
                pm1_0: a,
                pm2_5: b,
                pm10_0: c,
                lat_udeg: lat,
                lon_udeg: lon,
                timestamp_s: ts,
                source_flag: flag,
                reporter_public_key: key,
            })
    }

    proptest! {
        #[test]
        fn codec_round_trip(r in arb_reading()) {
            prop_assert_eq!(decode_reading(&encode_reading(&r)).unwrap(), r);
        }

        #[test]
        fn collinear_fit_is_exact(slope_n in -20i128..20, slope_d in 1i128..9, icpt in -50i128..50,
                                  xs in proptest::collection::btree_set(-100i64..100, 2..8)) {
            // y values must be integers, so scale x by the slope denominator
            let pairs: Vec<(i64, i64)> = xs.iter()
                .map(|&x| (x * slope_d as i64, (x as i128 * slope_n + icpt) as i64))
                .collect();
            let m = fit_calibration(&pairs).unwrap();
            prop_assert_eq!(m.slope, Rational::new(slope_n, slope_d));
            prop_assert_eq!(m.intercept, Rational::from_integer(icpt));
        }

        #[test]
        fn calibrate_is_monotone(n in 0i128..50, d in 1i128..10, c in -100i128..100, a in 0i64..2000, b in 0i64..2000) {
            let m = CalibrationModel::new((n, d), (c, 1)).unwrap();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(calibrate(lo, &m) <= calibrate(hi, &m));
        }
    }
}
