//! Sensor-side pipeline: serial text from the device, an emulated PMS7003,
//! calibration, buffering, and signed batch submission.

use std::f64::consts::PI;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api::{BatchList, SubmitReceipt};
use crate::codec;
use crate::crypto::{sha512_digest, KeyPair};
use crate::family::airquality::{self, calibrate, AirReading, CalibrationModel, SourceFlag};
use crate::ledger::{build_batch, build_transaction_with_nonce, Batch, LedgerError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorNoiseModel {
    pub rmse_ug_m3: f64,
    pub consistency_bound: f64,
    pub temp_range_c: (f64, f64),
    pub humidity_range_pct: (f64, f64),
}

impl Default for SensorNoiseModel {
    fn default() -> Self {
        Self {
            rmse_ug_m3: 2.22,
            consistency_bound: 0.10,
            temp_range_c: (-10.0, 60.0),
            humidity_range_pct: (0.0, 99.0),
        }
    }
}

impl SensorNoiseModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.rmse_ug_m3 > 0.0) {
            return Err("rmse must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.consistency_bound) {
            return Err("consistency bound must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Whether the device is inside its rated operating envelope.
    pub fn within_envelope(&self, temp_c: f64, humidity_pct: f64) -> bool {
        (self.temp_range_c.0..=self.temp_range_c.1).contains(&temp_c)
            && (self.humidity_range_pct.0..=self.humidity_range_pct.1).contains(&humidity_pct)
    }
}

/// One noisy integer reading of `true_value`: Gaussian error clamped to the
/// consistency window and floored at zero.
pub fn emulate_sensor(true_value: f64, model: &SensorNoiseModel, rng: &mut impl rand::Rng) -> i64 {
    let true_value = true_value.max(0.0);
    let noise = Normal::new(0.0, model.rmse_ug_m3).expect("rmse validated positive");
    let raw = (true_value + noise.sample(rng)).round();
    let lo = (true_value * (1.0 - model.consistency_bound)).ceil();
    let hi = (true_value * (1.0 + model.consistency_bound)).floor();
    let clamped = if lo <= hi { raw.clamp(lo, hi) } else { true_value.round() };
    clamped.max(0.0) as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawReading {
    pub pm1_0: i64,
    pub pm2_5: i64,
    pub pm10_0: i64,
}

/// The device's print layout.
pub fn format_serial(r: &RawReading) -> String {
    format!("PM1: {}\r\nPM2.5: {}\r\nPM10: {}\r\n", r.pm1_0, r.pm2_5, r.pm10_0)
}

/// Incremental parser for CRLF-delimited `PM1` / `PM2.5` / `PM10` triples.
#[derive(Debug, Default, Clone)]
pub struct SerialParser {
    carry: Vec<u8>,
    pm1: Option<i64>,
    pm25: Option<i64>,
    pub diagnostics: Vec<String>,
}

impl SerialParser {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bytes held back waiting for a line terminator.
    pub fn carry(&self) -> &[u8] {
        &self.carry
    }

    pub fn feed(&mut self, chunk: &[u8]) -> Vec<RawReading> {
        self.carry.extend_from_slice(chunk);
        let mut out = Vec::new();
        let mut start = 0;
        while let Some(pos) = self.carry[start..].windows(2).position(|w| w == b"\r\n") {
            let line = String::from_utf8_lossy(&self.carry[start..start + pos]).into_owned();
            start += pos + 2;
            if let Some(r) = self.line(&line) {
                out.push(r);
            }
        }
        self.carry.drain(..start);
        out
    }

    fn line(&mut self, line: &str) -> Option<RawReading> {
        let parsed = line.split_once(": ").and_then(|(label, v)| v.parse::<i64>().ok().map(|v| (label, v)));
        match parsed {
            Some(("PM1", v)) => {
                if self.pm1.is_some() {
                    self.diagnostics.push("PM1 without completing the previous triple".into());
                }
                self.pm1 = Some(v);
                self.pm25 = None;
            }
            Some(("PM2.5", v)) if self.pm1.is_some() && self.pm25.is_none() => self.pm25 = Some(v),
            Some(("PM10", v)) if self.pm25.is_some() => {
                let r = RawReading { pm1_0: self.pm1.take()?, pm2_5: self.pm25.take()?, pm10_0: v };
                return Some(r);
            }
            Some((label, _)) => {
                self.diagnostics.push(format!("{label} out of sequence"));
                self.pm1 = None;
                self.pm25 = None;
            }
            None => self.diagnostics.push(format!("unrecognised line {line:?}")),
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchTriggerConfig {
    pub count_threshold: usize,
    pub age_threshold_s: i64,
}

impl Default for BatchTriggerConfig {
    fn default() -> Self {
        Self { count_threshold: 10, age_threshold_s: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    Flush,
    Hold,
}

#[derive(Debug, Clone, Default)]
pub struct ReadingBuffer {
    readings: Vec<AirReading>,
    oldest_at: Option<i64>,
}

impl ReadingBuffer {
    pub fn push(&mut self, reading: AirReading, now: i64) {
        self.oldest_at.get_or_insert(now);
        self.readings.push(reading);
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }

    pub fn take(&mut self) -> Vec<AirReading> {
        self.oldest_at = None;
        std::mem::take(&mut self.readings)
    }
}

pub fn batch_trigger(buffer: &ReadingBuffer, config: &BatchTriggerConfig, now: i64) -> Trigger {
    match buffer.oldest_at {
        Some(oldest) if buffer.len() >= config.count_threshold || now - oldest >= config.age_threshold_s => Trigger::Flush,
        _ => Trigger::Hold,
    }
}

/// One transaction per reading, all in one batch.
pub fn readings_batch(readings: &[AirReading], key: &KeyPair) -> Result<Batch, LedgerError> {
    let family = airquality::family_spec();
    // nonce from the payload digest keeps batches reproducible; distinct
    // readings still get distinct nonces
    let txns = readings
        .iter()
        .map(|r| {
            let payload = airquality::encode_reading(r);
            let nonce = sha512_digest(&payload)[..32].to_string();
            build_transaction_with_nonce(&payload, &family, key, nonce)
        })
        .collect::<Result<Vec<_>, _>>()?;
    build_batch(txns, key)
}

/// HTTP status and body of a POST /batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

pub trait SubmitEndpoint {
    fn post_batches(&self, body: &[u8], api_key: &str) -> Result<EndpointResponse, String>;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SubmitError {
    #[error("transport failed after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: String },
    #[error("rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("could not build batch: {0}")]
    Build(String),
    #[error("unreadable response: {0}")]
    Response(String),
}

pub const SUBMIT_ATTEMPTS: u32 = 3;

/// Builds and posts one batch, retrying transport failures with doubling
/// delays. Acceptance is not commitment; poll the chain for the batch id.
pub fn submit(
    readings: &[AirReading],
    key: &KeyPair,
    api_key: &str,
    endpoint: &dyn SubmitEndpoint,
    backoff: Duration,
) -> Result<SubmitReceipt, SubmitError> {
    let batch = readings_batch(readings, key).map_err(|e| SubmitError::Build(e.to_string()))?;
    submit_batch(batch, api_key, endpoint, backoff)
}

pub fn submit_batch(batch: Batch, api_key: &str, endpoint: &dyn SubmitEndpoint, backoff: Duration) -> Result<SubmitReceipt, SubmitError> {
    let body = codec::to_canonical(&BatchList { batches: vec![batch] }).map_err(|e| SubmitError::Build(e.to_string()))?;
    let mut delay = backoff;
    let mut last = String::new();
    for attempt in 1..=SUBMIT_ATTEMPTS {
        match endpoint.post_batches(&body, api_key) {
            Ok(resp) if resp.status == 202 => {
                let receipts: Vec<SubmitReceipt> =
                    codec::from_canonical(&resp.body).map_err(|e| SubmitError::Response(e.to_string()))?;
                return receipts.into_iter().next().ok_or_else(|| SubmitError::Response("no receipt".into()));
            }
            Ok(resp) => {
                return Err(SubmitError::Rejected {
                    status: resp.status,
                    body: String::from_utf8_lossy(&resp.body).into_owned(),
                })
            }
            Err(e) => last = e,
        }
        if attempt < SUBMIT_ATTEMPTS && !delay.is_zero() {
            std::thread::sleep(delay);
            delay *= 2;
        }
    }
    Err(SubmitError::Transport { attempts: SUBMIT_ATTEMPTS, last })
}

/// An emulated device as described in a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub key_seed: u64,
    pub lat_udeg: i64,
    pub lon_udeg: i64,
    #[serde(default = "default_source")]
    pub source_flag: SourceFlag,
    /// Mean PM2.5 in µg/m³; PM1.0 and PM10 follow at fixed ratios.
    pub base_pm2_5: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_period")]
    pub period_s: f64,
    #[serde(default = "default_temp")]
    pub temp_c: f64,
    #[serde(default = "default_humidity")]
    pub humidity_pct: f64,
    #[serde(default)]
    pub noise: Option<SensorNoiseModel>,
    #[serde(default)]
    pub trigger: Option<BatchTriggerConfig>,
}

fn default_source() -> SourceFlag {
    SourceFlag::Citizen
}
fn default_period() -> f64 {
    3600.0
}
fn default_temp() -> f64 {
    20.0
}
fn default_humidity() -> f64 {
    50.0
}

/// Device pipeline: truth → noisy sensor → serial text → parser →
/// calibration → buffer → batch.
pub struct Device {
    pub spec: DeviceSpec,
    pub key: KeyPair,
    model: SensorNoiseModel,
    trigger: BatchTriggerConfig,
    calibration: CalibrationModel,
    rng: ChaCha8Rng,
    parser: SerialParser,
    buffer: ReadingBuffer,
    pub invalid_readings: u64,
    pub produced: u64,
}

impl Device {
    pub fn new(spec: DeviceSpec, calibration: CalibrationModel) -> Self {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&spec.key_seed.to_be_bytes());
        seed[31] = 1;
        let key = KeyPair::from_seed(&seed).expect("nonzero seed");
        Self::with_key(spec, calibration, key)
    }

    /// A device that signs with `key` instead of one derived from its seed.
    pub fn with_key(spec: DeviceSpec, calibration: CalibrationModel, key: KeyPair) -> Self {
        let model = spec.noise.unwrap_or_default();
        let trigger = spec.trigger.unwrap_or_default();
        let rng = ChaCha8Rng::seed_from_u64(spec.key_seed);
        Self {
            spec,
            key,
            model,
            trigger,
            calibration,
            rng,
            parser: SerialParser::new(),
            buffer: ReadingBuffer::default(),
            invalid_readings: 0,
            produced: 0,
        }
    }

    pub fn true_pm2_5(&self, t_s: i64) -> f64 {
        let phase = 2.0 * PI * t_s as f64 / self.spec.period_s;
        (self.spec.base_pm2_5 + self.spec.amplitude * phase.sin()).max(0.0)
    }

    /// Serial text the device prints at time `t_s`.
    pub fn sample_serial(&mut self, t_s: i64) -> String {
        let pm25 = self.true_pm2_5(t_s);
        let raw = RawReading {
            pm1_0: emulate_sensor(pm25 * 0.6, &self.model, &mut self.rng),
            pm2_5: emulate_sensor(pm25, &self.model, &mut self.rng),
            pm10_0: emulate_sensor(pm25 * 1.3, &self.model, &mut self.rng),
        };
        format_serial(&raw)
    }

    /// Takes one sample at `t_s`; returns a batch when the trigger fires.
    pub fn tick(&mut self, t_s: i64) -> Option<Batch> {
        let text = self.sample_serial(t_s);
        let in_envelope = self.model.within_envelope(self.spec.temp_c, self.spec.humidity_pct);
        for raw in self.parser.feed(text.as_bytes()) {
            if !in_envelope {
                self.invalid_readings += 1;
                continue;
            }
            let reading = AirReading {
                pm1_0: calibrate(raw.pm1_0, &self.calibration),
                pm2_5: calibrate(raw.pm2_5, &self.calibration),
                pm10_0: calibrate(raw.pm10_0, &self.calibration),
                lat_udeg: self.spec.lat_udeg,
                lon_udeg: self.spec.lon_udeg,
                timestamp_s: t_s,
                source_flag: self.spec.source_flag,
                reporter_public_key: self.key.public_key_hex().to_string(),
            };
            self.buffer.push(reading, t_s);
            self.produced += 1;
        }
        self.flush_if_due(t_s)
    }

    pub fn flush_if_due(&mut self, now: i64) -> Option<Batch> {
        if batch_trigger(&self.buffer, &self.trigger, now) == Trigger::Hold {
            return None;
        }
        let readings = self.buffer.take();
        readings_batch(&readings, &self.key).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::api::SubmitStatus;
    use proptest::prelude::*;
    use std::cell::Cell;

    #[test]
    fn parses_one_triple() {
        let mut p = SerialParser::new();
        assert_eq!(p.feed(b"PM1: 12\r\nPM2.5: 35\r\nPM10: 40\r\n"), vec![RawReading { pm1_0: 12, pm2_5: 35, pm10_0: 40 }]);
        assert!(p.carry().is_empty());
    }

    #[test]
    fn skips_garbage() {
        let mut p = SerialParser::new();
        assert!(p.feed(b"PM1: twelve\r\n").is_empty());
        assert_eq!(p.diagnostics.len(), 1);
        assert!(p.feed(b"PM2.5: 3\r\nPM10: 4\r\n").is_empty());
        assert_eq!(p.feed(b"PM1: 1\r\nPM2.5: 2\r\nPM10: 3\r\n").len(), 1);
    }

    proptest! {
        #[test]
        fn chunking_does_not_change_output(
            values in proptest::collection::vec((0i64..1000, 0i64..1000, 0i64..1000), 1..8),
            noise in proptest::collection::vec(0usize..3, 0..4),
            cuts in proptest::collection::vec(0usize..400, 0..12),
        ) {
            let mut text = String::new();
            for (i, (a, b, c)) in values.iter().enumerate() {
                if noise.contains(&(i % 3)) {
                    text.push_str("garbage line\r\n");
                }
                text.push_str(&format_serial(&RawReading { pm1_0: *a, pm2_5: *b, pm10_0: *c }));
            }
            let bytes = text.as_bytes();
            let whole = SerialParser::new().feed(bytes);
            let mut cuts: Vec<usize> = cuts.into_iter().map(|c| c % (bytes.len() + 1)).collect();
            cuts.sort();
            let mut p = SerialParser::new();
            let mut pieces = Vec::new();
            let mut start = 0;
            for c in cuts.into_iter().chain([bytes.len()]) {
                pieces.extend(p.feed(&bytes[start..c]));
                start = c;
            }
            prop_assert_eq!(pieces, whole);
        }

        #[test]
        fn emulator_stays_in_window(t in 0u32..2000, seed: u64) {
            let model = SensorNoiseModel::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = t as f64;
            let v = emulate_sensor(t, &model, &mut rng) as f64;
            prop_assert!(v >= (t * 0.9).ceil() && v <= (t * 1.1).floor());
        }
    }

    #[test]
    fn emulator_edges_and_determinism() {
        let model = SensorNoiseModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(emulate_sensor(0.0, &model, &mut rng), 0);
        let a: Vec<i64> = {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            (0..5).map(|_| emulate_sensor(100.0, &model, &mut r)).collect()
        };
        let b: Vec<i64> = {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            (0..5).map(|_| emulate_sensor(100.0, &model, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn trigger_rules() {
        let cfg = BatchTriggerConfig::default();
        let key = KeyPair::from_seed(&[1; 32]).unwrap();
        let r = AirReading {
            pm1_0: 1,
            pm2_5: 1,
            pm10_0: 1,
            lat_udeg: 0,
            lon_udeg: 0,
            timestamp_s: 0,
            source_flag: SourceFlag::Citizen,
            reporter_public_key: key.public_key_hex().to_string(),
        };
        let mut buf = ReadingBuffer::default();
        assert_eq!(batch_trigger(&buf, &cfg, 1_000), Trigger::Hold);
        for _ in 0..5 {
            buf.push(r.clone(), 0);
        }
        assert_eq!(batch_trigger(&buf, &cfg, 10), Trigger::Hold);
        assert_eq!(batch_trigger(&buf, &cfg, 61), Trigger::Flush);
        for _ in 0..5 {
            buf.push(r.clone(), 5);
        }
        assert_eq!(batch_trigger(&buf, &cfg, 5), Trigger::Flush);
        assert_eq!(buf.take().len(), 10);
        assert_eq!(batch_trigger(&buf, &cfg, 500), Trigger::Hold);
    }

    struct Flaky {
        failures: Cell<u32>,
        calls: Cell<u32>,
    }

    impl SubmitEndpoint for Flaky {
        fn post_batches(&self, body: &[u8], _: &str) -> Result<EndpointResponse, String> {
            self.calls.set(self.calls.get() + 1);
            if self.failures.get() > 0 {
                self.failures.set(self.failures.get() - 1);
                return Err("connection refused".into());
            }
            let list: BatchList = codec::from_canonical(body).unwrap();
            let receipt = SubmitReceipt {
                batch_id: list.batches[0].id().to_string(),
                status: SubmitStatus::Accepted,
                violations: None,
            };
            Ok(EndpointResponse { status: 202, body: codec::to_canonical(&vec![receipt]).unwrap() })
        }
    }

    #[test]
    fn submit_retries_transport_failures() {
        let mut dev = Device::new(
            DeviceSpec {
                key_seed: 3,
                lat_udeg: 1,
                lon_udeg: 2,
                source_flag: SourceFlag::Citizen,
                base_pm2_5: 30.0,
                amplitude: 0.0,
                period_s: 3600.0,
                temp_c: 20.0,
                humidity_pct: 40.0,
                noise: None,
                trigger: Some(BatchTriggerConfig { count_threshold: 1, age_threshold_s: 60 }),
            },
            CalibrationModel::identity(),
        );
        let batch = dev.tick(100).unwrap();
        let id = batch.id().to_string();
        let up_later = Flaky { failures: Cell::new(2), calls: Cell::new(0) };
        let receipt = submit_batch(batch.clone(), "k", &up_later, Duration::ZERO).unwrap();
        assert_eq!(receipt.batch_id, id);
        assert_eq!(up_later.calls.get(), 3);
        let down = Flaky { failures: Cell::new(5), calls: Cell::new(0) };
        assert!(matches!(submit_batch(batch, "k", &down, Duration::ZERO), Err(SubmitError::Transport { attempts: 3, .. })));
    }

    #[test]
    fn out_of_envelope_readings_are_withheld() {
        let spec = DeviceSpec {
            key_seed: 4,
            lat_udeg: 0,
            lon_udeg: 0,
            source_flag: SourceFlag::Government,
            base_pm2_5: 10.0,
            amplitude: 0.0,
            period_s: 3600.0,
            temp_c: 75.0,
            humidity_pct: 40.0,
            noise: None,
            trigger: None,
        };
        let mut dev = Device::new(spec, CalibrationModel::identity());
        for t in 0..20 {
            assert!(dev.tick(t * 10).is_none());
        }
        assert_eq!(dev.invalid_readings, 20);
    }
}
