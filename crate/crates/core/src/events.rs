//! Event records, the line-based CSV formats and a seeded synthetic sensor
//! stream generator.

use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type SensorId = u32;
pub type MachineId = u32;
pub type Timestamp = u64;

/// Header line of a detection output file.
pub const DETECTION_HEADER: &str = "timestamp,sensor_id,probability,anomaly";

/// One measurement `(machine, value, sensor, time)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorEvent {
    pub timestamp: Timestamp,
    pub machine_id: MachineId,
    pub sensor_id: SensorId,
    pub value: f64,
}

impl SensorEvent {
    pub fn new(
        timestamp: Timestamp,
        machine_id: MachineId,
        sensor_id: SensorId,
        value: f64,
    ) -> Result<Self, EventError> {
        if !value.is_finite() {
            return Err(EventError::NonFinite);
        }
        Ok(Self {
            timestamp,
            machine_id,
            sensor_id,
            value,
        })
    }
}

impl fmt::Display for SensorEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{}",
            self.timestamp, self.machine_id, self.sensor_id, self.value
        )
    }
}

/// Predictor output for one input event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionEvent {
    pub sensor_id: SensorId,
    pub timestamp: Timestamp,
    /// Probability of the newest length-N transition sequence; `None` while
    /// fewer than N transitions exist.
    pub probability: Option<f64>,
    pub anomaly: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum EventError {
    #[error("non-finite value")]
    NonFinite,
    #[error("line {line}: expected {expected} fields, found {found}")]
    FieldCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: field `{field}`: {reason}")]
    Field {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("generator config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for EventError {
    fn from(e: std::io::Error) -> Self {
        EventError::Io(e.to_string())
    }
}

const EVENT_FIELDS: [&str; 4] = ["timestamp", "machine_id", "sensor_id", "value"];
const DETECTION_FIELDS: [&str; 4] = ["timestamp", "sensor_id", "probability", "anomaly"];

fn split_fields(line: &str, line_no: usize, expected: usize) -> Result<Vec<&str>, EventError> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != expected {
        return Err(EventError::FieldCount {
            line: line_no,
            expected,
            found: fields.len(),
        });
    }
    Ok(fields)
}

fn parse_field<T: std::str::FromStr>(
    raw: &str,
    line: usize,
    field: &'static str,
) -> Result<T, EventError>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>().map_err(|e| EventError::Field {
        line,
        field,
        reason: e.to_string(),
    })
}

fn parse_finite(raw: &str, line: usize, field: &'static str) -> Result<f64, EventError> {
    let v: f64 = parse_field(raw, line, field)?;
    if !v.is_finite() {
        return Err(EventError::Field {
            line,
            field,
            reason: EventError::NonFinite.to_string(),
        });
    }
    Ok(v)
}

/// Parses a `timestamp,machine_id,sensor_id,value` record.
pub fn parse_event(line: &str) -> Result<SensorEvent, EventError> {
    parse_event_at(line, 1)
}

/// Like [`parse_event`], reporting errors against `line_no`.
pub fn parse_event_at(line: &str, line_no: usize) -> Result<SensorEvent, EventError> {
    let f = split_fields(line, line_no, EVENT_FIELDS.len())?;
    Ok(SensorEvent {
        timestamp: parse_field(f[0], line_no, EVENT_FIELDS[0])?,
        machine_id: parse_field(f[1], line_no, EVENT_FIELDS[1])?,
        sensor_id: parse_field(f[2], line_no, EVENT_FIELDS[2])?,
        value: parse_finite(f[3], line_no, EVENT_FIELDS[3])?,
    })
}

/// Reads an event file: one record per line, blank lines and `#` comments
/// skipped.
pub fn read_events(reader: impl BufRead) -> Result<Vec<SensorEvent>, EventError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(parse_event_at(trimmed, i + 1)?);
    }
    Ok(out)
}

pub fn write_events(mut w: impl Write, events: &[SensorEvent]) -> std::io::Result<()> {
    for e in events {
        writeln!(w, "{e}")?;
    }
    Ok(())
}

/// Renders `timestamp,sensor_id,probability,anomaly`. `f64`'s `Display` is
/// the shortest string that parses back to the same value.
pub fn serialize_detection(d: &DetectionEvent) -> String {
    let prob = match d.probability {
        Some(p) => p.to_string(),
        None => "NA".to_string(),
    };
    format!(
        "{},{},{},{}",
        d.timestamp,
        d.sensor_id,
        prob,
        u8::from(d.anomaly)
    )
}

pub fn parse_detection(line: &str) -> Result<DetectionEvent, EventError> {
    parse_detection_at(line, 1)
}

pub fn parse_detection_at(line: &str, line_no: usize) -> Result<DetectionEvent, EventError> {
    let f = split_fields(line, line_no, DETECTION_FIELDS.len())?;
    let probability = match f[2] {
        "NA" => None,
        raw => {
            let p = parse_finite(raw, line_no, DETECTION_FIELDS[2])?;
            if !(0.0..=1.0).contains(&p) {
                return Err(EventError::Field {
                    line: line_no,
                    field: DETECTION_FIELDS[2],
                    reason: format!("{p} outside [0, 1]"),
                });
            }
            Some(p)
        }
    };
    let anomaly = match f[3] {
        "0" => false,
        "1" => true,
        other => {
            return Err(EventError::Field {
                line: line_no,
                field: DETECTION_FIELDS[3],
                reason: format!("expected 0 or 1, found `{other}`"),
            })
        }
    };
    Ok(DetectionEvent {
        timestamp: parse_field(f[0], line_no, DETECTION_FIELDS[0])?,
        sensor_id: parse_field(f[1], line_no, DETECTION_FIELDS[1])?,
        probability,
        anomaly,
    })
}

/// Writes the header followed by one line per detection.
pub fn write_detections(mut w: impl Write, detections: &[DetectionEvent]) -> std::io::Result<()> {
    writeln!(w, "{DETECTION_HEADER}")?;
    for d in detections {
        writeln!(w, "{}", serialize_detection(d))?;
    }
    Ok(())
}

/// Configuration of the synthetic sensor stream.
///
/// Every sensor walks through `regime_values` cyclically, holding each level
/// for `dwell` consecutive events; sensor `s` starts at level `s mod len`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub sensor_count: u32,
    pub events_per_sensor: u64,
    pub seed: u64,
    pub regime_values: Vec<f64>,
    pub dwell: u64,
    /// Values are `level + U(-noise_amplitude, noise_amplitude)`.
    pub noise_amplitude: f64,
    /// `(sensor_id, ordinal)` pairs that emit an out-of-regime jump instead.
    pub anomaly_positions: Vec<(SensorId, u64)>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            sensor_count: 1,
            events_per_sensor: 1,
            seed: 0,
            regime_values: vec![10.0, 20.0, 30.0],
            dwell: 1,
            noise_amplitude: 1.0,
            anomaly_positions: Vec::new(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), EventError> {
        let bad = |msg: String| Err(EventError::Config(msg));
        if self.sensor_count == 0 {
            return bad("sensor_count must be positive".into());
        }
        if self.events_per_sensor == 0 {
            return bad("events_per_sensor must be positive".into());
        }
        if self.dwell == 0 {
            return bad("dwell must be positive".into());
        }
        if self.regime_values.is_empty() || self.regime_values.iter().any(|v| !v.is_finite()) {
            return bad("regime_values must be a nonempty list of finite values".into());
        }
        if !(self.noise_amplitude.is_finite() && self.noise_amplitude >= 0.0) {
            return bad("noise_amplitude must be finite and nonnegative".into());
        }
        for &(s, o) in &self.anomaly_positions {
            if s >= self.sensor_count {
                return bad(format!("anomaly references unknown sensor {s}"));
            }
            if o >= self.events_per_sensor {
                return bad(format!(
                    "anomaly ordinal {o} out of range for {} events per sensor",
                    self.events_per_sensor
                ));
            }
        }
        Ok(())
    }

    /// The value emitted at an anomaly position: above the highest regime by
    /// the regime span plus ten noise amplitudes plus one.
    pub fn jump_value(&self) -> f64 {
        let hi = self.regime_values.iter().copied().fold(f64::MIN, f64::max);
        let lo = self.regime_values.iter().copied().fold(f64::MAX, f64::min);
        hi + (hi - lo) + 10.0 * self.noise_amplitude + 1.0
    }

    pub fn len(&self) -> u64 {
        self.sensor_count as u64 * self.events_per_sensor
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Emits `sensor_count * events_per_sensor` events, round-robin over sensors,
/// with global timestamps `0, 1, 2, ...`.
pub fn generate_stream(cfg: &GeneratorConfig) -> Result<Vec<SensorEvent>, EventError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut anomalies = cfg.anomaly_positions.clone();
    anomalies.sort_unstable();
    let jump = cfg.jump_value();
    let levels = cfg.regime_values.len() as u64;
    let mut out = Vec::with_capacity(cfg.len() as usize);
    for ordinal in 0..cfg.events_per_sensor {
        for sensor in 0..cfg.sensor_count {
            // Draw even at anomaly positions so injected and control streams
            // agree everywhere else.
            let noise = if cfg.noise_amplitude > 0.0 {
                rng.random_range(-cfg.noise_amplitude..=cfg.noise_amplitude)
            } else {
                0.0
            };
            let level_idx = (ordinal / cfg.dwell + sensor as u64) % levels;
            let value = if anomalies.binary_search(&(sensor, ordinal)).is_ok() {
                jump
            } else {
                cfg.regime_values[level_idx as usize] + noise
            };
            out.push(SensorEvent {
                timestamp: ordinal * cfg.sensor_count as u64 + sensor as u64,
                machine_id: 0,
                sensor_id: sensor,
                value,
            });
        }
    }
    Ok(out)
}
