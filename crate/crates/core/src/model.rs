//! Domain types shared by every stage: the receiver array, time-gridded RSSI
//! frames, car states, zone labels and the scenario configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelParams;
use crate::error::{Error, Result};
use crate::pf::FilterConfig;
use crate::synth::{NoiseSpec, TrajectoryProfile};

pub type SensorId = u32;

/// Sampling interval of the beacon protocol in seconds.
pub const DEFAULT_TICK_INTERVAL_S: f64 = 0.1;
pub const DEFAULT_REF_POWER_DBM: f64 = -40.0;
pub const DEFAULT_FLOOR_DBM: f64 = -95.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub id: SensorId,
    /// Receiver position in meters.
    pub position: [f64; 3],
    /// Expected power at 1 m with no pattern loss (transmit power minus the 1 m pathloss).
    #[serde(default = "default_ref_power")]
    pub ref_power_dbm: f64,
    /// Level below which the receiver only reports its own noise floor.
    #[serde(default = "default_floor")]
    pub floor_dbm: f64,
}

fn default_ref_power() -> f64 {
    DEFAULT_REF_POWER_DBM
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR_DBM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SensorArray {
    sensors: Vec<Sensor>,
}

impl SensorArray {
    pub fn new(sensors: Vec<Sensor>) -> Result<Self> {
        let array = SensorArray { sensors };
        array.validate()?;
        Ok(array)
    }

    fn validate(&self) -> Result<()> {
        if self.sensors.is_empty() {
            return Err(Error::schema("sensors", "at least one sensor is required"));
        }
        let mut seen = BTreeSet::new();
        for s in &self.sensors {
            if !seen.insert(s.id) {
                return Err(Error::schema("sensors", format!("duplicate sensor id {}", s.id)));
            }
            if s.position.iter().any(|c| !c.is_finite())
                || !s.ref_power_dbm.is_finite()
                || !s.floor_dbm.is_finite()
            {
                return Err(Error::schema(
                    format!("sensors[{}]", s.id),
                    "non-finite position or power",
                ));
            }
            if s.floor_dbm >= s.ref_power_dbm {
                return Err(Error::schema(
                    format!("sensors[{}].floor_dbm", s.id),
                    format!(
                        "floor_dbm ({}) must be < ref_power_dbm ({})",
                        s.floor_dbm, s.ref_power_dbm
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn sensors(&self) -> &[Sensor] {
        &self.sensors
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn get(&self, id: SensorId) -> Option<&Sensor> {
        self.sensors.iter().find(|s| s.id == id)
    }

    pub fn contains(&self, id: SensorId) -> bool {
        self.get(id).is_some()
    }

    pub fn ids(&self) -> impl Iterator<Item = SensorId> + '_ {
        self.sensors.iter().map(|s| s.id)
    }
}

/// One tick of readings. A sensor may be missing from the map or mapped to
/// `None`; both mean it did not report on this tick.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Frame {
    pub tick: u64,
    pub readings: BTreeMap<SensorId, Option<f64>>,
}

impl Frame {
    pub fn new(tick: u64) -> Self {
        Frame {
            tick,
            readings: BTreeMap::new(),
        }
    }

    pub fn reading(&self, id: SensorId) -> Option<f64> {
        self.readings.get(&id).copied().flatten()
    }

    /// Sensors that actually delivered a value, in id order.
    pub fn observed(&self) -> impl Iterator<Item = (SensorId, f64)> + '_ {
        self.readings
            .iter()
            .filter_map(|(&id, r)| r.map(|v| (id, v)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSeries {
    pub tick_interval_s: f64,
    pub frames: Vec<Frame>,
}

impl MeasurementSeries {
    pub fn new(tick_interval_s: f64, frames: Vec<Frame>, array: &SensorArray) -> Result<Self> {
        let series = MeasurementSeries {
            tick_interval_s,
            frames,
        };
        series.validate(array)?;
        Ok(series)
    }

    pub fn validate(&self, array: &SensorArray) -> Result<()> {
        if !(self.tick_interval_s > 0.0) {
            return Err(Error::Invariant("tick interval must be positive".into()));
        }
        for pair in self.frames.windows(2) {
            if pair[1].tick <= pair[0].tick {
                return Err(Error::Invariant(format!(
                    "ticks not strictly increasing: {} after {}",
                    pair[1].tick, pair[0].tick
                )));
            }
        }
        for frame in &self.frames {
            for &id in frame.readings.keys() {
                if !array.contains(id) {
                    return Err(Error::UnknownSensor(id));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Position (m) and velocity (m per tick) along the track axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CarState {
    pub p_x: f64,
    pub v_x: f64,
}

impl CarState {
    pub fn new(p_x: f64, v_x: f64) -> Self {
        CarState { p_x, v_x }
    }

    pub fn is_finite(&self) -> bool {
        self.p_x.is_finite() && self.v_x.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum ZoneLabel {
    Outside = 0,
    Transition = 1,
    Inside = 2,
}

impl ZoneLabel {
    pub const ALL: [ZoneLabel; 3] = [ZoneLabel::Outside, ZoneLabel::Transition, ZoneLabel::Inside];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(ZoneLabel::Outside),
            1 => Some(ZoneLabel::Transition),
            2 => Some(ZoneLabel::Inside),
            _ => None,
        }
    }
}

impl From<ZoneLabel> for u8 {
    fn from(l: ZoneLabel) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for ZoneLabel {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        ZoneLabel::from_index(v as usize).ok_or_else(|| format!("invalid zone label {v}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneThresholds {
    /// Positions at or below this are fully inside.
    pub inside_max_x: f64,
    /// Positions at or above this are outside.
    pub outside_min_x: f64,
}

impl ZoneThresholds {
    pub fn new(inside_max_x: f64, outside_min_x: f64) -> Result<Self> {
        let t = ZoneThresholds {
            inside_max_x,
            outside_min_x,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.inside_max_x.is_finite() || !self.outside_min_x.is_finite() {
            return Err(Error::schema("zone", "thresholds must be finite"));
        }
        if self.inside_max_x >= self.outside_min_x {
            return Err(Error::schema("zone", "inside_max_x must be < outside_min_x"));
        }
        Ok(())
    }

    pub fn label(&self, p_x: f64) -> ZoneLabel {
        if p_x <= self.inside_max_x {
            ZoneLabel::Inside
        } else if p_x >= self.outside_min_x {
            ZoneLabel::Outside
        } else {
            ZoneLabel::Transition
        }
    }
}

pub fn derive_labels(positions: &[f64], thresholds: &ZoneThresholds) -> Vec<ZoneLabel> {
    positions.iter().map(|&p| thresholds.label(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthSample {
    pub tick: u64,
    pub state: CarState,
    pub label: ZoneLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTrack {
    pub tick_interval_s: f64,
    pub samples: Vec<TruthSample>,
}

impl GroundTruthTrack {
    pub fn from_states(
        tick_interval_s: f64,
        ticks: &[u64],
        states: &[CarState],
        thresholds: &ZoneThresholds,
    ) -> Self {
        let samples = ticks
            .iter()
            .zip(states)
            .map(|(&tick, &state)| TruthSample {
                tick,
                state,
                label: thresholds.label(state.p_x),
            })
            .collect();
        GroundTruthTrack {
            tick_interval_s,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<ZoneLabel> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn positions(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.state.p_x).collect()
    }

    /// Checks that the track lives on the same tick grid as `series`.
    pub fn check_aligned(&self, series: &MeasurementSeries) -> Result<()> {
        if self.samples.len() != series.frames.len() {
            return Err(Error::LengthMismatch(self.samples.len(), series.frames.len()));
        }
        for (s, f) in self.samples.iter().zip(&series.frames) {
            if s.tick != f.tick {
                return Err(Error::Invariant(format!(
                    "ground truth tick {} does not match measurement tick {}",
                    s.tick, f.tick
                )));
            }
        }
        Ok(())
    }
}

/// Lateral offset of the transmitter from the track axis; the car only moves in x.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmitterMount {
    #[serde(default)]
    pub y: f64,
    #[serde(default)]
    pub z: f64,
}

impl TransmitterMount {
    pub fn position(&self, p_x: f64) -> [f64; 3] {
        [p_x, self.y, self.z]
    }
}

/// Fully validated configuration for one measurement setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub sensors: SensorArray,
    pub zone: ZoneThresholds,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub channel: ChannelParams,
    #[serde(default)]
    pub transmitter: TransmitterMount,
    #[serde(default = "default_tick")]
    pub tick_interval_s: f64,
    #[serde(default)]
    pub trajectory: TrajectoryProfile,
    #[serde(default)]
    pub noise: NoiseSpec,
}

fn default_tick() -> f64 {
    DEFAULT_TICK_INTERVAL_S
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.sensors.validate()?;
        self.zone.validate()?;
        self.filter.validate()?;
        self.channel.validate()?;
        if !(self.tick_interval_s > 0.0 && self.tick_interval_s.is_finite()) {
            return Err(Error::schema("tick_interval_s", "must be positive"));
        }
        if !self.transmitter.y.is_finite() || !self.transmitter.z.is_finite() {
            return Err(Error::schema("transmitter", "offsets must be finite"));
        }
        self.trajectory.validate(&self.zone)?;
        self.noise.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scenario: Scenario =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("scenario: {e}")))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical (defaults filled) JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("scenario serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Scenario::from_json(&text)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn csv_err(e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::MalformedRow {
        row,
        reason: e.to_string(),
    }
}

fn parse_field<T: std::str::FromStr>(field: &str, name: &str, row: usize) -> Result<T> {
    field.trim().parse().map_err(|_| Error::MalformedRow {
        row,
        reason: format!("cannot parse {name} from {field:?}"),
    })
}

fn expect_header(rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(csv_err)?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::MalformedRow {
            row: 1,
            reason: format!("expected header {}, got {}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

/// Reads `tick,sensor_id,rssi_dbm` rows; an empty rssi field is a missing reading.
/// Rows must arrive grouped by tick in increasing order.
pub fn read_measurements(
    reader: impl Read,
    array: &SensorArray,
    tick_interval_s: f64,
) -> Result<MeasurementSeries> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    expect_header(&mut rdr, &["tick", "sensor_id", "rssi_dbm"])?;
    let mut frames: Vec<Frame> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let tick: u64 = parse_field(&record[0], "tick", row)?;
        let id: SensorId = parse_field(&record[1], "sensor_id", row)?;
        let raw = record[2].trim();
        let rssi = if raw.is_empty() {
            None
        } else {
            let v: f64 = parse_field(raw, "rssi_dbm", row)?;
            if !v.is_finite() {
                return Err(Error::MalformedRow {
                    row,
                    reason: "non-finite rssi".into(),
                });
            }
            Some(v)
        };
        if !array.contains(id) {
            return Err(Error::UnknownSensor(id));
        }
        match frames.last_mut() {
            Some(frame) if frame.tick == tick => {
                if frame.readings.insert(id, rssi).is_some() {
                    return Err(Error::MalformedRow {
                        row,
                        reason: format!("duplicate reading for sensor {id} at tick {tick}"),
                    });
                }
            }
            Some(frame) if frame.tick > tick => {
                return Err(Error::MalformedRow {
                    row,
                    reason: format!("tick {tick} after tick {} is not monotone", frame.tick),
                });
            }
            _ => {
                let mut frame = Frame::new(tick);
                frame.readings.insert(id, rssi);
                frames.push(frame);
            }
        }
    }
    MeasurementSeries::new(tick_interval_s, frames, array)
}

pub fn load_measurements(path: impl AsRef<Path>, array: &SensorArray) -> Result<MeasurementSeries> {
    let path = path.as_ref();
    read_measurements(open(path)?, array, DEFAULT_TICK_INTERVAL_S)
}

pub fn write_measurements(series: &MeasurementSeries, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["tick", "sensor_id", "rssi_dbm"]).map_err(csv_err)?;
    for frame in &series.frames {
        for (id, rssi) in &frame.readings {
            let value = rssi.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([frame.tick.to_string(), id.to_string(), value])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

pub fn save_measurements(series: &MeasurementSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_measurements(series, create(path)?)
}

pub fn read_ground_truth(
    reader: impl Read,
    thresholds: &ZoneThresholds,
    tick_interval_s: f64,
) -> Result<GroundTruthTrack> {
    let mut rdr = csv::Reader::from_reader(reader);
    expect_header(&mut rdr, &["tick", "p_x", "v_x"])?;
    let mut ticks = Vec::new();
    let mut states = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let tick: u64 = parse_field(&record[0], "tick", row)?;
        let state = CarState::new(
            parse_field(&record[1], "p_x", row)?,
            parse_field(&record[2], "v_x", row)?,
        );
        if !state.is_finite() {
            return Err(Error::MalformedRow {
                row,
                reason: "non-finite state".into(),
            });
        }
        if ticks.last().is_some_and(|&last| tick <= last) {
            return Err(Error::MalformedRow {
                row,
                reason: format!("tick {tick} is not strictly increasing"),
            });
        }
        ticks.push(tick);
        states.push(state);
    }
    Ok(GroundTruthTrack::from_states(
        tick_interval_s,
        &ticks,
        &states,
        thresholds,
    ))
}

pub fn load_ground_truth(
    path: impl AsRef<Path>,
    thresholds: &ZoneThresholds,
) -> Result<GroundTruthTrack> {
    let path = path.as_ref();
    read_ground_truth(open(path)?, thresholds, DEFAULT_TICK_INTERVAL_S)
}

pub fn write_ground_truth(track: &GroundTruthTrack, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["tick", "p_x", "v_x"]).map_err(csv_err)?;
    for s in &track.samples {
        w.write_record([
            s.tick.to_string(),
            s.state.p_x.to_string(),
            s.state.v_x.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

pub fn save_ground_truth(track: &GroundTruthTrack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_ground_truth(track, create(path)?)
}
