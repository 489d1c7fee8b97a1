//! Forward radio model: log-distance pathloss, the vehicle's effective antenna
//! pattern, and the floor-clamped Gaussian RSSI likelihood.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MeasurementSeries, Sensor, SensorArray};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternBand {
    pub angle_max_rad: f64,
    pub gain_db: f64,
}

/// Piecewise-constant gain over the aspect angle. Bands are half-open
/// `[previous max, angle_max)`; an angle of exactly pi falls in the last band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AntennaPattern {
    bands: Vec<PatternBand>,
}

impl Default for AntennaPattern {
    fn default() -> Self {
        AntennaPattern::directional()
    }
}

impl AntennaPattern {
    pub fn new(bands: Vec<PatternBand>) -> Result<Self> {
        let p = AntennaPattern { bands };
        p.validate()?;
        Ok(p)
    }

    /// Front-mounted transmitter: 0 dB ahead, -6 dB to the side, -10 dB behind.
    pub fn directional() -> Self {
        AntennaPattern {
            bands: vec![
                PatternBand {
                    angle_max_rad: PI / 3.0,
                    gain_db: 0.0,
                },
                PatternBand {
                    angle_max_rad: 3.0 * PI / 4.0,
                    gain_db: -6.0,
                },
                PatternBand {
                    angle_max_rad: PI,
                    gain_db: -10.0,
                },
            ],
        }
    }

    pub fn omnidirectional() -> Self {
        AntennaPattern {
            bands: vec![PatternBand {
                angle_max_rad: PI,
                gain_db: 0.0,
            }],
        }
    }

    pub fn bands(&self) -> &[PatternBand] {
        &self.bands
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.bands.last() else {
            return Err(Error::schema("channel.pattern", "at least one band is required"));
        };
        if last.angle_max_rad != PI {
            return Err(Error::schema("channel.pattern", "last band must end at pi"));
        }
        let mut prev = 0.0;
        for b in &self.bands {
            if !(b.angle_max_rad > prev) {
                return Err(Error::schema(
                    "channel.pattern",
                    "band angles must be strictly increasing and positive",
                ));
            }
            if !b.gain_db.is_finite() {
                return Err(Error::schema("channel.pattern", "gains must be finite"));
            }
            prev = b.angle_max_rad;
        }
        Ok(())
    }

    pub fn gain(&self, alpha: f64) -> Result<f64> {
        if !(0.0..=PI).contains(&alpha) {
            return Err(Error::AngleOutOfRange(alpha));
        }
        Ok(self.gain_unchecked(alpha))
    }

    #[inline]
    fn gain_unchecked(&self, alpha: f64) -> f64 {
        self.bands
            .iter()
            .find(|b| alpha < b.angle_max_rad)
            .unwrap_or_else(|| self.bands.last().expect("validated non-empty"))
            .gain_db
    }
}

pub fn pattern_gain(pattern: &AntennaPattern, alpha: f64) -> Result<f64> {
    pattern.gain(alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelParams {
    pub pathloss_exponent: f64,
    /// Variance of the RSSI likelihood in dB².
    pub likelihood_variance: f64,
    pub pattern: AntennaPattern,
    /// Percentile of observed RSSI used as the calibrated noise floor.
    pub floor_percentile: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            pathloss_exponent: 2.0,
            likelihood_variance: 9.0,
            pattern: AntennaPattern::directional(),
            floor_percentile: 5.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pathloss_exponent > 0.0 && self.pathloss_exponent.is_finite()) {
            return Err(Error::schema("channel.pathloss_exponent", "must be > 0"));
        }
        if !(self.likelihood_variance > 0.0 && self.likelihood_variance.is_finite()) {
            return Err(Error::schema("channel.likelihood_variance", "must be > 0"));
        }
        if !(0.0..=100.0).contains(&self.floor_percentile) {
            return Err(Error::schema("channel.floor_percentile", "must be in [0, 100]"));
        }
        self.pattern.validate()
    }

    pub fn with_pattern(mut self, pattern: AntennaPattern) -> Self {
        self.pattern = pattern;
        self
    }
}

fn distance(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    let dz = p[2] - q[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Aspect angle between the track axis and the direction from the sensor
/// `q` to the transmitter `p`.
pub fn antenna_angle(p: &[f64; 3], q: &[f64; 3]) -> Result<f64> {
    let d = distance(p, q);
    if d == 0.0 {
        return Err(Error::ZeroDistance);
    }
    Ok(((p[0] - q[0]) / d).clamp(-1.0, 1.0).acos())
}

/// Received power in dBm before any floor clamp.
pub fn path_gain(p: &[f64; 3], q: &[f64; 3], sensor: &Sensor, params: &ChannelParams) -> Result<f64> {
    let d = distance(p, q);
    if d == 0.0 {
        return Err(Error::ZeroDistance);
    }
    let alpha = ((p[0] - q[0]) / d).clamp(-1.0, 1.0).acos();
    Ok(sensor.ref_power_dbm - params.pathloss_exponent * 10.0 * d.log10()
        + params.pattern.gain_unchecked(alpha))
}

/// Mean of the reported RSSI: the pathloss prediction, clamped from below at the floor.
pub fn expected_rssi(p: &[f64; 3], sensor: &Sensor, params: &ChannelParams) -> Result<f64> {
    Ok(path_gain(p, &sensor.position, sensor, params)?.max(sensor.floor_dbm))
}

/// Natural-log Gaussian density of `rssi_dbm` around the clamped prediction.
pub fn rssi_log_likelihood(
    rssi_dbm: f64,
    p: &[f64; 3],
    sensor: &Sensor,
    params: &ChannelParams,
) -> Result<f64> {
    if !rssi_dbm.is_finite() || p.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("likelihood input"));
    }
    let mu = expected_rssi(p, sensor, params)?;
    Ok(gaussian_log_density(rssi_dbm, mu, params.likelihood_variance))
}

#[inline]
pub(crate) fn gaussian_log_density(x: f64, mean: f64, variance: f64) -> f64 {
    let r = x - mean;
    -0.5 * (2.0 * PI * variance).ln() - r * r / (2.0 * variance)
}

/// Linear-interpolated percentile of an unsorted sample, `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(percentile_sorted(&sorted, q))
}

pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Re-estimates each sensor's 1 m reference power (its maximum observed RSSI)
/// and its floor (a low percentile of observed RSSI) from one or more runs.
pub fn calibrate_many(
    runs: &[&MeasurementSeries],
    array: &SensorArray,
    floor_percentile: f64,
) -> Result<SensorArray> {
    let mut sensors = Vec::with_capacity(array.len());
    for sensor in array.sensors() {
        let values: Vec<f64> = runs
            .iter()
            .flat_map(|s| s.frames.iter().filter_map(|f| f.reading(sensor.id)))
            .collect();
        if values.is_empty() {
            return Err(Error::Calibration {
                sensor: sensor.id,
                reason: "no readings".into(),
            });
        }
        let ref_power = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let floor = percentile(&values, floor_percentile).expect("non-empty");
        if floor >= ref_power {
            return Err(Error::Calibration {
                sensor: sensor.id,
                reason: format!("floor {floor} is not below reference power {ref_power}"),
            });
        }
        sensors.push(Sensor {
            ref_power_dbm: ref_power,
            floor_dbm: floor,
            ..sensor.clone()
        });
    }
    SensorArray::new(sensors)
}

pub fn calibrate(
    series: &MeasurementSeries,
    array: &SensorArray,
    floor_percentile: f64,
) -> Result<SensorArray> {
    calibrate_many(&[series], array, floor_percentile)
}
