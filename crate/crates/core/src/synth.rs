//! Synthetic measurement campaigns: a car shuttling in and out of a chamber,
//! observed by the scenario's receivers through the forward channel model.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{expected_rssi, ChannelParams};
use crate::error::{Error, Result};
use crate::model::{
    load_ground_truth, read_measurements, save_ground_truth, save_measurements, CarState, Frame,
    GroundTruthTrack, MeasurementSeries, Scenario, Sensor, SensorArray, TransmitterMount,
    ZoneThresholds,
};
use crate::pf::{FilterConfig, SensorModel};

pub const RUNS_PER_DATASET: usize = 6;
pub const MIN_ROUND_TRIPS: u32 = 2;
pub const MAX_ROUND_TRIPS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryProfile {
    /// Parking position outside the chamber (m).
    pub x_out: f64,
    /// End position inside the chamber (m).
    pub x_in: f64,
    /// m/s
    pub cruise_speed: f64,
    /// m/s²
    pub accel: f64,
    pub dwell_ticks: u32,
    /// Each dwell is extended by a seeded draw from `0..=dwell_jitter_ticks`.
    pub dwell_jitter_ticks: u32,
    pub n_round_trips: u32,
}

impl Default for TrajectoryProfile {
    fn default() -> Self {
        TrajectoryProfile {
            x_out: 10.0,
            x_in: -10.0,
            cruise_speed: 1.0,
            accel: 0.5,
            dwell_ticks: 30,
            dwell_jitter_ticks: 20,
            n_round_trips: 3,
        }
    }
}

impl TrajectoryProfile {
    pub fn validate(&self, zone: &ZoneThresholds) -> Result<()> {
        if !(self.x_in < zone.inside_max_x
            && zone.inside_max_x < zone.outside_min_x
            && zone.outside_min_x < self.x_out)
        {
            return Err(Error::schema(
                "trajectory",
                "x_in < inside_max_x < outside_min_x < x_out must hold",
            ));
        }
        if !(self.cruise_speed > 0.0 && self.cruise_speed.is_finite()) {
            return Err(Error::schema("trajectory.cruise_speed", "must be > 0"));
        }
        if !(self.accel > 0.0 && self.accel.is_finite()) {
            return Err(Error::schema("trajectory.accel", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// dB²
    pub rssi_noise_var: f64,
    pub dropout_prob: f64,
    /// Reporting resolution in dB; 0 disables rounding.
    pub quantization_step: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            rssi_noise_var: 9.0,
            dropout_prob: 0.05,
            quantization_step: 1.0,
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        NoiseSpec {
            rssi_noise_var: 0.0,
            dropout_prob: 0.0,
            quantization_step: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rssi_noise_var >= 0.0 && self.rssi_noise_var.is_finite()) {
            return Err(Error::schema("noise.rssi_noise_var", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::schema("noise.dropout_prob", "must be in [0, 1]"));
        }
        if !(self.quantization_step >= 0.0 && self.quantization_step.is_finite()) {
            return Err(Error::schema("noise.quantization_step", "must be >= 0"));
        }
        Ok(())
    }
}

/// Samples one straight drive with a trapezoidal speed profile, starting at
/// rest at `from` and stopping at `to`. The final resting sample is excluded.
fn drive_leg(from: f64, to: f64, speed: f64, accel: f64, dt: f64) -> Result<Vec<CarState>> {
    let dist = (to - from).abs();
    let dir = (to - from).signum();
    let t_acc = speed / accel;
    let d_acc = 0.5 * accel * t_acc * t_acc;
    if 2.0 * d_acc > dist {
        return Err(Error::Invariant(format!(
            "cruise speed {speed} m/s is unreachable over {dist} m with accel {accel} m/s²"
        )));
    }
    let t_cruise = (dist - 2.0 * d_acc) / speed;
    let total = 2.0 * t_acc + t_cruise;
    let n = (total / dt).ceil() as usize;
    Ok((0..n)
        .map(|k| {
            let t = k as f64 * dt;
            let (s, v) = if t < t_acc {
                (0.5 * accel * t * t, accel * t)
            } else if t < t_acc + t_cruise {
                (d_acc + speed * (t - t_acc), speed)
            } else if t < total {
                let r = total - t;
                (dist - 0.5 * accel * r * r, accel * r)
            } else {
                (dist, 0.0)
            };
            CarState::new(from + dir * s, dir * v * dt)
        })
        .collect())
}

pub fn simulate_trajectory(
    profile: &TrajectoryProfile,
    zone: &ZoneThresholds,
    tick_interval_s: f64,
    seed: u64,
) -> Result<GroundTruthTrack> {
    profile.validate(zone)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dwell = |states: &mut Vec<CarState>, x: f64| {
        let extra = if profile.dwell_jitter_ticks > 0 {
            rng.random_range(0..=profile.dwell_jitter_ticks)
        } else {
            0
        };
        states.extend(std::iter::repeat_n(
            CarState::new(x, 0.0),
            (profile.dwell_ticks + extra) as usize,
        ));
    };
    let (speed, accel) = (profile.cruise_speed, profile.accel);
    let inbound = drive_leg(profile.x_out, profile.x_in, speed, accel, tick_interval_s)?;
    let outbound = drive_leg(profile.x_in, profile.x_out, speed, accel, tick_interval_s)?;

    let mut states = Vec::new();
    dwell(&mut states, profile.x_out);
    for _ in 0..profile.n_round_trips {
        states.extend_from_slice(&inbound);
        dwell(&mut states, profile.x_in);
        states.extend_from_slice(&outbound);
        dwell(&mut states, profile.x_out);
    }
    let ticks: Vec<u64> = (0..states.len() as u64).collect();
    Ok(GroundTruthTrack::from_states(
        tick_interval_s,
        &ticks,
        &states,
        zone,
    ))
}

/// Forward-simulates receiver reports along a ground-truth track.
pub fn synthesize_rssi(
    track: &GroundTruthTrack,
    array: &SensorArray,
    channel: &ChannelParams,
    mount: &TransmitterMount,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<MeasurementSeries> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = noise.rssi_noise_var.sqrt();
    let mut frames = Vec::with_capacity(track.len());
    for sample in &track.samples {
        let p = mount.position(sample.state.p_x);
        let mut frame = Frame::new(sample.tick);
        for sensor in array.sensors() {
            let mu = expected_rssi(&p, sensor, channel)?;
            let z: f64 = rng.sample(StandardNormal);
            let mut value = mu + sigma * z;
            if noise.quantization_step > 0.0 {
                value = (value / noise.quantization_step).round() * noise.quantization_step;
            }
            let dropped = rng.random::<f64>() < noise.dropout_prob;
            frame
                .readings
                .insert(sensor.id, if dropped { None } else { Some(value) });
        }
        frames.push(frame);
    }
    MeasurementSeries::new(track.tick_interval_s, frames, array)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub id: usize,
    pub measurements: MeasurementSeries,
    pub truth: GroundTruthTrack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub id: usize,
    pub trajectory_seed: u64,
    pub rssi_seed: u64,
    pub round_trips: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub master_seed: u64,
    pub runs: Vec<RunSeeds>,
    pub profile: TrajectoryProfile,
    pub noise: NoiseSpec,
    pub scenario_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub runs: Vec<Run>,
    pub manifest: DatasetManifest,
}

pub fn measurements_file(id: usize) -> String {
    format!("run{id}_measurements.csv")
}

pub fn truth_file(id: usize) -> String {
    format!("run{id}_truth.csv")
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn generate_run(scenario: &Scenario, seeds: &RunSeeds) -> Result<Run> {
    let profile = TrajectoryProfile {
        n_round_trips: seeds.round_trips,
        ..scenario.trajectory.clone()
    };
    let truth = simulate_trajectory(
        &profile,
        &scenario.zone,
        scenario.tick_interval_s,
        seeds.trajectory_seed,
    )?;
    let measurements = synthesize_rssi(
        &truth,
        &scenario.sensors,
        &scenario.channel,
        &scenario.transmitter,
        &scenario.noise,
        seeds.rssi_seed,
    )?;
    Ok(Run {
        id: seeds.id,
        measurements,
        truth,
    })
}

/// Six runs with per-run seeds and round-trip counts drawn from the master seed.
pub fn generate_dataset(scenario: &Scenario, master_seed: u64) -> Result<Dataset> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let seeds: Vec<RunSeeds> = (0..RUNS_PER_DATASET)
        .map(|id| RunSeeds {
            id,
            round_trips: rng.random_range(MIN_ROUND_TRIPS..=MAX_ROUND_TRIPS),
            trajectory_seed: rng.next_u64(),
            rssi_seed: rng.next_u64(),
        })
        .collect();
    let runs = seeds
        .par_iter()
        .map(|s| generate_run(scenario, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        runs,
        manifest: DatasetManifest {
            master_seed,
            runs: seeds,
            profile: scenario.trajectory.clone(),
            noise: scenario.noise.clone(),
            scenario_hash: scenario.hash(),
        },
    })
}

impl Dataset {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for run in &self.runs {
            let m = dir.join(measurements_file(run.id));
            save_measurements(&run.measurements, &m)?;
            let t = dir.join(truth_file(run.id));
            save_ground_truth(&run.truth, &t)?;
            written.push(m);
            written.push(t);
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(written)
    }

    /// Loads `run{i}_measurements.csv` / `run{i}_truth.csv` for i in 0..6.
    pub fn load(dir: impl AsRef<Path>, scenario: &Scenario) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: DatasetManifest = match std::fs::read_to_string(&manifest_path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?,
            Err(_) => DatasetManifest {
                master_seed: 0,
                runs: Vec::new(),
                profile: scenario.trajectory.clone(),
                noise: scenario.noise.clone(),
                scenario_hash: scenario.hash(),
            },
        };
        let mut runs = Vec::with_capacity(RUNS_PER_DATASET);
        for id in 0..RUNS_PER_DATASET {
            let mpath = dir.join(measurements_file(id));
            let file = std::fs::File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
            let measurements = read_measurements(file, &scenario.sensors, scenario.tick_interval_s)?;
            let mut truth = load_ground_truth(dir.join(truth_file(id)), &scenario.zone)?;
            truth.tick_interval_s = scenario.tick_interval_s;
            truth.check_aligned(&measurements)?;
            runs.push(Run {
                id,
                measurements,
                truth,
            });
        }
        Ok(Dataset { runs, manifest })
    }
}

/// Built-in scenario used when no scenario file is given. Receiver
/// coordinates and zone thresholds are modelling assumptions.
pub fn default_scenario() -> Scenario {
    let xs = [-9.0, -5.0, -1.5, 1.5, 5.0, 9.0];
    let sensors = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| Sensor {
            id: i as u32 + 1,
            position: [x, if i % 2 == 0 { 1.5 } else { -1.5 }, 0.0],
            ref_power_dbm: -45.0,
            floor_dbm: -75.0,
        })
        .collect();
    Scenario {
        sensors: SensorArray::new(sensors).expect("valid default array"),
        zone: ZoneThresholds::new(-7.0, 0.0).expect("valid default zone"),
        filter: FilterConfig::default(),
        channel: ChannelParams::default(),
        transmitter: TransmitterMount::default(),
        tick_interval_s: crate::model::DEFAULT_TICK_INTERVAL_S,
        trajectory: TrajectoryProfile::default(),
        noise: NoiseSpec::default(),
    }
}

/// Convenience: the measurement model of a scenario.
pub fn sensor_model(scenario: &Scenario) -> SensorModel {
    SensorModel::from_scenario(scenario)
}
