//! Sensor-fusion particle filter over the 1-D car state.
//!
//! Each cycle predicts with the constant-velocity model plus Gaussian driving
//! noise, fuses every reporting sensor's likelihood into the particle weights,
//! emits the weighted mean and variance, and resamples. Weights are kept in
//! the log domain; six sensors' densities multiplied together underflow for
//! distant particles.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{gaussian_log_density, ChannelParams};
use crate::error::{Error, Result};
use crate::model::{
    CarState, Frame, GroundTruthTrack, MeasurementSeries, Scenario, Sensor, SensorArray,
    TransmitterMount,
};

/// Particle count above which likelihoods are evaluated on the rayon pool.
const PARALLEL_PARTICLES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampling {
    #[default]
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub n_particles: usize,
    pub init_pos_range: [f64; 2],
    /// Meters per tick.
    pub init_vel_range: [f64; 2],
    /// Covariance of the (position, velocity) driving noise per tick.
    pub driving_cov: [[f64; 2]; 2],
    pub resampling: Resampling,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            n_particles: 300,
            init_pos_range: [-25.0, 25.0],
            init_vel_range: [-3.0, 3.0],
            driving_cov: [[4.0, 0.0], [0.0, 4.0]],
            resampling: Resampling::Multinomial,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::schema("filter.n_particles", "must be >= 2"));
        }
        for (name, r) in [
            ("filter.init_pos_range", self.init_pos_range),
            ("filter.init_vel_range", self.init_vel_range),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1]) {
                return Err(Error::schema(name, "must be a finite interval with lo < hi"));
            }
        }
        let c = self.driving_cov;
        if c.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::schema("filter.driving_cov", "must be finite"));
        }
        if c[0][1] != c[1][0] {
            return Err(Error::schema("filter.driving_cov", "must be symmetric"));
        }
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        if c[0][0] < 0.0 || c[1][1] < 0.0 || det < -1e-12 {
            return Err(Error::schema("filter.driving_cov", "must be positive semi-definite"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Lower-triangular factor of the driving covariance; tolerates singular matrices.
    fn noise_factor(&self) -> [[f64; 2]; 2] {
        let c = self.driving_cov;
        let l11 = c[0][0].max(0.0).sqrt();
        let l21 = if l11 > 0.0 { c[1][0] / l11 } else { 0.0 };
        let l22 = (c[1][1] - l21 * l21).max(0.0).sqrt();
        [[l11, 0.0], [l21, l22]]
    }
}

/// Everything the update step needs to predict a reading for a particle.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    pub array: SensorArray,
    pub channel: ChannelParams,
    pub mount: TransmitterMount,
}

impl SensorModel {
    pub fn new(array: SensorArray, channel: ChannelParams, mount: TransmitterMount) -> Self {
        SensorModel {
            array,
            channel,
            mount,
        }
    }

    pub fn from_scenario(scenario: &Scenario) -> Self {
        SensorModel::new(
            scenario.sensors.clone(),
            scenario.channel.clone(),
            scenario.transmitter,
        )
    }

    /// Log-likelihood of one sensor's reading at car position `p_x`.
    #[inline]
    fn log_likelihood(&self, sensor: &Sensor, rssi: f64, p_x: f64) -> f64 {
        let q = sensor.position;
        let dx = p_x - q[0];
        let dy = self.mount.y - q[1];
        let dz = self.mount.z - q[2];
        // Coincident positions are nudged; a particle sitting exactly on a sensor is measure-zero.
        let d = (dx * dx + dy * dy + dz * dz).sqrt().max(1e-9);
        let alpha = (dx / d).clamp(-1.0, 1.0).acos();
        let gain = self
            .channel
            .pattern
            .gain(alpha)
            .expect("angle within [0, pi]");
        let l = sensor.ref_power_dbm - self.channel.pathloss_exponent * 10.0 * d.log10() + gain;
        gaussian_log_density(rssi, l.max(sensor.floor_dbm), self.channel.likelihood_variance)
    }
}

#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub states: Vec<CarState>,
    pub log_weights: Vec<f64>,
    rng: ChaCha8Rng,
}

impl ParticleSet {
    pub fn from_parts(states: Vec<CarState>, log_weights: Vec<f64>, seed: u64) -> Self {
        assert_eq!(states.len(), log_weights.len());
        ParticleSet {
            states,
            log_weights,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    fn set_uniform(&mut self) {
        let lw = -(self.len() as f64).ln();
        self.log_weights.iter_mut().for_each(|w| *w = lw);
    }

    /// Normalizes the log weights to sum to one. Returns false (and resets to
    /// uniform) if the total mass is zero or not finite.
    fn normalize(&mut self) -> bool {
        let lse = log_sum_exp(&self.log_weights);
        if !lse.is_finite() {
            self.set_uniform();
            return false;
        }
        self.log_weights.iter_mut().for_each(|w| *w -= lse);
        true
    }

    pub fn estimate(&self, tick: u64) -> Estimate {
        let n = self.len() as f64;
        let first = self.log_weights[0];
        let uniform = self.log_weights.iter().all(|&w| w == first);
        let (mean_p, mean_v) = if uniform {
            let (sp, sv) = self
                .states
                .iter()
                .fold((0.0, 0.0), |(a, b), s| (a + s.p_x, b + s.v_x));
            (sp / n, sv / n)
        } else {
            self.states
                .iter()
                .zip(&self.log_weights)
                .fold((0.0, 0.0), |(a, b), (s, lw)| {
                    let w = lw.exp();
                    (a + w * s.p_x, b + w * s.v_x)
                })
        };
        let (var_p, var_v) = if uniform {
            let (sp, sv) = self.states.iter().fold((0.0, 0.0), |(a, b), s| {
                (a + (s.p_x - mean_p).powi(2), b + (s.v_x - mean_v).powi(2))
            });
            (sp / n, sv / n)
        } else {
            self.states
                .iter()
                .zip(&self.log_weights)
                .fold((0.0, 0.0), |(a, b), (s, lw)| {
                    let w = lw.exp();
                    (
                        a + w * (s.p_x - mean_p).powi(2),
                        b + w * (s.v_x - mean_v).powi(2),
                    )
                })
        };
        Estimate {
            tick,
            mean: CarState::new(mean_p, mean_v),
            var_p,
            var_v,
            degenerate: false,
        }
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub tick: u64,
    pub mean: CarState,
    pub var_p: f64,
    pub var_v: f64,
    /// Set when every particle's likelihood underflowed and the weights were reset.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EstimateTrack {
    pub tick_interval_s: f64,
    pub estimates: Vec<Estimate>,
}

impl EstimateTrack {
    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let wrap = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(["tick", "mu_px", "mu_vx", "var_px", "var_vx", "degenerate"])
            .map_err(wrap)?;
        for e in &self.estimates {
            w.write_record([
                e.tick.to_string(),
                e.mean.p_x.to_string(),
                e.mean.v_x.to_string(),
                e.var_p.to_string(),
                e.var_v.to_string(),
                (e.degenerate as u8).to_string(),
            ])
            .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

/// Root-mean-square position error, skipping the first `burn_in` ticks.
pub fn position_rmse(track: &EstimateTrack, truth: &GroundTruthTrack, burn_in: usize) -> Result<f64> {
    if track.len() != truth.len() {
        return Err(Error::LengthMismatch(track.len(), truth.len()));
    }
    let errs: Vec<f64> = track
        .estimates
        .iter()
        .zip(&truth.samples)
        .skip(burn_in)
        .map(|(e, t)| (e.mean.p_x - t.state.p_x).powi(2))
        .collect();
    if errs.is_empty() {
        return Err(Error::Empty("no ticks after burn-in"));
    }
    Ok((errs.iter().sum::<f64>() / errs.len() as f64).sqrt())
}

pub fn init(config: &FilterConfig) -> ParticleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let [p_lo, p_hi] = config.init_pos_range;
    let [v_lo, v_hi] = config.init_vel_range;
    let states = (0..config.n_particles)
        .map(|_| CarState::new(rng.random_range(p_lo..p_hi), rng.random_range(v_lo..v_hi)))
        .collect();
    let lw = -(config.n_particles as f64).ln();
    ParticleSet {
        states,
        log_weights: vec![lw; config.n_particles],
        rng,
    }
}

/// Constant-velocity step plus correlated Gaussian noise. Weights are untouched.
pub fn predict(set: &mut ParticleSet, config: &FilterConfig) {
    let l = config.noise_factor();
    let noisy = l.iter().flatten().any(|&v| v != 0.0);
    for s in set.states.iter_mut() {
        let mut p = s.p_x + s.v_x;
        let mut v = s.v_x;
        if noisy {
            let z1: f64 = set.rng.sample(StandardNormal);
            let z2: f64 = set.rng.sample(StandardNormal);
            p += l[0][0] * z1;
            v += l[1][0] * z1 + l[1][1] * z2;
        }
        *s = CarState::new(p, v);
    }
}

/// Fuses one frame into the weights and returns the resulting estimate.
/// Sensors without a reading contribute nothing.
pub fn update(set: &mut ParticleSet, frame: &Frame, model: &SensorModel) -> Result<Estimate> {
    let mut observed: Vec<(&Sensor, f64)> = Vec::with_capacity(frame.readings.len());
    for (id, rssi) in frame.observed() {
        let sensor = model.array.get(id).ok_or(Error::UnknownSensor(id))?;
        observed.push((sensor, rssi));
    }
    let fuse = |s: &CarState, lw: &mut f64| {
        *lw += observed
            .iter()
            .map(|(sensor, rssi)| model.log_likelihood(sensor, *rssi, s.p_x))
            .sum::<f64>();
    };
    if set.len() >= PARALLEL_PARTICLES {
        set.states
            .par_iter()
            .zip(set.log_weights.par_iter_mut())
            .for_each(|(s, lw)| fuse(s, lw));
    } else {
        set.states
            .iter()
            .zip(set.log_weights.iter_mut())
            .for_each(|(s, lw)| fuse(s, lw));
    }
    let ok = set.normalize();
    let mut est = set.estimate(frame.tick);
    est.degenerate = !ok;
    Ok(est)
}

/// Draws a fresh equally weighted set from the current weights.
pub fn resample(set: &mut ParticleSet, config: &FilterConfig) {
    let n = set.len();
    let mut cumulative: Vec<f64> = set
        .log_weights
        .iter()
        .scan(0.0, |acc, lw| {
            *acc += lw.exp();
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().expect("non-empty set");
    cumulative.iter_mut().for_each(|c| *c /= total);
    cumulative[n - 1] = 1.0;

    let pick = |u: f64| cumulative.partition_point(|&c| c <= u).min(n - 1);
    let indices: Vec<usize> = match config.resampling {
        Resampling::Multinomial => (0..n).map(|_| pick(set.rng.random::<f64>())).collect(),
        Resampling::Systematic => {
            let offset: f64 = set.rng.random::<f64>();
            (0..n).map(|k| pick((offset + k as f64) / n as f64)).collect()
        }
    };
    set.states = indices.iter().map(|&i| set.states[i]).collect();
    set.set_uniform();
}

/// A filter instance cycling predict, update and resample over frames.
#[derive(Debug, Clone)]
pub struct ParticleFilter {
    config: FilterConfig,
    model: SensorModel,
    set: ParticleSet,
}

impl ParticleFilter {
    pub fn new(config: FilterConfig, model: SensorModel) -> Result<Self> {
        config.validate()?;
        let set = init(&config);
        Ok(ParticleFilter { config, model, set })
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.set
    }

    pub fn step(&mut self, frame: &Frame) -> Result<Estimate> {
        predict(&mut self.set, &self.config);
        let est = update(&mut self.set, frame, &self.model)?;
        resample(&mut self.set, &self.config);
        Ok(est)
    }
}

pub fn run(series: &MeasurementSeries, model: &SensorModel, config: &FilterConfig) -> Result<EstimateTrack> {
    series.validate(&model.array)?;
    let mut filter = ParticleFilter::new(config.clone(), model.clone())?;
    let estimates = series
        .frames
        .iter()
        .map(|f| filter.step(f))
        .collect::<Result<Vec<_>>>()?;
    Ok(EstimateTrack {
        tick_interval_s: series.tick_interval_s,
        estimates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::rssi_log_likelihood;
    use crate::model::Sensor;
    use proptest::prelude::*;

    fn two_sensor_model() -> SensorModel {
        let array = SensorArray::new(vec![
            Sensor {
                id: 1,
                position: [-3.0, 1.5, 0.0],
                ref_power_dbm: -45.0,
                floor_dbm: -80.0,
            },
            Sensor {
                id: 2,
                position: [4.0, -1.5, 0.0],
                ref_power_dbm: -50.0,
                floor_dbm: -85.0,
            },
        ])
        .unwrap();
        SensorModel::new(array, ChannelParams::default(), TransmitterMount::default())
    }

    #[test]
    fn init_respects_ranges_and_seed() {
        let cfg = FilterConfig::default();
        let set = init(&cfg);
        assert_eq!(set.len(), 300);
        assert!(set.states.iter().all(|s| (-25.0..=25.0).contains(&s.p_x)));
        assert!(set.states.iter().all(|s| (-3.0..=3.0).contains(&s.v_x)));
        let w = set.weights();
        assert!(w.iter().all(|&x| (x - 1.0 / 300.0).abs() < 1e-15));
        assert_eq!(init(&cfg).states, set.states);
    }

    #[test]
    fn init_mean_converges() {
        let cfg = FilterConfig {
            n_particles: 100_000,
            ..FilterConfig::default()
        };
        let set = init(&cfg);
        let mean = set.states.iter().map(|s| s.p_x).sum::<f64>() / 1e5;
        // 3 sigma for U(-25, 25): 3 * 50/sqrt(12) / sqrt(1e5) ~ 0.14
        assert!(mean.abs() < 1.0, "mean {mean}");
    }

    #[test]
    fn predict_without_noise_is_motion_model() {
        let cfg = FilterConfig {
            driving_cov: [[0.0, 0.0], [0.0, 0.0]],
            ..FilterConfig::default()
        };
        let mut set = ParticleSet::from_parts(vec![CarState::new(1.0, 2.0)], vec![0.0], 1);
        predict(&mut set, &cfg);
        assert_eq!(set.states[0], CarState::new(3.0, 2.0));
        assert_eq!(set.log_weights, vec![0.0]);
    }

    #[test]
    fn predict_noise_matches_covariance() {
        let cfg = FilterConfig::default();
        let n = 100_000;
        let lw = vec![-(n as f64).ln(); n];
        let mut set = ParticleSet::from_parts(vec![CarState::default(); n], lw.clone(), 9);
        predict(&mut set, &cfg);
        assert_eq!(set.log_weights, lw);
        let nf = n as f64;
        let mp = set.states.iter().map(|s| s.p_x).sum::<f64>() / nf;
        let mv = set.states.iter().map(|s| s.v_x).sum::<f64>() / nf;
        let cpp = set.states.iter().map(|s| (s.p_x - mp).powi(2)).sum::<f64>() / nf;
        let cvv = set.states.iter().map(|s| (s.v_x - mv).powi(2)).sum::<f64>() / nf;
        let cpv = set.states.iter().map(|s| (s.p_x - mp) * (s.v_x - mv)).sum::<f64>() / nf;
        assert!((cpp - 4.0).abs() < 0.2, "{cpp}");
        assert!((cvv - 4.0).abs() < 0.2, "{cvv}");
        assert!(cpv.abs() < 0.2, "{cpv}");
    }

    #[test]
    fn predict_correlated_noise() {
        let cfg = FilterConfig {
            driving_cov: [[2.0, 1.0], [1.0, 1.0]],
            ..FilterConfig::default()
        };
        let n = 100_000;
        let mut set = ParticleSet::from_parts(vec![CarState::default(); n], vec![0.0; n], 4);
        predict(&mut set, &cfg);
        let cpv = set.states.iter().map(|s| s.p_x * s.v_x).sum::<f64>() / n as f64;
        assert!((cpv - 1.0).abs() < 0.05, "{cpv}");
    }

    #[test]
    fn empty_frame_keeps_weights() {
        let model = two_sensor_model();
        let states = vec![CarState::new(0.0, 1.0), CarState::new(2.0, 0.0)];
        let lw = vec![0.25f64.ln(), 0.75f64.ln()];
        let mut set = ParticleSet::from_parts(states, lw.clone(), 0);
        let est = update(&mut set, &Frame::new(5), &model).unwrap();
        for (a, b) in set.log_weights.iter().zip(&lw) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((est.mean.p_x - 1.5).abs() < 1e-12);
        assert!(!est.degenerate);
        assert_eq!(est.tick, 5);
    }

    #[test]
    fn fusion_matches_product_of_densities() {
        let model = two_sensor_model();
        let positions = [-1.0, 2.5, 6.0];
        let states: Vec<CarState> = positions.iter().map(|&p| CarState::new(p, 0.1)).collect();
        let mut set = ParticleSet::from_parts(states, vec![-(3f64.ln()); 3], 0);
        let mut frame = Frame::new(0);
        frame.readings.insert(1, Some(-58.0));
        frame.readings.insert(2, Some(-61.0));
        update(&mut set, &frame, &model).unwrap();

        let sigma2: f64 = 9.0;
        let density = |rx: f64, mu: f64| {
            (-(rx - mu).powi(2) / (2.0 * sigma2)).exp() / (2.0 * std::f64::consts::PI * sigma2).sqrt()
        };
        let mu = |s: &Sensor, px: f64| {
            let q = s.position;
            let d = ((px - q[0]).powi(2) + q[1].powi(2) + q[2].powi(2)).sqrt();
            let alpha = ((px - q[0]) / d).acos();
            let gain = if alpha < std::f64::consts::PI / 3.0 {
                0.0
            } else if alpha < 0.75 * std::f64::consts::PI {
                -6.0
            } else {
                -10.0
            };
            (s.ref_power_dbm - 20.0 * d.log10() + gain).max(s.floor_dbm)
        };
        let s1 = model.array.get(1).unwrap();
        let s2 = model.array.get(2).unwrap();
        let raw: Vec<f64> = positions
            .iter()
            .map(|&p| density(-58.0, mu(s1, p)) * density(-61.0, mu(s2, p)))
            .collect();
        let total: f64 = raw.iter().sum();
        for (w, r) in set.weights().iter().zip(&raw) {
            assert!((w - r / total).abs() < 1e-12, "{w} vs {}", r / total);
        }
    }

    #[test]
    fn identical_particles_have_zero_variance() {
        let model = two_sensor_model();
        let mut set = ParticleSet::from_parts(vec![CarState::new(1.0, -0.5); 4], vec![0.0; 4], 0);
        let mut frame = Frame::new(0);
        frame.readings.insert(1, Some(-60.0));
        let est = update(&mut set, &frame, &model).unwrap();
        assert_eq!(est.mean, CarState::new(1.0, -0.5));
        assert_eq!(est.var_p, 0.0);
        assert_eq!(est.var_v, 0.0);
    }

    #[test]
    fn non_finite_weights_reset_to_uniform() {
        let model = two_sensor_model();
        let mut set =
            ParticleSet::from_parts(vec![CarState::new(0.0, 0.0); 3], vec![f64::NEG_INFINITY; 3], 0);
        let mut frame = Frame::new(0);
        frame.readings.insert(1, Some(-60.0));
        let est = update(&mut set, &frame, &model).unwrap();
        assert!(est.degenerate);
        assert!(set.weights().iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn update_rejects_unknown_sensor() {
        let model = two_sensor_model();
        let mut set = init(&FilterConfig::default());
        let mut frame = Frame::new(0);
        frame.readings.insert(9, Some(-60.0));
        assert!(matches!(update(&mut set, &frame, &model), Err(Error::UnknownSensor(9))));
    }

    #[test]
    fn resample_degenerate_weight() {
        for mode in [Resampling::Multinomial, Resampling::Systematic] {
            let cfg = FilterConfig {
                resampling: mode,
                ..FilterConfig::default()
            };
            let states: Vec<CarState> = (0..10).map(|i| CarState::new(i as f64, 0.0)).collect();
            let mut lw = vec![f64::NEG_INFINITY; 10];
            lw[7] = 0.0;
            let mut set = ParticleSet::from_parts(states, lw, 3);
            resample(&mut set, &cfg);
            assert!(set.states.iter().all(|s| s.p_x == 7.0));
            assert!(set.weights().iter().all(|w| (w - 0.1).abs() < 1e-15));
        }
    }

    #[test]
    fn systematic_uniform_copies_each_once() {
        let cfg = FilterConfig {
            resampling: Resampling::Systematic,
            ..FilterConfig::default()
        };
        for seed in 0..200 {
            for n in [2usize, 3, 7, 64, 300] {
                let states: Vec<CarState> = (0..n).map(|i| CarState::new(i as f64, 0.0)).collect();
                let mut set = ParticleSet::from_parts(states, vec![-(n as f64).ln(); n], seed);
                resample(&mut set, &cfg);
                let mut seen: Vec<f64> = set.states.iter().map(|s| s.p_x).collect();
                seen.sort_by(f64::total_cmp);
                let expected: Vec<f64> = (0..n).map(|i| i as f64).collect();
                assert_eq!(seen, expected);
            }
        }
    }

    #[test]
    fn multinomial_half_half_ratio() {
        let cfg = FilterConfig::default();
        let n = 10;
        let mut lw = vec![f64::NEG_INFINITY; n];
        lw[0] = 0.5f64.ln();
        lw[1] = 0.5f64.ln();
        let states: Vec<CarState> = (0..n).map(|i| CarState::new(i as f64, 0.0)).collect();
        let mut set = ParticleSet::from_parts(states.clone(), lw.clone(), 11);
        let (mut c0, mut c1) = (0usize, 0usize);
        for _ in 0..10_000 {
            set.states = states.clone();
            set.log_weights = lw.clone();
            resample(&mut set, &cfg);
            c0 += set.states.iter().filter(|s| s.p_x == 0.0).count();
            c1 += set.states.iter().filter(|s| s.p_x == 1.0).count();
        }
        assert_eq!(c0 + c1, 10 * 10_000);
        let ratio = c0 as f64 / c1 as f64;
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn run_empty_series() {
        let model = two_sensor_model();
        let series = MeasurementSeries {
            tick_interval_s: 0.1,
            frames: vec![],
        };
        let track = run(&series, &model, &FilterConfig::default()).unwrap();
        assert!(track.is_empty());
    }

    #[test]
    fn likelihood_path_agrees_with_channel() {
        let model = two_sensor_model();
        for px in [-10.0, -3.0, -2.9, 0.0, 3.3, 4.0, 12.0] {
            for s in model.array.sensors() {
                let direct = rssi_log_likelihood(-63.0, &[px, 0.0, 0.0], s, &model.channel).unwrap();
                let fast = model.log_likelihood(s, -63.0, px);
                assert!((direct - fast).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn estimate_csv_header() {
        let track = EstimateTrack {
            tick_interval_s: 0.1,
            estimates: vec![Estimate {
                tick: 3,
                mean: CarState::new(1.5, -0.1),
                var_p: 0.25,
                var_v: 0.5,
                degenerate: true,
            }],
        };
        let mut buf = Vec::new();
        track.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "tick,mu_px,mu_vx,var_px,var_vx,degenerate\n3,1.5,-0.1,0.25,0.5,1\n"
        );
    }

    proptest! {
        #[test]
        fn update_normalizes_and_matches_direct_sums(
            pos in proptest::collection::vec((-20.0f64..20.0, -2.0f64..2.0), 2..40),
            r1 in proptest::option::of(-90.0f64..-40.0),
            r2 in proptest::option::of(-90.0f64..-40.0),
            prior in proptest::collection::vec(-5.0f64..0.0, 40),
        ) {
            let model = two_sensor_model();
            let n = pos.len();
            let states: Vec<CarState> = pos.iter().map(|&(p, v)| CarState::new(p, v)).collect();
            let mut set = ParticleSet::from_parts(states, prior[..n].to_vec(), 0);
            let mut frame = Frame::new(0);
            frame.readings.insert(1, r1);
            frame.readings.insert(2, r2);
            let est = update(&mut set, &frame, &model).unwrap();
            prop_assert!((log_sum_exp(&set.log_weights)).abs() < 1e-9);
            let w = set.weights();
            let mp: f64 = w.iter().zip(&set.states).map(|(w, s)| w * s.p_x).sum();
            let vp: f64 = w.iter().zip(&set.states).map(|(w, s)| w * (s.p_x - mp).powi(2)).sum();
            let mv: f64 = w.iter().zip(&set.states).map(|(w, s)| w * s.v_x).sum();
            let vv: f64 = w.iter().zip(&set.states).map(|(w, s)| w * (s.v_x - mv).powi(2)).sum();
            prop_assert!(est.var_p >= 0.0 && est.var_v >= 0.0);
            prop_assert!((est.mean.p_x - mp).abs() < 1e-9);
            prop_assert!((est.var_p - vp).abs() < 1e-9 * (1.0 + vp));
            prop_assert!((est.var_v - vv).abs() < 1e-9 * (1.0 + vv));
        }

        #[test]
        fn uniform_weights_give_arithmetic_mean(pos in proptest::collection::vec(-20.0f64..20.0, 2..50)) {
            let n = pos.len();
            let states: Vec<CarState> = pos.iter().map(|&p| CarState::new(p, 0.0)).collect();
            let set = ParticleSet::from_parts(states, vec![-(n as f64).ln(); n], 0);
            let est = set.estimate(0);
            prop_assert_eq!(est.mean.p_x, pos.iter().sum::<f64>() / n as f64);
        }
    }
}
