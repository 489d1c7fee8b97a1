//! Zone classification for a car approaching a building, from BLE RSSI.
//!
//! A bootstrap particle filter fuses readings from a fixed sensor array into
//! a 1-D position/velocity estimate; windowed filter statistics then feed a
//! KNN, random forest or RBF-SVM classifier that labels each tick as
//! inside, transition or outside.

pub mod channel;
pub mod classify;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod pf;
pub mod synth;

pub use channel::{AntennaPattern, ChannelParams};
pub use classify::{Algorithm, Hyperparams, Model};
pub use error::{Error, Result};
pub use eval::{run_sweep, SweepGrid, SweepOptions, SweepReport};
pub use features::{FeatureSet, Matrix, ScalerKind, Source};
pub use model::{
    CarState, Frame, GroundTruthTrack, MeasurementSeries, Scenario, Sensor, SensorArray, SensorId,
    ZoneLabel, ZoneThresholds,
};
pub use pf::{Estimate, EstimateTrack, FilterConfig, ParticleFilter, Resampling, SensorModel};
pub use synth::{generate_dataset, Dataset, NoiseSpec, TrajectoryProfile};
