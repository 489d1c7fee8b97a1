//! Leave-three-of-six evaluation: every 3-run training subset is scored on
//! each of the three held-out runs, and sweeps repeat this over classifier,
//! prescaler, feature set, memory length and feature source.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::calibrate_many;
use crate::classify::{predict, train_rows, Algorithm, Hyperparams, Model};
use crate::error::{Error, Result};
use crate::features::{
    build_feature_track, build_raw_track, fit_scaler, toeplitz_window, FeatureSelection, FeatureSet, Matrix,
    Scaler, ScalerKind, Source, Spread,
};
use crate::model::{GroundTruthTrack, MeasurementSeries, Scenario, SensorArray, ZoneLabel};
use crate::pf::{self, EstimateTrack, SensorModel};
use crate::synth::Run;

pub const DEFAULT_MEMORIES: [usize; 10] = [1, 2, 3, 4, 6, 8, 12, 16, 24, 32];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub run_ids: Vec<usize>,
    /// Training triples in lexicographic order.
    pub triples: Vec<[usize; 3]>,
}

impl SplitPlan {
    pub fn held_out(&self, triple: &[usize; 3]) -> Vec<usize> {
        self.run_ids
            .iter()
            .copied()
            .filter(|id| !triple.contains(id))
            .collect()
    }

    /// (triple index, held-out run) pairs in evaluation order.
    pub fn evaluations(&self) -> Vec<(usize, usize)> {
        self.triples
            .iter()
            .enumerate()
            .flat_map(|(k, t)| self.held_out(t).into_iter().map(move |r| (k, r)))
            .collect()
    }
}

pub fn enumerate_splits(run_ids: &[usize]) -> Result<SplitPlan> {
    let mut ids = run_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != 6 || run_ids.len() != 6 {
        return Err(Error::Invariant(format!(
            "expected 6 distinct runs, got {}",
            run_ids.len()
        )));
    }
    let mut triples = Vec::with_capacity(20);
    for a in 0..6 {
        for b in a + 1..6 {
            for c in b + 1..6 {
                triples.push([ids[a], ids[b], ids[c]]);
            }
        }
    }
    Ok(SplitPlan {
        run_ids: ids,
        triples,
    })
}

pub fn accuracy(predicted: &[ZoneLabel], truth: &[ZoneLabel]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch(predicted.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(Error::Empty("label sequence"));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Rows are true labels, columns predicted labels.
pub type Confusion = [[u64; 3]; 3];

fn confusion(predicted: &[ZoneLabel], truth: &[ZoneLabel]) -> Confusion {
    let mut c = [[0; 3]; 3];
    for (p, t) in predicted.iter().zip(truth) {
        c[t.index()][p.index()] += 1;
    }
    c
}

pub fn recall(c: &Confusion, label: ZoneLabel) -> Option<f64> {
    let row = &c[label.index()];
    let total: u64 = row.iter().sum();
    (total > 0).then(|| row[label.index()] as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    #[default]
    None,
    PerRun,
    Global,
}

/// One run after filtering: the inputs every sweep cell draws from.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRun {
    pub id: usize,
    pub estimates: EstimateTrack,
    pub raw: Matrix,
    pub labels: Vec<ZoneLabel>,
}

pub(crate) fn derive_seed(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Filter seed used for a run, derived from the scenario's filter seed.
pub fn run_filter_seed(base: u64, run_id: usize) -> u64 {
    derive_seed(&["filter", &base.to_string(), &run_id.to_string()])
}

/// Filters one series. `truth` may be None for unlabelled data, leaving `labels` empty.
pub fn prepare_series(
    id: usize,
    measurements: &MeasurementSeries,
    truth: Option<&GroundTruthTrack>,
    scenario: &Scenario,
    array: SensorArray,
    filter_seed: u64,
) -> Result<PreparedRun> {
    let labels = match truth {
        Some(t) => {
            t.check_aligned(measurements)?;
            t.labels()
        }
        None => Vec::new(),
    };
    let model = SensorModel::new(array, scenario.channel.clone(), scenario.transmitter);
    let config = scenario.filter.clone().with_seed(filter_seed);
    Ok(PreparedRun {
        id,
        estimates: pf::run(measurements, &model, &config)?,
        raw: build_raw_track(measurements, &scenario.sensors),
        labels,
    })
}

/// Runs the particle filter over every run and extracts raw-RSSI rows and labels.
pub fn prepare_runs(runs: &[Run], scenario: &Scenario, calibration: Calibration) -> Result<Vec<PreparedRun>> {
    let global = match calibration {
        Calibration::Global => {
            let all: Vec<_> = runs.iter().map(|r| &r.measurements).collect();
            Some(calibrate_many(&all, &scenario.sensors, scenario.channel.floor_percentile)?)
        }
        _ => None,
    };
    runs.par_iter()
        .map(|run| {
            let array = match calibration {
                Calibration::None => scenario.sensors.clone(),
                Calibration::PerRun => calibrate_many(
                    &[&run.measurements],
                    &scenario.sensors,
                    scenario.channel.floor_percentile,
                )?,
                Calibration::Global => global.clone().expect("computed above"),
            };
            prepare_series(
                run.id,
                &run.measurements,
                Some(&run.truth),
                scenario,
                array,
                run_filter_seed(scenario.filter.seed, run.id),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleOrder {
    /// Fit and apply the scaler on per-tick features, then window.
    #[default]
    BeforeWindow,
    /// Window first, then fit the scaler on the windowed rows.
    AfterWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub classifier: Algorithm,
    pub scaler: ScalerKind,
    pub features: FeatureSet,
    pub memory: usize,
    pub source: Source,
}

impl CellKey {
    /// Raw-RSSI cells ignore the feature set; they share one computation.
    fn canonical(&self) -> CellKey {
        match self.source {
            Source::RawRssi => CellKey {
                features: FeatureSet::PosVarVel,
                ..*self
            },
            Source::FilterEstimates => *self,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}/{}/{}",
            self.classifier.name(),
            self.scaler.name(),
            self.features.name(),
            self.memory,
            self.source.name()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub classifiers: Vec<Algorithm>,
    pub scalers: Vec<ScalerKind>,
    pub feature_sets: Vec<FeatureSet>,
    pub memories: Vec<usize>,
    pub sources: Vec<Source>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            classifiers: Algorithm::ALL.to_vec(),
            scalers: vec![ScalerKind::Standard, ScalerKind::Power],
            feature_sets: FeatureSet::ALL.to_vec(),
            memories: DEFAULT_MEMORIES.to_vec(),
            sources: vec![Source::FilterEstimates, Source::RawRssi],
        }
    }
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &classifier in &self.classifiers {
            for &scaler in &self.scalers {
                for &features in &self.feature_sets {
                    for &source in &self.sources {
                        for &memory in &self.memories {
                            out.push(CellKey {
                                classifier,
                                scaler,
                                features,
                                memory,
                                source,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepOptions {
    pub hyperparams: Hyperparams,
    pub master_seed: u64,
    /// Keep every k-th windowed training row. Held-out runs are always scored in full.
    pub train_stride: usize,
    pub scale_order: ScaleOrder,
    /// Variance or standard deviation as the position-uncertainty feature.
    pub spread: Spread,
    pub keep_predictions: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            hyperparams: Hyperparams::default(),
            master_seed: 0,
            train_stride: 4,
            scale_order: ScaleOrder::BeforeWindow,
            spread: Spread::Variance,
            keep_predictions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub train: [usize; 3],
    pub test: usize,
    pub accuracy: f64,
    pub n_rows: usize,
    pub confusion: Confusion,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub predictions: Option<Vec<ZoneLabel>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub evaluations: Vec<Evaluation>,
    /// Unweighted mean over evaluations.
    pub mean_acc: f64,
    pub std_acc: f64,
    /// Pooled over all scored rows, so longer runs weigh more.
    pub weighted_acc: f64,
    pub confusion: Confusion,
    pub failure: Option<String>,
}

impl CellResult {
    pub fn recall(&self, label: ZoneLabel) -> Option<f64> {
        recall(&self.confusion, label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestMemory {
    pub classifier: Algorithm,
    pub scaler: ScalerKind,
    pub features: FeatureSet,
    pub source: Source,
    pub memory: usize,
    pub mean_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<CellResult>,
    pub best: Vec<BestMemory>,
}

/// Scaler and model fitted on training runs only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedCell {
    pub scaler: Scaler,
    pub model: Model,
}

fn base_rows(run: &PreparedRun, key: &CellKey, spread: Spread) -> Result<Matrix> {
    match key.source {
        Source::RawRssi => Ok(run.raw.clone()),
        Source::FilterEstimates => {
            let sel = FeatureSelection {
                spread,
                ..key.features.selection(Source::FilterEstimates)
            };
            build_feature_track(&run.estimates, &sel)
        }
    }
}

impl FittedCell {
    /// Scaled, windowed rows for one run.
    pub fn transform(&self, run: &PreparedRun, key: &CellKey, order: ScaleOrder, spread: Spread) -> Result<Matrix> {
        let base = base_rows(run, key, spread)?;
        match order {
            ScaleOrder::BeforeWindow => toeplitz_window(&self.scaler.apply(&base)?, key.memory),
            ScaleOrder::AfterWindow => self.scaler.apply(&toeplitz_window(&base, key.memory)?),
        }
    }
}

pub fn fit_cell(train: &[&PreparedRun], key: &CellKey, opts: &SweepOptions, seed: u64) -> Result<FittedCell> {
    let mut fit_rows = Matrix::default();
    for run in train {
        let base = base_rows(run, key, opts.spread)?;
        match opts.scale_order {
            ScaleOrder::BeforeWindow => fit_rows.extend(&base)?,
            ScaleOrder::AfterWindow => fit_rows.extend(&toeplitz_window(&base, key.memory)?)?,
        }
    }
    let scaler = fit_scaler(key.scaler, &fit_rows)?;
    let mut staged = FittedCell {
        scaler,
        model: Model::Knn(crate::classify::KnnModel {
            k: 1,
            rows: Matrix::default(),
            labels: Vec::new(),
        }),
    };
    let mut rows = Matrix::default();
    let mut labels = Vec::new();
    for run in train {
        let windowed = staged.transform(run, key, opts.scale_order, opts.spread)?;
        rows.extend(&windowed.take_every(opts.train_stride))?;
        labels.extend(run.labels.iter().step_by(opts.train_stride.max(1)).copied());
    }
    staged.model = train_rows(key.classifier, &rows, &labels, &opts.hyperparams, seed)?;
    Ok(staged)
}

/// A fitted cell packaged for reuse on new series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPipeline {
    pub key: CellKey,
    pub scale_order: ScaleOrder,
    pub spread: Spread,
    pub train_runs: Vec<usize>,
    pub scaler: Scaler,
    pub model: Model,
}

impl TrainedPipeline {
    pub fn fit(train: &[&PreparedRun], key: CellKey, opts: &SweepOptions, seed: u64) -> Result<Self> {
        let fitted = fit_cell(train, &key, opts, seed)?;
        Ok(TrainedPipeline {
            key,
            scale_order: opts.scale_order,
            spread: opts.spread,
            train_runs: train.iter().map(|r| r.id).collect(),
            scaler: fitted.scaler,
            model: fitted.model,
        })
    }

    pub fn predict(&self, run: &PreparedRun) -> Result<Vec<ZoneLabel>> {
        let fitted = FittedCell {
            scaler: self.scaler.clone(),
            model: self.model.clone(),
        };
        let rows = fitted.transform(run, &self.key, self.scale_order, self.spread)?;
        predict(&self.model, &rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pipeline serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

fn cell_seed(master: u64, key: &CellKey, triple: usize) -> u64 {
    derive_seed(&["cell", &master.to_string(), &key.label(), &triple.to_string()])
}

fn run_cell(runs: &BTreeMap<usize, &PreparedRun>, plan: &SplitPlan, key: &CellKey, opts: &SweepOptions) -> CellResult {
    let per_triple: Result<Vec<Vec<Evaluation>>> = plan
        .triples
        .par_iter()
        .enumerate()
        .map(|(k, triple)| {
            let train: Vec<&PreparedRun> = triple.iter().map(|id| runs[id]).collect();
            let fitted = fit_cell(&train, key, opts, cell_seed(opts.master_seed, key, k))?;
            plan.held_out(triple)
                .into_iter()
                .map(|test| {
                    let run = runs[&test];
                    let rows = fitted.transform(run, key, opts.scale_order, opts.spread)?;
                    let pred = predict(&fitted.model, &rows)?;
                    Ok(Evaluation {
                        train: *triple,
                        test,
                        accuracy: accuracy(&pred, &run.labels)?,
                        n_rows: pred.len(),
                        confusion: confusion(&pred, &run.labels),
                        predictions: opts.keep_predictions.then_some(pred),
                    })
                })
                .collect()
        })
        .collect();

    match per_triple {
        Ok(groups) => {
            let evaluations: Vec<Evaluation> = groups.into_iter().flatten().collect();
            let n = evaluations.len() as f64;
            let mean = evaluations.iter().map(|e| e.accuracy).sum::<f64>() / n;
            let var = evaluations.iter().map(|e| (e.accuracy - mean).powi(2)).sum::<f64>() / n;
            let mut pooled = [[0u64; 3]; 3];
            for e in &evaluations {
                for (t, row) in e.confusion.iter().enumerate() {
                    for (p, v) in row.iter().enumerate() {
                        pooled[t][p] += v;
                    }
                }
            }
            let total: u64 = pooled.iter().flatten().sum();
            let hits: u64 = (0..3).map(|i| pooled[i][i]).sum();
            CellResult {
                key: *key,
                evaluations,
                mean_acc: mean,
                std_acc: var.sqrt(),
                weighted_acc: hits as f64 / total as f64,
                confusion: pooled,
                failure: None,
            }
        }
        Err(e) => CellResult {
            key: *key,
            evaluations: Vec::new(),
            mean_acc: f64::NAN,
            std_acc: f64::NAN,
            weighted_acc: f64::NAN,
            confusion: [[0; 3]; 3],
            failure: Some(e.to_string()),
        },
    }
}

pub fn run_sweep(runs: &[PreparedRun], grid: &SweepGrid, opts: &SweepOptions) -> Result<SweepReport> {
    let ids: Vec<usize> = runs.iter().map(|r| r.id).collect();
    let plan = enumerate_splits(&ids)?;
    let by_id: BTreeMap<usize, &PreparedRun> = runs.iter().map(|r| (r.id, r)).collect();
    if grid.memories.iter().any(|&n| n < 1) {
        return Err(Error::Invariant("memory lengths must be >= 1".into()));
    }

    let keys = grid.cells();
    let mut unique: Vec<CellKey> = keys.iter().map(CellKey::canonical).collect();
    unique.sort();
    unique.dedup();
    let computed: BTreeMap<CellKey, CellResult> = unique
        .par_iter()
        .map(|k| (*k, run_cell(&by_id, &plan, k, opts)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect();

    let cells: Vec<CellResult> = keys
        .iter()
        .map(|k| CellResult {
            key: *k,
            ..computed[&k.canonical()].clone()
        })
        .collect();
    for c in &cells {
        if let Some(f) = &c.failure {
            log::warn!("cell {} failed: {f}", c.key.label());
        }
    }
    let best = best_memories(&cells);
    Ok(SweepReport { cells, best })
}

/// Per (classifier, scaler, features, source) the memory length with the
/// highest mean accuracy; ties go to the shorter memory.
fn best_memories(cells: &[CellResult]) -> Vec<BestMemory> {
    let mut groups: BTreeMap<(Algorithm, ScalerKind, FeatureSet, Source), BestMemory> = BTreeMap::new();
    for c in cells.iter().filter(|c| c.failure.is_none()) {
        let k = c.key;
        let entry = groups
            .entry((k.classifier, k.scaler, k.features, k.source))
            .or_insert(BestMemory {
                classifier: k.classifier,
                scaler: k.scaler,
                features: k.features,
                source: k.source,
                memory: k.memory,
                mean_acc: c.mean_acc,
            });
        if c.mean_acc > entry.mean_acc || (c.mean_acc == entry.mean_acc && k.memory < entry.memory) {
            entry.memory = k.memory;
            entry.mean_acc = c.mean_acc;
        }
    }
    groups.into_values().collect()
}

impl SweepReport {
    pub fn cell(&self, key: &CellKey) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.key == *key)
    }

    pub fn best_for(
        &self,
        classifier: Algorithm,
        scaler: ScalerKind,
        features: FeatureSet,
        source: Source,
    ) -> Option<&BestMemory> {
        self.best.iter().find(|b| {
            b.classifier == classifier && b.scaler == scaler && b.features == features && b.source == source
        })
    }

    pub fn failures(&self) -> Vec<&CellResult> {
        self.cells.iter().filter(|c| c.failure.is_some()).collect()
    }

    /// `classifier,scaler,features,N,source,mean_acc,std_acc`; failed cells leave the scores empty.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let wrap = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(["classifier", "scaler", "features", "N", "source", "mean_acc", "std_acc"])
            .map_err(wrap)?;
        for c in &self.cells {
            let k = c.key;
            let (m, s) = if c.failure.is_some() {
                (String::new(), String::new())
            } else {
                (c.mean_acc.to_string(), c.std_acc.to_string())
            };
            w.write_record([
                k.classifier.name().to_string(),
                k.scaler.name().to_string(),
                k.features.name().to_string(),
                k.memory.to_string(),
                k.source.name().to_string(),
                m,
                s,
            ])
            .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
