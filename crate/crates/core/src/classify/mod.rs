//! Zone classifiers: k-nearest neighbours, a Gini random forest and an RBF
//! support vector machine, behind one train/predict surface.

mod forest;
mod knn;
mod svm;

pub use forest::{plurality, DecisionTree, ForestModel, ForestParams, Node};
pub use knn::{KnnModel, KnnParams};
pub use svm::{default_gamma, rbf, BinaryMachine, SvmModel, SvmParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{LabeledFeatureMatrix, Matrix};
use crate::model::ZoneLabel;

/// Squared Euclidean distance with eight fixed-order partial sums, so the
/// loop vectorizes while the result stays independent of the platform.
#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist_bounded(a, b, f64::INFINITY).expect("unbounded")
}

/// As `sq_dist`, but gives up with None once the running sum exceeds `bound`.
/// Lane sums only grow, so a returned value equals `sq_dist` exactly.
#[inline]
pub(crate) fn sq_dist_bounded(a: &[f64], b: &[f64], bound: f64) -> Option<f64> {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let combine = |acc: &[f64; 8]| ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (n, (x, y)) in ca.zip(cb).enumerate() {
        for k in 0..8 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
        if n % 4 == 3 && combine(&acc) > bound {
            return None;
        }
    }
    let total = combine(&acc) + tail;
    (total <= bound).then_some(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Knn,
    Forest,
    Svm,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Svm, Algorithm::Knn, Algorithm::Forest];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Knn => "knn",
            Algorithm::Forest => "rf",
            Algorithm::Svm => "svm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "knn" => Some(Algorithm::Knn),
            "rf" | "forest" => Some(Algorithm::Forest),
            "svm" => Some(Algorithm::Svm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub knn: KnnParams,
    pub forest: ForestParams,
    pub svm: SvmParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", content = "parameters", rename_all = "snake_case")]
pub enum Model {
    Knn(KnnModel),
    Forest(ForestModel),
    Svm(SvmModel),
}

impl Model {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            Model::Knn(_) => Algorithm::Knn,
            Model::Forest(_) => Algorithm::Forest,
            Model::Svm(_) => Algorithm::Svm,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Model::Knn(m) => m.width(),
            Model::Forest(m) => m.width,
            Model::Svm(m) => m.width(),
        }
    }
}

pub fn train_rows(
    algorithm: Algorithm,
    rows: &Matrix,
    labels: &[ZoneLabel],
    hp: &Hyperparams,
    seed: u64,
) -> Result<Model> {
    if rows.rows() != labels.len() {
        return Err(Error::LengthMismatch(rows.rows(), labels.len()));
    }
    if rows.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if rows.has_non_finite() {
        return Err(Error::NonFinite("training features"));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::SingleClass);
    }
    Ok(match algorithm {
        Algorithm::Knn => Model::Knn(KnnModel::fit(rows, labels, &hp.knn)?),
        Algorithm::Forest => Model::Forest(ForestModel::fit(rows, labels, &hp.forest, seed)?),
        Algorithm::Svm => Model::Svm(SvmModel::fit(rows, labels, &hp.svm)?),
    })
}

pub fn train(algorithm: Algorithm, data: &LabeledFeatureMatrix, hp: &Hyperparams, seed: u64) -> Result<Model> {
    train_rows(algorithm, &data.features, &data.labels, hp, seed)
}

pub fn predict(model: &Model, rows: &Matrix) -> Result<Vec<ZoneLabel>> {
    if rows.cols() != model.width() {
        return Err(Error::WidthMismatch {
            expected: model.width(),
            got: rows.cols(),
        });
    }
    if rows.has_non_finite() {
        return Err(Error::NonFinite("prediction features"));
    }
    Ok(match model {
        Model::Knn(m) => m.predict(rows),
        Model::Forest(m) => m.predict(rows),
        Model::Svm(m) => m.predict(rows),
    })
}
