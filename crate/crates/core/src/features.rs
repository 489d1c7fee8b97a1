//! Feature construction for the zone classifiers: per-tick base features from
//! filter estimates or raw RSSI, sliding memory windows, and the prescalers.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::channel::percentile_sorted;
use crate::error::{Error, Result};
use crate::model::{MeasurementSeries, SensorArray, ZoneLabel};
use crate::pf::EstimateTrack;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape does not match data");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::WidthMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix::new(rows.len(), cols, data))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Appends the rows of `other`, which must share the column count.
    pub fn extend(&mut self, other: &Matrix) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            *self = other.clone();
            return Ok(());
        }
        if other.cols != self.cols {
            return Err(Error::WidthMismatch {
                expected: self.cols,
                got: other.cols,
            });
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    /// Keeps every `stride`-th row starting at row 0.
    pub fn take_every(&self, stride: usize) -> Matrix {
        let stride = stride.max(1);
        let mut data = Vec::with_capacity(self.data.len() / stride + self.cols);
        let mut rows = 0;
        for i in (0..self.rows).step_by(stride) {
            data.extend_from_slice(self.row(i));
            rows += 1;
        }
        Matrix::new(rows, self.cols, data)
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    FilterEstimates,
    RawRssi,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::FilterEstimates => "filtered",
            Source::RawRssi => "raw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "filtered" => Some(Source::FilterEstimates),
            "raw" => Some(Source::RawRssi),
            _ => None,
        }
    }
}

/// How position uncertainty enters the features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spread {
    #[default]
    Variance,
    StdDev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub use_pos_mean: bool,
    pub use_pos_var: bool,
    pub use_vel_mean: bool,
    pub source: Source,
    pub spread: Spread,
}

/// The three estimate-based feature combinations compared in the evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    Pos,
    PosVar,
    PosVarVel,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 3] = [FeatureSet::Pos, FeatureSet::PosVar, FeatureSet::PosVarVel];

    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::Pos => "pos",
            FeatureSet::PosVar => "pos_var",
            FeatureSet::PosVarVel => "pos_var_vel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        FeatureSet::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn selection(self, source: Source) -> FeatureSelection {
        FeatureSelection {
            use_pos_mean: true,
            use_pos_var: matches!(self, FeatureSet::PosVar | FeatureSet::PosVarVel),
            use_vel_mean: matches!(self, FeatureSet::PosVarVel),
            source,
            spread: Spread::Variance,
        }
    }
}

impl FeatureSelection {
    pub fn width(&self) -> usize {
        [self.use_pos_mean, self.use_pos_var, self.use_vel_mean]
            .iter()
            .filter(|&&b| b)
            .count()
    }
}

/// Per-tick (mu_px, var_px, mu_vx) restricted to the selected columns, in that order.
pub fn build_feature_track(track: &EstimateTrack, sel: &FeatureSelection) -> Result<Matrix> {
    if sel.source != Source::FilterEstimates {
        return Err(Error::Invariant(
            "raw-RSSI features are built from measurements, not estimates".into(),
        ));
    }
    let width = sel.width();
    if width == 0 {
        return Err(Error::Empty("feature selection"));
    }
    let mut data = Vec::with_capacity(track.len() * width);
    for e in &track.estimates {
        if sel.use_pos_mean {
            data.push(e.mean.p_x);
        }
        if sel.use_pos_var {
            data.push(match sel.spread {
                Spread::Variance => e.var_p,
                Spread::StdDev => e.var_p.sqrt(),
            });
        }
        if sel.use_vel_mean {
            data.push(e.mean.v_x);
        }
    }
    Ok(Matrix::new(track.len(), width, data))
}

/// One column per sensor in array order; missing readings take the sensor's floor.
pub fn build_raw_track(series: &MeasurementSeries, array: &SensorArray) -> Matrix {
    let width = array.len();
    let mut data = Vec::with_capacity(series.len() * width);
    for frame in &series.frames {
        for s in array.sensors() {
            data.push(frame.reading(s.id).unwrap_or(s.floor_dbm));
        }
    }
    Matrix::new(series.len(), width, data)
}

/// Row `t` concatenates base rows `t-N+1 ..= t`, oldest first. Rows before
/// `N-1` are padded by repeating row 0.
pub fn toeplitz_window(base: &Matrix, memory: usize) -> Result<Matrix> {
    if memory < 1 {
        return Err(Error::Invariant("memory length must be >= 1".into()));
    }
    let width = base.cols() * memory;
    let mut out = Matrix::zeros(base.rows(), width);
    for t in 0..base.rows() {
        let row = out.row_mut(t);
        for k in 0..memory {
            let src = (t + k + 1).saturating_sub(memory);
            row[k * base.cols()..(k + 1) * base.cols()].copy_from_slice(base.row(src));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFeatureMatrix {
    pub features: Matrix,
    pub labels: Vec<ZoneLabel>,
    pub n_base_features: usize,
    pub memory: usize,
}

impl LabeledFeatureMatrix {
    pub fn new(features: Matrix, labels: Vec<ZoneLabel>, n_base_features: usize, memory: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::LengthMismatch(features.rows(), labels.len()));
        }
        if features.cols() != n_base_features * memory {
            return Err(Error::WidthMismatch {
                expected: n_base_features * memory,
                got: features.cols(),
            });
        }
        Ok(LabeledFeatureMatrix {
            features,
            labels,
            n_base_features,
            memory,
        })
    }

    /// CSV with header `f0..f{k-1},label`.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let wrap = |e: csv::Error| Error::Parse(e.to_string());
        let mut header: Vec<String> = (0..self.features.cols()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(wrap)?;
        for (row, label) in self.features.iter_rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
            rec.push((*label as u8).to_string());
            w.write_record(&rec).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalerKind {
    Standard,
    Robust,
    Power,
}

impl ScalerKind {
    pub fn name(self) -> &'static str {
        match self {
            ScalerKind::Standard => "standard",
            ScalerKind::Robust => "robust",
            ScalerKind::Power => "power",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ScalerKind::Standard, ScalerKind::Robust, ScalerKind::Power]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

/// Per-feature affine parameters, optionally preceded by a Yeo-Johnson power map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub center: f64,
    pub scale: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub kind: ScalerKind,
    pub params: Vec<FeatureScale>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn nonzero(scale: f64) -> f64 {
    if scale > 0.0 && scale.is_finite() {
        scale
    } else {
        1.0
    }
}

pub fn fit_scaler(kind: ScalerKind, rows: &Matrix) -> Result<Scaler> {
    if rows.rows() < 2 {
        return Err(Error::Empty("scaler needs at least two training rows"));
    }
    if rows.has_non_finite() {
        return Err(Error::NonFinite("scaler training rows"));
    }
    let params = (0..rows.cols())
        .map(|j| {
            let col = rows.column(j);
            match kind {
                ScalerKind::Standard => {
                    let (mean, std) = mean_std(&col);
                    FeatureScale {
                        center: mean,
                        scale: nonzero(std),
                        lambda: None,
                    }
                }
                ScalerKind::Robust => {
                    let mut sorted = col;
                    sorted.sort_by(f64::total_cmp);
                    let median = percentile_sorted(&sorted, 50.0);
                    let iqr = percentile_sorted(&sorted, 75.0) - percentile_sorted(&sorted, 25.0);
                    FeatureScale {
                        center: median,
                        scale: nonzero(iqr),
                        lambda: None,
                    }
                }
                ScalerKind::Power => {
                    let lambda = fit_yeo_johnson_lambda(&col);
                    let transformed: Vec<f64> = col.iter().map(|&x| yeo_johnson(x, lambda)).collect();
                    let (mean, std) = mean_std(&transformed);
                    FeatureScale {
                        center: mean,
                        scale: nonzero(std),
                        lambda: Some(lambda),
                    }
                }
            }
        })
        .collect();
    Ok(Scaler { kind, params })
}

impl Scaler {
    pub fn width(&self) -> usize {
        self.params.len()
    }

    pub fn apply(&self, rows: &Matrix) -> Result<Matrix> {
        if rows.cols() != self.width() {
            return Err(Error::WidthMismatch {
                expected: self.width(),
                got: rows.cols(),
            });
        }
        if rows.has_non_finite() {
            return Err(Error::NonFinite("scaler input"));
        }
        let mut out = rows.clone();
        for i in 0..out.rows() {
            for (x, p) in out.row_mut(i).iter_mut().zip(&self.params) {
                let v = match p.lambda {
                    Some(l) => yeo_johnson(*x, l),
                    None => *x,
                };
                *x = (v - p.center) / p.scale;
            }
        }
        Ok(out)
    }

    /// Undoes the affine part. Power scalers are not inverted.
    pub fn inverse(&self, rows: &Matrix) -> Result<Matrix> {
        if self.kind == ScalerKind::Power {
            return Err(Error::Invariant("power transform inverse is not supported".into()));
        }
        if rows.cols() != self.width() {
            return Err(Error::WidthMismatch {
                expected: self.width(),
                got: rows.cols(),
            });
        }
        let mut out = rows.clone();
        for i in 0..out.rows() {
            for (x, p) in out.row_mut(i).iter_mut().zip(&self.params) {
                *x = *x * p.scale + p.center;
            }
        }
        Ok(out)
    }

    /// Scaler for windowed rows built from a scaler fitted on base rows.
    pub fn tiled(&self, memory: usize) -> Scaler {
        Scaler {
            kind: self.kind,
            params: (0..memory).flat_map(|_| self.params.iter().copied()).collect(),
        }
    }
}

pub fn yeo_johnson(x: f64, lambda: f64) -> f64 {
    if x >= 0.0 {
        if lambda.abs() < 1e-12 {
            x.ln_1p()
        } else {
            ((x + 1.0).powf(lambda) - 1.0) / lambda
        }
    } else if (lambda - 2.0).abs() < 1e-12 {
        -(-x).ln_1p()
    } else {
        -((1.0 - x).powf(2.0 - lambda) - 1.0) / (2.0 - lambda)
    }
}

/// Profile log-likelihood of a Yeo-Johnson transform under a normal model.
pub fn yeo_johnson_log_likelihood(xs: &[f64], lambda: f64) -> f64 {
    let n = xs.len() as f64;
    let t: Vec<f64> = xs.iter().map(|&x| yeo_johnson(x, lambda)).collect();
    let (_, std) = mean_std(&t);
    let var = std * std;
    if !(var > 0.0) || !var.is_finite() {
        return f64::NEG_INFINITY;
    }
    let jacobian: f64 = xs.iter().map(|&x| x.signum() * x.abs().ln_1p()).sum();
    -0.5 * n * var.ln() + (lambda - 1.0) * jacobian
}

const LAMBDA_BOUNDS: (f64, f64) = (-5.0, 5.0);
const LAMBDA_TOL: f64 = 1e-4;

/// Maximum-likelihood lambda by golden-section search. Constant data gets lambda = 1.
pub fn fit_yeo_johnson_lambda(xs: &[f64]) -> f64 {
    let first = xs[0];
    if xs.iter().all(|&x| x == first) {
        return 1.0;
    }
    let f = |l: f64| -yeo_johnson_log_likelihood(xs, l);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LAMBDA_BOUNDS;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > LAMBDA_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}
