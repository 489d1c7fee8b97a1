//! RBF support vector classifier trained by sequential minimal optimization.
//!
//! Each binary machine solves the C-SVC dual
//!
//! ```text
//! min_a 1/2 a'Qa - e'a   s.t.  y'a = 0,  0 <= a_i <= C,   Q_ij = y_i y_j K(x_i, x_j)
//! ```
//!
//! picking the maximal violating pair each iteration. Three classes are
//! handled one-vs-one with voting.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sq_dist;
use crate::error::{Error, Result};
use crate::features::Matrix;
use crate::model::ZoneLabel;

const TAU: f64 = 1e-12;
/// Kernel rows kept per binary machine, in bytes.
const CACHE_BYTES: usize = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    pub c: f64,
    /// None selects 1 / (d * mean feature variance) from the training rows.
    pub gamma: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 1.0,
            gamma: None,
            tol: 1e-3,
            max_iter: 100_000,
        }
    }
}

#[inline]
pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-gamma * sq_dist(a, b)).exp()
}

/// 1 / (d * mean of per-feature population variances).
pub fn default_gamma(rows: &Matrix) -> f64 {
    let d = rows.cols();
    let n = rows.rows() as f64;
    let mean_var = (0..d)
        .map(|j| {
            let col = rows.column(j);
            let m = col.iter().sum::<f64>() / n;
            col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
        })
        .sum::<f64>()
        / d as f64;
    if mean_var > 0.0 && mean_var.is_finite() {
        1.0 / (d as f64 * mean_var)
    } else {
        1.0
    }
}

struct KernelRows<'a> {
    rows: Vec<&'a [f64]>,
    gamma: f64,
    cache: HashMap<usize, Vec<f64>>,
    order: std::collections::VecDeque<usize>,
    capacity: usize,
    diag: Vec<f64>,
}

impl<'a> KernelRows<'a> {
    fn new(rows: Vec<&'a [f64]>, gamma: f64) -> Self {
        let n = rows.len().max(1);
        let diag = vec![1.0; rows.len()];
        KernelRows {
            rows,
            gamma,
            cache: HashMap::new(),
            order: std::collections::VecDeque::new(),
            capacity: (CACHE_BYTES / (n * 8)).max(2),
            diag,
        }
    }

    fn row(&mut self, i: usize) -> &[f64] {
        if !self.cache.contains_key(&i) {
            if self.cache.len() >= self.capacity {
                if let Some(old) = self.order.pop_front() {
                    self.cache.remove(&old);
                }
            }
            let xi = self.rows[i];
            let g = self.gamma;
            let r: Vec<f64> = self.rows.iter().map(|xj| rbf(xi, xj, g)).collect();
            self.cache.insert(i, r);
            self.order.push_back(i);
        }
        &self.cache[&i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMachine {
    /// Label receiving y = +1.
    pub positive: ZoneLabel,
    pub negative: ZoneLabel,
    /// Indices into the model's support-vector matrix.
    pub support: Vec<u32>,
    /// y_i * alpha_i for each support vector.
    pub coef: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct BinarySolution {
    alpha: Vec<f64>,
    rho: f64,
    iterations: usize,
    converged: bool,
}

fn solve_binary(rows: Vec<&[f64]>, y: &[f64], params: &SvmParams, gamma: f64) -> BinarySolution {
    let n = rows.len();
    let c = params.c;
    let mut kernel = KernelRows::new(rows, gamma);
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];

    let is_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let is_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iter {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if is_up(alpha[t], y[t]) && v > gmax {
                gmax = v;
                i = t;
            }
            if is_low(alpha[t], y[t]) && v < gmin {
                gmin = v;
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < params.tol {
            converged = true;
            break;
        }
        iterations += 1;

        let kij = kernel.row(i)[j];
        let (kii, kjj) = (kernel.diag[i], kernel.diag[j]);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (kii + kjj - 2.0 * kij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (kii + kjj - 2.0 * kij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let di = (alpha[i] - old_i) * y[i];
        let dj = (alpha[j] - old_j) * y[j];
        let ki = kernel.row(i).to_vec();
        let kj = kernel.row(j);
        for t in 0..n {
            grad[t] += y[t] * (ki[t] * di + kj[t] * dj);
        }
    }
    if !converged {
        log::warn!(
            "SMO stopped at the iteration cap ({}) before reaching tolerance {}",
            params.max_iter,
            params.tol
        );
    }

    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut free = 0usize;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    let rho = if free > 0 {
        free_sum / free as f64
    } else {
        (ub + lb) / 2.0
    };
    BinarySolution {
        alpha,
        rho,
        iterations,
        converged,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub gamma: f64,
    pub c: f64,
    pub support_vectors: Matrix,
    pub machines: Vec<BinaryMachine>,
}

impl SvmModel {
    pub fn fit(rows: &Matrix, labels: &[ZoneLabel], params: &SvmParams) -> Result<Self> {
        if !(params.c > 0.0) {
            return Err(Error::Invariant("C must be > 0".into()));
        }
        let gamma = params.gamma.unwrap_or_else(|| default_gamma(rows));
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Invariant("gamma must be > 0".into()));
        }
        let mut classes: Vec<ZoneLabel> = labels.to_vec();
        classes.sort();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::SingleClass);
        }
        let pairs: Vec<(ZoneLabel, ZoneLabel)> = classes
            .iter()
            .enumerate()
            .flat_map(|(a, &pa)| classes[a + 1..].iter().map(move |&pb| (pa, pb)))
            .collect();

        let solved: Vec<(Vec<usize>, BinarySolution)> = pairs
            .par_iter()
            .map(|&(pos, neg)| {
                let idx: Vec<usize> = (0..labels.len())
                    .filter(|&i| labels[i] == pos || labels[i] == neg)
                    .collect();
                let y: Vec<f64> = idx
                    .iter()
                    .map(|&i| if labels[i] == pos { 1.0 } else { -1.0 })
                    .collect();
                let sub: Vec<&[f64]> = idx.iter().map(|&i| rows.row(i)).collect();
                let sol = solve_binary(sub, &y, params, gamma);
                (idx, sol)
            })
            .collect();

        // Shared support-vector table in training-row order.
        let mut used = vec![false; rows.rows()];
        for (idx, sol) in &solved {
            for (k, &i) in idx.iter().enumerate() {
                if sol.alpha[k] > 0.0 {
                    used[i] = true;
                }
            }
        }
        let mut slot = vec![u32::MAX; rows.rows()];
        let mut sv_data = Vec::new();
        let mut count = 0u32;
        for (i, &u) in used.iter().enumerate() {
            if u {
                slot[i] = count;
                count += 1;
                sv_data.extend_from_slice(rows.row(i));
            }
        }
        let machines = pairs
            .iter()
            .zip(solved)
            .map(|(&(positive, negative), (idx, sol))| {
                let mut support = Vec::new();
                let mut coef = Vec::new();
                for (k, &i) in idx.iter().enumerate() {
                    if sol.alpha[k] > 0.0 {
                        support.push(slot[i]);
                        let y = if labels[i] == positive { 1.0 } else { -1.0 };
                        coef.push(y * sol.alpha[k]);
                    }
                }
                BinaryMachine {
                    positive,
                    negative,
                    support,
                    coef,
                    rho: sol.rho,
                    iterations: sol.iterations,
                    converged: sol.converged,
                }
            })
            .collect();
        Ok(SvmModel {
            gamma,
            c: params.c,
            support_vectors: Matrix::new(count as usize, rows.cols(), sv_data),
            machines,
        })
    }

    pub fn width(&self) -> usize {
        self.support_vectors.cols()
    }

    /// Decision values of every machine for one row; positive favours `positive`.
    pub fn decision_values(&self, x: &[f64]) -> Vec<f64> {
        let k: Vec<f64> = self
            .support_vectors
            .iter_rows()
            .map(|sv| rbf(sv, x, self.gamma))
            .collect();
        self.machines
            .iter()
            .map(|m| {
                m.support
                    .iter()
                    .zip(&m.coef)
                    .map(|(&s, &c)| c * k[s as usize])
                    .sum::<f64>()
                    - m.rho
            })
            .collect()
    }

    pub fn predict_one(&self, x: &[f64]) -> ZoneLabel {
        let mut votes = [0usize; 3];
        let mut strength = [0.0f64; 3];
        for (m, f) in self.machines.iter().zip(self.decision_values(x)) {
            let winner = if f > 0.0 { m.positive } else { m.negative };
            votes[winner.index()] += 1;
            strength[winner.index()] += f.abs();
        }
        let mut best = 0;
        for k in 1..3 {
            if votes[k] > votes[best] || (votes[k] == votes[best] && strength[k] > strength[best]) {
                best = k;
            }
        }
        ZoneLabel::from_index(best).expect("three classes")
    }

    pub fn predict(&self, rows: &Matrix) -> Vec<ZoneLabel> {
        rows.iter_rows().map(|r| self.predict_one(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(n: usize, gap: f64, seed: u64) -> (Matrix, Vec<ZoneLabel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let side = if i % 2 == 0 { 1.0 } else { -1.0 };
            data.push(side * (gap / 2.0 + rng.random_range(0.0..1.0)));
            data.push(rng.random_range(-1.0..1.0));
            labels.push(if side > 0.0 { ZoneLabel::Outside } else { ZoneLabel::Inside });
        }
        (Matrix::new(n, 2, data), labels)
    }

    #[test]
    fn separable_blobs_are_fit_exactly() {
        let (x, y) = blobs(80, 2.0, 3);
        let m = SvmModel::fit(&x, &y, &SvmParams::default()).unwrap();
        assert_eq!(m.machines.len(), 1);
        assert!(m.machines[0].converged);
        assert_eq!(m.predict(&x), y);
        let s: f64 = m.machines[0].coef.iter().sum();
        assert!(s.abs() < 1e-6);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Matrix::new(3, 1, vec![0.0, 1.0, 2.0]);
        let y = vec![ZoneLabel::Inside; 3];
        assert!(matches!(SvmModel::fit(&x, &y, &SvmParams::default()), Err(Error::SingleClass)));
    }

    #[test]
    fn iteration_cap_is_non_fatal() {
        let (x, y) = blobs(60, -0.5, 9);
        let params = SvmParams {
            max_iter: 3,
            ..SvmParams::default()
        };
        let m = SvmModel::fit(&x, &y, &params).unwrap();
        assert!(!m.machines[0].converged);
        assert_eq!(m.machines[0].iterations, 3);
    }

    #[test]
    fn default_gamma_uses_mean_variance() {
        let x = Matrix::new(2, 2, vec![0.0, 0.0, 2.0, 4.0]);
        // variances 1 and 4, mean 2.5, d = 2
        assert!((default_gamma(&x) - 1.0 / 5.0).abs() < 1e-15);
    }
}
