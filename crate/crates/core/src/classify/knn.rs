use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::sq_dist_bounded;
use crate::error::{Error, Result};
use crate::features::Matrix;
use crate::model::ZoneLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnParams {
    pub k: usize,
}

impl Default for KnnParams {
    fn default() -> Self {
        KnnParams { k: 5 }
    }
}

/// Brute-force Euclidean nearest-neighbour voter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub rows: Matrix,
    pub labels: Vec<ZoneLabel>,
}

impl KnnModel {
    pub fn fit(rows: &Matrix, labels: &[ZoneLabel], params: &KnnParams) -> Result<Self> {
        if params.k < 1 {
            return Err(Error::Invariant("k must be >= 1".into()));
        }
        if params.k > rows.rows() {
            return Err(Error::Invariant(format!(
                "k = {} exceeds training size {}",
                params.k,
                rows.rows()
            )));
        }
        Ok(KnnModel {
            k: params.k,
            rows: rows.clone(),
            labels: labels.to_vec(),
        })
    }

    pub fn width(&self) -> usize {
        self.rows.cols()
    }

    /// Orders candidates by distance, then label, then row contents, so that
    /// the chosen neighbourhood never depends on training-row order.
    fn compare(&self, a: &(f64, usize), b: &(f64, usize)) -> Ordering {
        a.0.total_cmp(&b.0)
            .then_with(|| self.labels[a.1].cmp(&self.labels[b.1]))
            .then_with(|| {
                let (ra, rb) = (self.rows.row(a.1), self.rows.row(b.1));
                ra.iter()
                    .zip(rb)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
    }

    pub fn predict_one(&self, query: &[f64]) -> ZoneLabel {
        self.search(query, 0).0
    }

    /// Label and nearest row index. Scanning starts at `start` and wraps; the
    /// result does not depend on it, but a close start prunes more.
    fn search(&self, query: &[f64], start: usize) -> (ZoneLabel, usize) {
        // The k best so far, kept sorted; candidates farther than the current
        // k-th are abandoned part way through the distance sum.
        let k = self.k;
        let n = self.rows.rows();
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for i in (start..n).chain(0..start.min(n)) {
            let r = self.rows.row(i);
            let bound = if best.len() < k { f64::INFINITY } else { best[k - 1].0 };
            let Some(d) = sq_dist_bounded(r, query, bound) else {
                continue;
            };
            let cand = (d, i);
            if best.len() == k {
                if self.compare(&cand, &best[k - 1]).is_ge() {
                    continue;
                }
                best.pop();
            }
            let at = best.partition_point(|b| self.compare(b, &cand).is_lt());
            best.insert(at, cand);
        }

        let mut votes = [0usize; 3];
        for &(_, i) in &best {
            votes[self.labels[i].index()] += 1;
        }
        let top = *votes.iter().max().expect("three classes");
        // Among tied classes the nearest neighbour decides.
        let label = best
            .iter()
            .map(|&(_, i)| self.labels[i])
            .find(|l| votes[l.index()] == top)
            .expect("at least one neighbour");
        (label, best[0].1)
    }

    pub fn predict(&self, rows: &Matrix) -> Vec<ZoneLabel> {
        let mut start = 0;
        rows.iter_rows()
            .map(|r| {
                let (label, nearest) = self.search(r, start);
                start = nearest;
                label
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_of_five() {
        let rows = Matrix::new(
            6,
            1,
            vec![0.1, 0.2, -0.3, 0.4, 0.5, 10.0],
        );
        use ZoneLabel::*;
        let labels = vec![Inside, Inside, Inside, Inside, Outside, Outside];
        let m = KnnModel::fit(&rows, &labels, &KnnParams::default()).unwrap();
        assert_eq!(m.predict_one(&[0.0]), Inside);
    }

    #[test]
    fn class_tie_goes_to_nearest() {
        use ZoneLabel::*;
        let rows = Matrix::new(4, 1, vec![1.0, -2.0, 3.0, -4.0]);
        let labels = vec![Outside, Inside, Outside, Inside];
        let m = KnnModel::fit(&rows, &labels, &KnnParams { k: 4 }).unwrap();
        assert_eq!(m.predict_one(&[0.0]), Outside);
        assert_eq!(m.predict_one(&[-0.9]), Inside);
    }

    #[test]
    fn k_bounds() {
        let rows = Matrix::new(2, 1, vec![0.0, 1.0]);
        let labels = vec![ZoneLabel::Inside, ZoneLabel::Outside];
        assert!(KnnModel::fit(&rows, &labels, &KnnParams { k: 0 }).is_err());
        assert!(KnnModel::fit(&rows, &labels, &KnnParams { k: 3 }).is_err());
    }
}
