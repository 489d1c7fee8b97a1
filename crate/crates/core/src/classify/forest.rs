//! Gini decision trees and a bagged forest of them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::features::Matrix;
use crate::model::ZoneLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// None grows until leaves are pure.
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: None,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        label: ZoneLabel,
    },
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

type Counts = [usize; 3];

fn counts_of(idx: &[usize], labels: &[ZoneLabel]) -> Counts {
    let mut c = [0; 3];
    for &i in idx {
        c[labels[i].index()] += 1;
    }
    c
}

fn gini(c: &Counts, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - c.iter().map(|&k| (k as f64 / n).powi(2)).sum::<f64>()
}

/// Majority class; ties go to the smallest label.
fn majority(c: &Counts) -> ZoneLabel {
    let mut best = 0;
    for k in 1..3 {
        if c[k] > c[best] {
            best = k;
        }
    }
    ZoneLabel::from_index(best).expect("three classes")
}

struct SplitChoice {
    feature: usize,
    /// Rows with rank at or below this go left.
    rank: u32,
    threshold: f64,
    impurity: f64,
}

/// Training columns as dense ranks; equal values share a rank.
struct Columns {
    ranks: Vec<Vec<u32>>,
    /// Distinct values of each column in ascending order, indexed by rank.
    values: Vec<Vec<f64>>,
}

impl Columns {
    fn of(rows: &Matrix) -> Self {
        let mut ranks = Vec::with_capacity(rows.cols());
        let mut values = Vec::with_capacity(rows.cols());
        for j in 0..rows.cols() {
            let col = rows.column(j);
            let mut order: Vec<usize> = (0..col.len()).collect();
            order.sort_unstable_by(|&a, &b| col[a].total_cmp(&col[b]));
            let mut rank = vec![0u32; col.len()];
            let mut distinct: Vec<f64> = Vec::new();
            for &i in &order {
                if distinct.last() != Some(&col[i]) {
                    distinct.push(col[i]);
                }
                rank[i] = (distinct.len() - 1) as u32;
            }
            ranks.push(rank);
            values.push(distinct);
        }
        Columns { ranks, values }
    }

    fn len(&self) -> usize {
        self.ranks.len()
    }
}

struct Builder<'a> {
    columns: &'a Columns,
    labels: &'a [ZoneLabel],
    max_features: usize,
    max_depth: Option<usize>,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    features: Vec<usize>,
    /// Packed `rank << 2 | label` keys for the node being split.
    scratch: Vec<u32>,
}

impl Builder<'_> {
    /// Best threshold on one feature, or None when the feature is constant here.
    fn best_on_feature(&mut self, idx: &[usize], feature: usize, parent: &Counts) -> Option<SplitChoice> {
        let ranks = &self.columns.ranks[feature];
        let first = ranks[idx[0]];
        if idx.iter().all(|&i| ranks[i] == first) {
            return None;
        }
        let buf = &mut self.scratch;
        buf.clear();
        buf.extend(idx.iter().map(|&i| ranks[i] << 2 | self.labels[i].index() as u32));
        buf.sort_unstable();

        let n = buf.len();
        let mut left = [0usize; 3];
        let mut best: Option<(u32, u32, f64)> = None;
        for pos in 0..n - 1 {
            left[(buf[pos] & 3) as usize] += 1;
            let (a, b) = (buf[pos] >> 2, buf[pos + 1] >> 2);
            if a == b {
                continue;
            }
            let nl = pos + 1;
            let nr = n - nl;
            let right = [parent[0] - left[0], parent[1] - left[1], parent[2] - left[2]];
            let impurity = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
            if best.is_none_or(|s| impurity < s.2) {
                best = Some((a, b, impurity));
            }
        }
        best.map(|(ra, rb, impurity)| {
            let values = &self.columns.values[feature];
            let (a, b) = (values[ra as usize], values[rb as usize]);
            let mut threshold = a + (b - a) / 2.0;
            if threshold >= b {
                threshold = a;
            }
            SplitChoice {
                feature,
                rank: ra,
                threshold,
                impurity,
            }
        })
    }

    fn grow(&mut self, idx: &[usize], depth: usize) -> u32 {
        let counts = counts_of(idx, self.labels);
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf {
            label: majority(&counts),
        });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || idx.len() < 2 || self.max_depth.is_some_and(|d| depth >= d) {
            return id;
        }

        // Draw features in random order; constant ones do not use up the budget.
        self.features.shuffle(&mut self.rng);
        let mut visited = 0;
        let mut best: Option<SplitChoice> = None;
        for k in 0..self.features.len() {
            if visited >= self.max_features {
                break;
            }
            let f = self.features[k];
            if let Some(choice) = self.best_on_feature(idx, f, &counts) {
                visited += 1;
                if best.as_ref().is_none_or(|b| choice.impurity < b.impurity) {
                    best = Some(choice);
                }
            }
        }
        let Some(split) = best else {
            return id;
        };

        let ranks = &self.columns.ranks[split.feature];
        let (left, right): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| ranks[i] <= split.rank);
        let l = self.grow(&left, depth + 1);
        let r = self.grow(&right, depth + 1);
        self.nodes[id as usize] = Node::Split {
            feature: split.feature as u32,
            threshold: split.threshold,
            left: l,
            right: r,
        };
        id
    }
}

impl DecisionTree {
    /// Grows a tree over the given sample indices (duplicates allowed).
    pub fn fit_indices(
        rows: &Matrix,
        labels: &[ZoneLabel],
        sample: Vec<usize>,
        max_features: usize,
        max_depth: Option<usize>,
        rng: ChaCha8Rng,
    ) -> Self {
        Self::fit_columns(&Columns::of(rows), labels, sample, max_features, max_depth, rng)
    }

    fn fit_columns(
        columns: &Columns,
        labels: &[ZoneLabel],
        sample: Vec<usize>,
        max_features: usize,
        max_depth: Option<usize>,
        rng: ChaCha8Rng,
    ) -> Self {
        let mut b = Builder {
            columns,
            labels,
            max_features: max_features.max(1),
            max_depth,
            rng,
            nodes: Vec::new(),
            features: (0..columns.len()).collect(),
            scratch: Vec::with_capacity(sample.len()),
        };
        b.grow(&sample, 0);
        DecisionTree { nodes: b.nodes }
    }

    /// A single tree over every row, considering all features at each split.
    pub fn fit(rows: &Matrix, labels: &[ZoneLabel], seed: u64) -> Self {
        DecisionTree::fit_indices(
            rows,
            labels,
            (0..rows.rows()).collect(),
            rows.cols(),
            None,
            ChaCha8Rng::seed_from_u64(seed),
        )
    }

    pub fn predict_one(&self, x: &[f64]) -> ZoneLabel {
        let mut at = 0usize;
        loop {
            match self.nodes[at] {
                Node::Leaf { label } => return label,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + walk(nodes, left as usize).max(walk(nodes, right as usize))
                }
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub width: usize,
    pub trees: Vec<DecisionTree>,
}

impl ForestModel {
    pub fn fit(rows: &Matrix, labels: &[ZoneLabel], params: &ForestParams, seed: u64) -> Result<Self> {
        if params.n_trees < 1 {
            return Err(crate::error::Error::Invariant("n_trees must be >= 1".into()));
        }
        let n = rows.rows();
        let max_features = (rows.cols() as f64).sqrt().ceil() as usize;
        let columns = Columns::of(rows);
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64 + 1);
                let sample: Vec<usize> = if params.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                DecisionTree::fit_columns(&columns, labels, sample, max_features, params.max_depth, rng)
            })
            .collect();
        Ok(ForestModel {
            width: rows.cols(),
            trees,
        })
    }

    pub fn votes(&self, x: &[f64]) -> [usize; 3] {
        let mut v = [0; 3];
        for t in &self.trees {
            v[t.predict_one(x).index()] += 1;
        }
        v
    }

    pub fn predict_one(&self, x: &[f64]) -> ZoneLabel {
        plurality(&self.votes(x))
    }

    pub fn predict(&self, rows: &Matrix) -> Vec<ZoneLabel> {
        rows.iter_rows().map(|r| self.predict_one(r)).collect()
    }
}

/// Most-voted label; ties go to the smallest label value.
pub fn plurality(votes: &[usize; 3]) -> ZoneLabel {
    majority(votes)
}
