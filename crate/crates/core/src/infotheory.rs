//! Entropy, exact mutual information over finite tables, and Kvalseth's
//! normalized mutual information between feature columns.
//!
//! Pairwise feature NMI is estimated by discretizing each column. A column
//! with at most `B = min(ceil(sqrt(m)), 30)` distinct values is used as-is;
//! anything richer is cut into `B` quantile bins. Quantile bins depend only
//! on ranks, so the estimate is invariant under strictly monotone transforms.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

const SUM_TOLERANCE: f64 = 1e-9;
const MAX_BINS: usize = 30;

#[derive(Debug, Error, PartialEq)]
pub enum InfoError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("sample vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
}

fn check_probabilities(p: &[f64]) -> Result<(), InfoError> {
    if p.is_empty() {
        return Err(InfoError::InvalidDistribution("empty support".into()));
    }
    if let Some(bad) = p.iter().find(|&&x| !x.is_finite() || x < 0.0) {
        return Err(InfoError::InvalidDistribution(format!("bad probability {bad}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(InfoError::InvalidDistribution(format!("probabilities sum to {sum}")));
    }
    Ok(())
}

/// Probabilities over a finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, InfoError> {
        check_probabilities(&probs)?;
        Ok(DiscreteDistribution { probs })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution needs a non-empty support");
        DiscreteDistribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self, InfoError> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(InfoError::InvalidDistribution(
                "weights must be non-negative with a positive sum".into(),
            ));
        }
        Ok(DiscreteDistribution {
            probs: weights.iter().map(|w| w / total).collect(),
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Shannon entropy in bits of raw probabilities, with 0 log 0 = 0.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    h.max(0.0)
}

pub fn entropy(dist: &DiscreteDistribution) -> f64 {
    entropy_bits(dist.probabilities())
}

/// Joint distribution over a finite `rows x cols` table.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    rows: usize,
    cols: usize,
    probs: Vec<f64>,
}

impl JointDistribution {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self, InfoError> {
        let rows = table.len();
        let cols = table.first().map_or(0, Vec::len);
        if table.iter().any(|r| r.len() != cols) {
            return Err(InfoError::InvalidDistribution("ragged table".into()));
        }
        let probs: Vec<f64> = table.into_iter().flatten().collect();
        check_probabilities(&probs)?;
        Ok(JointDistribution { rows, cols, probs })
    }

    /// Empirical joint of two label sequences.
    pub fn from_counts(counts: &[Vec<f64>]) -> Result<Self, InfoError> {
        let total: f64 = counts.iter().flatten().sum();
        if !(total > 0.0) {
            return Err(InfoError::InvalidDistribution("empty count table".into()));
        }
        JointDistribution::new(counts.iter().map(|r| r.iter().map(|c| c / total).collect()).collect())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.probs[r * self.cols + c]
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self.get(r, c)).sum())
            .collect()
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self.get(r, c)).sum())
            .collect()
    }
}

/// `I = H(rows) - sum_c p(c) H(rows | c)`, evaluated directly on the table.
pub fn exact_mi(joint: &JointDistribution) -> f64 {
    let h_rows = entropy_bits(&joint.row_marginal());
    let conditional: f64 = joint
        .col_marginal()
        .iter()
        .enumerate()
        .filter(|(_, &pc)| pc > 0.0)
        .map(|(c, &pc)| {
            let column: Vec<f64> = (0..joint.rows).map(|r| joint.get(r, c) / pc).collect();
            pc * entropy_bits(&column)
        })
        .sum();
    (h_rows - conditional).max(0.0)
}

/// A feature column reduced to category labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    labels: Vec<u16>,
    categories: usize,
    entropy: f64,
}

impl Discretized {
    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn entropy(&self) -> f64 {
        self.entropy
    }

    pub fn is_constant(&self) -> bool {
        self.categories <= 1
    }
}

/// Number of bins used for `m` samples.
pub fn bin_count(m: usize) -> usize {
    ((m as f64).sqrt().ceil() as usize).clamp(1, MAX_BINS)
}

/// Labels each sample by its distinct value when there are few of them,
/// otherwise by quantile bin.
pub fn discretize(xs: &[f64]) -> Discretized {
    let bins = bin_count(xs.len());
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup_by(|a, b| a == b);

    let labels: Vec<u16> = if distinct.len() <= bins {
        xs.iter().map(|x| distinct.partition_point(|d| d < x) as u16).collect()
    } else {
        let m = sorted.len();
        let edges: Vec<f64> = (1..bins).map(|k| sorted[k * m / bins]).collect();
        xs.iter().map(|x| edges.partition_point(|e| e <= x) as u16).collect()
    };
    // Compact to the labels actually used.
    let mut remap: HashMap<u16, u16> = HashMap::new();
    let mut used: Vec<u16> = labels.clone();
    used.sort_unstable();
    used.dedup();
    for (new, old) in used.iter().enumerate() {
        remap.insert(*old, new as u16);
    }
    let labels: Vec<u16> = labels.iter().map(|l| remap[l]).collect();
    let categories = used.len();
    let mut counts = vec![0.0; categories];
    for &l in &labels {
        counts[l as usize] += 1.0;
    }
    let n = labels.len() as f64;
    let probs: Vec<f64> = counts.iter().map(|c| c / n).collect();
    Discretized {
        labels,
        categories,
        entropy: entropy_bits(&probs),
    }
}

/// Plug-in mutual information between two label sequences.
pub fn label_mi(x: &Discretized, y: &Discretized) -> f64 {
    let mut counts = vec![0.0; x.categories * y.categories];
    for (&a, &b) in x.labels.iter().zip(&y.labels) {
        counts[a as usize * y.categories + b as usize] += 1.0;
    }
    let n = x.labels.len() as f64;
    let px: Vec<f64> = {
        let mut v = vec![0.0; x.categories];
        for &a in &x.labels {
            v[a as usize] += 1.0 / n;
        }
        v
    };
    let py: Vec<f64> = {
        let mut v = vec![0.0; y.categories];
        for &b in &y.labels {
            v[b as usize] += 1.0 / n;
        }
        v
    };
    let mut mi = 0.0;
    for a in 0..x.categories {
        for b in 0..y.categories {
            let c = counts[a * y.categories + b];
            if c > 0.0 {
                let p = c / n;
                mi += p * (p / (px[a] * py[b])).log2();
            }
        }
    }
    mi.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nmi {
    pub value: f64,
    /// Set when either feature is constant; the value is then 0.
    pub degenerate: bool,
}

fn nmi_of(x: &Discretized, y: &Discretized) -> Nmi {
    if x.is_constant() || y.is_constant() {
        return Nmi {
            value: 0.0,
            degenerate: true,
        };
    }
    let denom = x.entropy.max(y.entropy);
    Nmi {
        value: (label_mi(x, y) / denom).clamp(0.0, 1.0),
        degenerate: false,
    }
}

/// `I(x; y) / max{H(x), H(y)}` estimated from paired samples.
pub fn nmi_max(xs: &[f64], ys: &[f64]) -> Result<Nmi, InfoError> {
    if xs.len() != ys.len() {
        return Err(InfoError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(InfoError::TooFewSamples(xs.len()));
    }
    Ok(nmi_of(&discretize(xs), &discretize(ys)))
}

/// Anything that can answer pairwise NMI queries by feature index.
pub trait PairwiseNmi {
    fn nmi(&self, i: usize, j: usize) -> f64;
    fn feature_count(&self) -> usize;
}

/// Discretized feature columns; NMI computed on demand.
#[derive(Debug, Clone)]
pub struct DiscretizedFeatures {
    columns: Vec<Discretized>,
}

impl DiscretizedFeatures {
    /// `columns[f]` holds feature `f` across all traces.
    pub fn new(columns: &[Vec<f64>]) -> Result<Self, InfoError> {
        let m = columns.first().map_or(0, Vec::len);
        if m < 2 {
            return Err(InfoError::TooFewSamples(m));
        }
        if let Some(c) = columns.iter().find(|c| c.len() != m) {
            return Err(InfoError::LengthMismatch(m, c.len()));
        }
        Ok(DiscretizedFeatures {
            columns: columns.par_iter().map(|c| discretize(c)).collect(),
        })
    }

    pub fn column(&self, f: usize) -> &Discretized {
        &self.columns[f]
    }

    pub fn nmi_pair(&self, i: usize, j: usize) -> Nmi {
        if i == j && !self.columns[i].is_constant() {
            return Nmi {
                value: 1.0,
                degenerate: false,
            };
        }
        nmi_of(&self.columns[i], &self.columns[j])
    }
}

impl PairwiseNmi for DiscretizedFeatures {
    fn nmi(&self, i: usize, j: usize) -> f64 {
        self.nmi_pair(i, j).value
    }

    fn feature_count(&self) -> usize {
        self.columns.len()
    }
}

/// Symmetric matrix of pairwise NMI values.
#[derive(Debug, Clone, PartialEq)]
pub struct NmiMatrix {
    n: usize,
    values: Vec<f64>,
    degenerate: Vec<bool>,
}

impl NmiMatrix {
    pub fn from_values(n: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n * n);
        NmiMatrix {
            n,
            values,
            degenerate: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Features that are constant over the samples.
    pub fn degenerate(&self) -> &[bool] {
        &self.degenerate
    }

    /// `D = 1 - M`.
    pub fn distance(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| 1.0 - self.get(i, j)).collect())
            .collect()
    }

    /// Restriction to the given feature indices, in the given order.
    pub fn submatrix(&self, idx: &[usize]) -> NmiMatrix {
        NmiMatrix {
            n: idx.len(),
            values: idx
                .iter()
                .flat_map(|&i| idx.iter().map(move |&j| (i, j)))
                .map(|(i, j)| self.get(i, j))
                .collect(),
            degenerate: idx.iter().map(|&i| self.degenerate[i]).collect(),
        }
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        assert_eq!(names.len(), self.n);
        let mut out = String::from("feature");
        for name in names {
            let _ = write!(out, ",{name}");
        }
        out.push('\n');
        for (i, name) in names.iter().enumerate() {
            out.push_str(name);
            for j in 0..self.n {
                let _ = write!(out, ",{}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }
}

impl PairwiseNmi for NmiMatrix {
    fn nmi(&self, i: usize, j: usize) -> f64 {
        self.get(i, j)
    }

    fn feature_count(&self) -> usize {
        self.n
    }
}

/// Full NMI matrix over feature columns (`columns[f]` across traces).
pub fn nmi_matrix(columns: &[Vec<f64>]) -> Result<NmiMatrix, InfoError> {
    let features = DiscretizedFeatures::new(columns)?;
    Ok(features.matrix(&(0..columns.len()).collect::<Vec<_>>()))
}

impl DiscretizedFeatures {
    /// NMI matrix over a subset of features, each pair computed once.
    pub fn matrix(&self, idx: &[usize]) -> NmiMatrix {
        let n = idx.len();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a..n).map(move |b| (a, b))).collect();
        let computed: Vec<f64> = pairs.par_iter().map(|&(a, b)| self.nmi(idx[a], idx[b])).collect();
        let mut values = vec![0.0; n * n];
        for (&(a, b), &v) in pairs.iter().zip(&computed) {
            values[a * n + b] = v;
            values[b * n + a] = v;
        }
        NmiMatrix {
            n,
            values,
            degenerate: idx.iter().map(|&i| self.columns[i].is_constant()).collect(),
        }
    }
}
