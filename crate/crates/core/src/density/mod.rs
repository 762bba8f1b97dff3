//! Adaptive kernel density estimation of per-website feature distributions.
//!
//! Every observation carries its own per-dimension bandwidth: values judged
//! discrete get the constant [`DISCRETE_BANDWIDTH`], all others the
//! continuous bandwidth selected for that dimension. This lets one model
//! represent purely continuous, purely discrete and mixed features (for
//! example a transmission time that is pinned to a padding threshold for
//! short pages and free otherwise).
//!
//! Multivariate models use a diagonal product of Gaussian kernels.
//! Densities are accumulated in log space.

mod bandwidth;

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bandwidth::{
    continuous_bandwidth, rule_of_thumb, sheather_jones, Bandwidth, BandwidthMethod, DISCRETE_BANDWIDTH,
};

/// Repetition threshold above which a value is treated as discrete.
pub const DEFAULT_BETA: usize = 10;

/// Version tag written into serialized models.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite sample value {0}")]
    NonFinite(f64),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// Canonical bit pattern for exact value comparison (folds -0.0 into 0.0).
fn key(v: f64) -> u64 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureNature {
    Continuous,
    /// Every observed value is discrete.
    Discrete,
    /// Only the listed values (sorted) are discrete.
    Mixed {
        discrete_values: Vec<f64>,
    },
}

impl FeatureNature {
    pub fn is_discrete_value(&self, v: f64) -> bool {
        match self {
            FeatureNature::Continuous => false,
            FeatureNature::Discrete => true,
            FeatureNature::Mixed { discrete_values } => {
                discrete_values.binary_search_by(|probe| probe.total_cmp(&v)).is_ok()
                    || (v == 0.0 && discrete_values.contains(&0.0))
            }
        }
    }
}

/// Classifies a feature from its samples. Values repeated more than `beta`
/// times are discrete, as is `template` (a value known to be a padding
/// artefact) whenever it occurs.
pub fn classify_nature(samples: &[f64], beta: usize, template: Option<f64>) -> Result<FeatureNature, DensityError> {
    if samples.len() < 2 {
        return Err(DensityError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    if let Some(&bad) = samples.iter().find(|v| !v.is_finite()) {
        return Err(DensityError::NonFinite(bad));
    }
    let mut counts: HashMap<u64, (f64, usize)> = HashMap::new();
    for &v in samples {
        counts.entry(key(v)).or_insert((v, 0)).1 += 1;
    }
    let mut discrete: Vec<f64> = counts
        .values()
        .filter(|(v, c)| *c > beta || template.is_some_and(|t| key(t) == key(*v)))
        .map(|(v, _)| if *v == 0.0 { 0.0 } else { *v })
        .collect();
    discrete.sort_by(f64::total_cmp);
    Ok(if discrete.is_empty() {
        FeatureNature::Continuous
    } else if discrete.len() == counts.len() {
        FeatureNature::Discrete
    } else {
        FeatureNature::Mixed {
            discrete_values: discrete,
        }
    })
}

/// Bandwidth for the continuous observations of a feature. Discrete
/// features get the constant; mixed features are bandwidth-selected on their
/// non-discrete values only.
pub fn select_bandwidth(samples: &[f64], nature: &FeatureNature) -> Result<Bandwidth, DensityError> {
    match nature {
        FeatureNature::Discrete => Ok(Bandwidth::discrete()),
        FeatureNature::Continuous => {
            if samples.len() < 2 {
                return Err(DensityError::TooFewSamples {
                    needed: 2,
                    got: samples.len(),
                });
            }
            Ok(continuous_bandwidth(samples))
        }
        FeatureNature::Mixed { .. } => {
            let free: Vec<f64> = samples
                .iter()
                .copied()
                .filter(|&v| !nature.is_discrete_value(v))
                .collect();
            let bw = continuous_bandwidth(&free);
            if bw.is_flagged() {
                // Too few continuous values to estimate a spread on their own.
                if let Some(h) = rule_of_thumb(samples) {
                    return Ok(Bandwidth {
                        value: h,
                        method: BandwidthMethod::RuleOfThumb,
                    });
                }
            }
            Ok(bw)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelRepr {
    version: u32,
    dim: usize,
    natures: Vec<FeatureNature>,
    dimension_bandwidths: Vec<Bandwidth>,
    /// Distinct observations, row-major `atoms x dim`.
    observations: Vec<f64>,
    /// Per-observation, per-dimension bandwidths, row-major.
    bandwidths: Vec<f64>,
    /// Per-observation, per-dimension discrete flags, row-major.
    discrete: Vec<bool>,
    /// Multiplicity of each distinct observation.
    counts: Vec<u64>,
}

/// Fitted adaptive KDE. Identical observations are stored once with a
/// multiplicity, which leaves the density unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct KernelModel {
    repr: ModelRepr,
    total: u64,
    /// log(count / m) - sum_d log(h_d) - d/2 log(2 pi), per atom.
    log_coef: Vec<f64>,
    inv_bandwidths: Vec<f64>,
    cumulative: Vec<u64>,
}

impl TryFrom<ModelRepr> for KernelModel {
    type Error = DensityError;

    fn try_from(repr: ModelRepr) -> Result<Self, Self::Error> {
        let bad = |msg: &str| Err(DensityError::InvalidModel(msg.to_string()));
        if repr.version != MODEL_FORMAT_VERSION {
            return bad("unsupported model format version");
        }
        let d = repr.dim;
        let atoms = repr.counts.len();
        if d == 0 || atoms == 0 {
            return bad("empty model");
        }
        if repr.observations.len() != atoms * d
            || repr.bandwidths.len() != atoms * d
            || repr.discrete.len() != atoms * d
            || repr.natures.len() != d
            || repr.dimension_bandwidths.len() != d
        {
            return bad("inconsistent array lengths");
        }
        if repr.bandwidths.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
            return bad("bandwidths must be positive");
        }
        if repr.counts.contains(&0) {
            return bad("zero multiplicity");
        }
        let total: u64 = repr.counts.iter().sum();
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let log_coef = repr
            .counts
            .iter()
            .zip(repr.bandwidths.chunks(d))
            .map(|(&c, hs)| {
                (c as f64 / total as f64).ln() - hs.iter().map(|h| h.ln()).sum::<f64>() - d as f64 * half_log_2pi
            })
            .collect();
        let inv_bandwidths = repr.bandwidths.iter().map(|h| 1.0 / h).collect();
        let cumulative = repr
            .counts
            .iter()
            .scan(0u64, |acc, &c| {
                *acc += c;
                Some(*acc)
            })
            .collect();
        Ok(KernelModel {
            repr,
            total,
            log_coef,
            inv_bandwidths,
            cumulative,
        })
    }
}

impl From<KernelModel> for ModelRepr {
    fn from(model: KernelModel) -> Self {
        model.repr
    }
}

/// Fits a model on `rows` (m observations of dimension d) given each
/// dimension's nature. Discrete observations in a dimension receive the
/// discrete bandwidth, the rest the dimension's continuous bandwidth.
pub fn fit_akde(rows: &[Vec<f64>], natures: &[FeatureNature]) -> Result<KernelModel, DensityError> {
    let first = rows.first().ok_or(DensityError::TooFewSamples { needed: 1, got: 0 })?;
    let d = first.len();
    if d == 0 {
        return Err(DensityError::DimensionMismatch { expected: 1, got: 0 });
    }
    if natures.len() != d {
        return Err(DensityError::DimensionMismatch {
            expected: d,
            got: natures.len(),
        });
    }
    for row in rows {
        if row.len() != d {
            return Err(DensityError::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if let Some(&bad) = row.iter().find(|v| !v.is_finite()) {
            return Err(DensityError::NonFinite(bad));
        }
    }
    let mut dimension_bandwidths = Vec::with_capacity(d);
    for (j, nature) in natures.iter().enumerate() {
        let column: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let bw = match nature {
            FeatureNature::Continuous if column.len() < 2 => Bandwidth {
                value: DISCRETE_BANDWIDTH,
                method: BandwidthMethod::Degenerate,
            },
            _ => select_bandwidth(&column, nature)?,
        };
        dimension_bandwidths.push(bw);
    }

    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut repr = ModelRepr {
        version: MODEL_FORMAT_VERSION,
        dim: d,
        natures: natures.to_vec(),
        dimension_bandwidths: dimension_bandwidths.clone(),
        observations: Vec::new(),
        bandwidths: Vec::new(),
        discrete: Vec::new(),
        counts: Vec::new(),
    };
    for row in rows {
        let k: Vec<u64> = row.iter().map(|&v| key(v)).collect();
        if let Some(&atom) = index.get(&k) {
            repr.counts[atom] += 1;
            continue;
        }
        index.insert(k, repr.counts.len());
        for (j, &v) in row.iter().enumerate() {
            let bw = dimension_bandwidths[j];
            let discrete = bw.method == BandwidthMethod::DiscreteConstant
                || bw.method == BandwidthMethod::Degenerate
                || natures[j].is_discrete_value(v);
            repr.observations.push(if v == 0.0 { 0.0 } else { v });
            repr.discrete.push(discrete);
            repr.bandwidths
                .push(if discrete { DISCRETE_BANDWIDTH } else { bw.value });
        }
        repr.counts.push(1);
    }
    KernelModel::try_from(repr)
}

/// Classifies every dimension with [`classify_nature`] and fits. Single
/// observations are treated as discrete.
pub fn fit_akde_auto(rows: &[Vec<f64>], beta: usize) -> Result<KernelModel, DensityError> {
    let first = rows.first().ok_or(DensityError::TooFewSamples { needed: 1, got: 0 })?;
    let natures = (0..first.len())
        .map(|j| {
            if rows.len() < 2 {
                return Ok(FeatureNature::Discrete);
            }
            let column: Vec<f64> = rows.iter().map(|r| r.get(j).copied().unwrap_or(f64::NAN)).collect();
            classify_nature(&column, beta, None)
        })
        .collect::<Result<Vec<_>, _>>()?;
    fit_akde(rows, &natures)
}

impl KernelModel {
    pub fn dim(&self) -> usize {
        self.repr.dim
    }

    /// Number of observations the model was fitted on.
    pub fn observations(&self) -> u64 {
        self.total
    }

    pub fn natures(&self) -> &[FeatureNature] {
        &self.repr.natures
    }

    pub fn dimension_bandwidths(&self) -> &[Bandwidth] {
        &self.repr.dimension_bandwidths
    }

    /// Distinct observations with their per-dimension bandwidths and
    /// multiplicities.
    pub fn atoms(&self) -> impl Iterator<Item = (&[f64], &[f64], u64)> {
        let d = self.repr.dim;
        self.repr
            .observations
            .chunks(d)
            .zip(self.repr.bandwidths.chunks(d))
            .zip(&self.repr.counts)
            .map(|((p, h), &c)| (p, h, c))
    }

    fn check_dim(&self, point: &[f64]) -> Result<(), DensityError> {
        if point.len() != self.repr.dim {
            return Err(DensityError::DimensionMismatch {
                expected: self.repr.dim,
                got: point.len(),
            });
        }
        Ok(())
    }

    /// Natural log of the density at `point`.
    pub fn log_pdf(&self, point: &[f64]) -> Result<f64, DensityError> {
        self.check_dim(point)?;
        Ok(self.log_pdf_unchecked(point))
    }

    pub(crate) fn log_pdf_unchecked(&self, point: &[f64]) -> f64 {
        let d = self.repr.dim;
        let obs = &self.repr.observations;
        let inv = &self.inv_bandwidths;
        // Streaming log-sum-exp.
        let mut best = f64::NEG_INFINITY;
        let mut acc = 0.0;
        for (a, coef) in self.log_coef.iter().enumerate() {
            let base = a * d;
            let mut q = 0.0;
            for j in 0..d {
                let z = (point[j] - obs[base + j]) * inv[base + j];
                q += z * z;
            }
            let term = coef - 0.5 * q;
            if term > best {
                acc = acc * (best - term).exp() + 1.0;
                best = term;
            } else {
                acc += (term - best).exp();
            }
        }
        best + acc.ln()
    }

    pub fn pdf(&self, point: &[f64]) -> Result<f64, DensityError> {
        Ok(self.log_pdf(point)?.exp())
    }

    /// Draws one point: an observation chosen uniformly, plus Gaussian noise
    /// with its bandwidth in every continuous dimension. Discrete dimensions
    /// return the observed value exactly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.repr.dim;
        let u = rng.random_range(0..self.total);
        let atom = self.cumulative.partition_point(|&c| c <= u);
        let base = atom * d;
        (0..d)
            .map(|j| {
                let v = self.repr.observations[base + j];
                if self.repr.discrete[base + j] {
                    v
                } else {
                    let noise = Normal::new(0.0, self.repr.bandwidths[base + j]).expect("positive bandwidth");
                    v + noise.sample(rng)
                }
            })
            .collect()
    }

    /// `n` samples from a ChaCha stream seeded with `seed`.
    pub fn sample_seeded(&self, seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DensityError> {
        serde_json::from_str(text).map_err(|e| DensityError::InvalidModel(e.to_string()))
    }
}
