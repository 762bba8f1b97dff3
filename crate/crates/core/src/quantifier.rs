//! Monte Carlo estimation of the information a fingerprint leaks about the
//! visited website.
//!
//! Every class (website, or the lumped non-monitored outcome) is described
//! by a [`FactorizedModel`]: the features are split into groups assumed
//! independent given the class, each group with its own adaptive KDE. The
//! conditional entropy `H(C | F)` is estimated by drawing `k` points from
//! `p(f)`, allocating `k * Pr(c)` of them to class `c`, and averaging the
//! entropy of the posterior at each point.
//!
//! Sample `i` always uses ChaCha stream `i` of the configured seed, so the
//! result does not depend on how the work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{fit_akde_auto, DensityError, KernelModel};
use crate::features::{Category, FeatureTable, TableError, FEATURE_COUNT};
use crate::infotheory::{entropy, entropy_bits, DiscreteDistribution, InfoError};

pub const DEFAULT_MC_SAMPLES: usize = 5000;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Info(#[from] InfoError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("class {0} has no observations to fit")]
    NoModel(String),
    #[error("prior has {got} entries for {expected} classes")]
    PriorMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub k: usize,
    pub seed: u64,
}

impl McConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        McConfig { k, seed }
    }
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            k: DEFAULT_MC_SAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakageEstimate {
    pub bits: f64,
    pub mc_standard_error: f64,
    pub samples_used: usize,
    /// Points where every class density underflowed; the prior was used.
    pub degenerate_samples: usize,
    /// Entropy of the outcome prior, the ceiling on `bits`.
    pub prior_entropy: f64,
}

/// Zipf prior `Pr(r) ∝ 1 / r` over the given ranks.
pub fn zipf_prior(ranks: &[u64]) -> Result<DiscreteDistribution, QuantError> {
    if ranks.is_empty() {
        return Err(QuantError::Config("no ranks".into()));
    }
    let mut seen = ranks.to_vec();
    seen.sort_unstable();
    if seen[0] == 0 {
        return Err(QuantError::Config("ranks must be positive".into()));
    }
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(QuantError::Config("duplicate rank".into()));
    }
    let weights: Vec<f64> = ranks.iter().map(|&r| 1.0 / r as f64).collect();
    Ok(DiscreteDistribution::from_weights(&weights)?)
}

/// How website priors are assigned; Zipf ranks follow website order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorSpec {
    Uniform,
    Zipf,
    Explicit(Vec<f64>),
}

impl PriorSpec {
    pub fn resolve(&self, n: usize) -> Result<DiscreteDistribution, QuantError> {
        match self {
            PriorSpec::Uniform => {
                if n == 0 {
                    return Err(QuantError::Config("no websites".into()));
                }
                Ok(DiscreteDistribution::uniform(n))
            }
            PriorSpec::Zipf => zipf_prior(&(1..=n as u64).collect::<Vec<_>>()),
            PriorSpec::Explicit(p) => {
                if p.len() != n {
                    return Err(QuantError::PriorMismatch {
                        expected: n,
                        got: p.len(),
                    });
                }
                Ok(DiscreteDistribution::new(p.clone())?)
            }
        }
    }
}

/// Splits `k` samples across classes in proportion to `prior` by the
/// largest-remainder method; ties go to the lower class index. The counts
/// always sum to `k`.
pub fn allocate_samples(prior: &[f64], k: usize) -> Vec<usize> {
    let quotas: Vec<f64> = prior.iter().map(|p| p * k as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..prior.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().take(k.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub probs: Vec<f64>,
    /// Every likelihood vanished; `probs` is the prior.
    pub degenerate: bool,
}

/// `Pr(c | f) ∝ prior(c) * exp(loglik(c))`, normalized in log space.
pub fn posterior_from_log_likelihoods(loglik: &[f64], prior: &[f64]) -> Posterior {
    let scores: Vec<f64> = loglik
        .iter()
        .zip(prior)
        .map(|(&l, &p)| if p > 0.0 { l + p.ln() } else { f64::NEG_INFINITY })
        .collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return Posterior {
            probs: prior.to_vec(),
            degenerate: true,
        };
    }
    let weights: Vec<f64> = scores.iter().map(|s| (s - best).exp()).collect();
    let total: f64 = weights.iter().sum();
    Posterior {
        probs: weights.iter().map(|w| w / total).collect(),
        degenerate: false,
    }
}

/// Per-class densities factorized over disjoint feature groups.
///
/// Points live in a compact space: the features of group 0, then group 1,
/// and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedModel {
    groups: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    labels: Vec<String>,
    models: Vec<Vec<KernelModel>>,
}

fn offsets_of(groups: &[Vec<usize>]) -> Vec<usize> {
    std::iter::once(0)
        .chain(groups.iter().scan(0, |acc, g| {
            *acc += g.len();
            Some(*acc)
        }))
        .collect()
}

fn check_groups(groups: &[Vec<usize>]) -> Result<(), QuantError> {
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(QuantError::Config("groups must be non-empty".into()));
    }
    let mut all: Vec<usize> = groups.iter().flatten().copied().collect();
    all.sort_unstable();
    if all.windows(2).any(|w| w[0] == w[1]) {
        return Err(QuantError::Config("groups overlap".into()));
    }
    Ok(())
}

impl FactorizedModel {
    /// Assembles a model from already fitted per-class group densities.
    pub fn new(
        groups: Vec<Vec<usize>>,
        labels: Vec<String>,
        models: Vec<Vec<KernelModel>>,
    ) -> Result<Self, QuantError> {
        check_groups(&groups)?;
        if labels.len() != models.len() || models.is_empty() {
            return Err(QuantError::Config("one label per class required".into()));
        }
        for class in &models {
            if class.len() != groups.len() || class.iter().zip(&groups).any(|(m, g)| m.dim() != g.len()) {
                return Err(QuantError::Config("class models do not match the groups".into()));
            }
        }
        Ok(FactorizedModel {
            offsets: offsets_of(&groups),
            groups,
            labels,
            models,
        })
    }

    /// Fits one model per class and group. `class_rows[c]` holds full
    /// feature rows, indexed by the feature numbers in `groups`.
    pub fn fit_rows(
        labels: Vec<String>,
        class_rows: &[Vec<&[f64]>],
        groups: &[Vec<usize>],
        beta: usize,
    ) -> Result<Self, QuantError> {
        check_groups(groups)?;
        let jobs: Vec<(usize, usize)> = (0..class_rows.len())
            .flat_map(|c| (0..groups.len()).map(move |g| (c, g)))
            .collect();
        let fitted: Vec<Result<KernelModel, QuantError>> = jobs
            .par_iter()
            .map(|&(c, g)| {
                if class_rows[c].is_empty() {
                    return Err(QuantError::NoModel(labels[c].clone()));
                }
                let rows: Vec<Vec<f64>> = class_rows[c]
                    .iter()
                    .map(|r| groups[g].iter().map(|&f| r[f]).collect())
                    .collect();
                Ok(fit_akde_auto(&rows, beta)?)
            })
            .collect();
        let mut models: Vec<Vec<KernelModel>> = vec![Vec::with_capacity(groups.len()); class_rows.len()];
        for ((c, _), m) in jobs.into_iter().zip(fitted) {
            models[c].push(m?);
        }
        FactorizedModel::new(groups.to_vec(), labels, models)
    }

    /// One class per website of the table.
    pub fn fit(table: &FeatureTable, groups: &[Vec<usize>], beta: usize) -> Result<Self, QuantError> {
        if let Some(&bad) = groups.iter().flatten().find(|&&f| f >= table.width()) {
            return Err(QuantError::Config(format!("feature {bad} out of range")));
        }
        let rows: Vec<Vec<&[f64]>> = table
            .classes()
            .iter()
            .map(|c| c.rows.iter().map(Vec::as_slice).collect())
            .collect();
        FactorizedModel::fit_rows(table.websites(), &rows, groups, beta)
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.models.len()
    }

    /// Dimension of the compact point space.
    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn class_models(&self, class: usize) -> &[KernelModel] {
        &self.models[class]
    }

    /// Draws a compact point from class `class`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        let mut point = Vec::with_capacity(self.dim());
        for m in &self.models[class] {
            point.extend(m.sample(rng));
        }
        point
    }

    /// Sum of per-group log densities of `class` at a compact point.
    pub fn log_likelihood(&self, class: usize, point: &[f64]) -> f64 {
        self.models[class]
            .iter()
            .enumerate()
            .map(|(g, m)| m.log_pdf_unchecked(&point[self.offsets[g]..self.offsets[g + 1]]))
            .sum()
    }

    pub fn posterior(&self, prior: &DiscreteDistribution, point: &[f64]) -> Result<Posterior, QuantError> {
        self.check_prior(prior.len())?;
        if point.len() != self.dim() {
            return Err(DensityError::DimensionMismatch {
                expected: self.dim(),
                got: point.len(),
            }
            .into());
        }
        let ll: Vec<f64> = (0..self.class_count()).map(|c| self.log_likelihood(c, point)).collect();
        Ok(posterior_from_log_likelihoods(&ll, prior.probabilities()))
    }

    fn check_prior(&self, n: usize) -> Result<(), QuantError> {
        if n != self.class_count() {
            return Err(QuantError::PriorMismatch {
                expected: self.class_count(),
                got: n,
            });
        }
        Ok(())
    }

    /// Appends the classes of `other`, which must share the grouping.
    pub fn merged(mut self, other: FactorizedModel) -> Result<FactorizedModel, QuantError> {
        if self.groups != other.groups {
            return Err(QuantError::Config(
                "cannot merge models with different groupings".into(),
            ));
        }
        self.labels.extend(other.labels);
        self.models.extend(other.models);
        Ok(self)
    }
}

/// Core estimator. `outcome[c]` maps class `c` to the outcome whose
/// uncertainty is measured; posteriors are summed within an outcome.
fn mc_leakage(
    model: &FactorizedModel,
    prior: &[f64],
    outcome: &[usize],
    outcomes: usize,
    mc: McConfig,
) -> Result<LeakageEstimate, QuantError> {
    if mc.k == 0 {
        return Err(QuantError::Config("k must be at least 1".into()));
    }
    model.check_prior(prior.len())?;
    let mut outcome_prior = vec![0.0; outcomes];
    for (c, &p) in prior.iter().enumerate() {
        outcome_prior[outcome[c]] += p;
    }
    let h_prior = entropy_bits(&outcome_prior);

    let alloc = allocate_samples(prior, mc.k);
    let owners: Vec<usize> = alloc
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let draws: Vec<(f64, bool)> = owners
        .par_iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
            rng.set_stream(i as u64);
            let point = model.sample(c, &mut rng);
            let ll: Vec<f64> = (0..model.class_count())
                .map(|j| model.log_likelihood(j, &point))
                .collect();
            let post = posterior_from_log_likelihoods(&ll, prior);
            let mut lumped = vec![0.0; outcomes];
            for (j, p) in post.probs.iter().enumerate() {
                lumped[outcome[j]] += p;
            }
            (entropy_bits(&lumped), post.degenerate)
        })
        .collect();

    let k = owners.len() as f64;
    let mut start = 0;
    let mut h_cond = 0.0;
    let mut variance = 0.0;
    for &n in &alloc {
        if n == 0 {
            continue;
        }
        let hs: Vec<f64> = draws[start..start + n].iter().map(|d| d.0).collect();
        start += n;
        let weight = n as f64 / k;
        h_cond += weight * crate::stats::mean(&hs);
        let s = crate::stats::std_sample(&hs);
        variance += weight * weight * s * s / n as f64;
    }
    Ok(LeakageEstimate {
        bits: (h_prior - h_cond).max(0.0),
        mc_standard_error: variance.sqrt(),
        samples_used: owners.len(),
        degenerate_samples: draws.iter().filter(|d| d.1).count(),
        prior_entropy: h_prior,
    })
}

/// `I(C; F) = H(C) - H(C | F)` over the classes of `model`.
pub fn closed_world_leakage(
    model: &FactorizedModel,
    prior: &DiscreteDistribution,
    mc: McConfig,
) -> Result<LeakageEstimate, QuantError> {
    let identity: Vec<usize> = (0..model.class_count()).collect();
    let est = mc_leakage(model, prior.probabilities(), &identity, model.class_count(), mc)?;
    debug_assert!((est.prior_entropy - entropy(prior)).abs() < 1e-9);
    Ok(est)
}

/// `I(O; F)` where the outcome is a monitored website or "non-monitored".
///
/// `prior` covers the monitored classes followed by the non-monitored ones.
/// With a single pooled non-monitored class this is the pooled-density
/// mode; with one class per non-monitored website, their posteriors are
/// summed into the lumped outcome.
pub fn open_world_leakage(
    monitored: &FactorizedModel,
    nonmonitored: &FactorizedModel,
    prior: &DiscreteDistribution,
    mc: McConfig,
) -> Result<LeakageEstimate, QuantError> {
    let m = monitored.class_count();
    let combined = monitored.clone().merged(nonmonitored.clone())?;
    let outcome: Vec<usize> = (0..combined.class_count()).map(|c| c.min(m)).collect();
    mc_leakage(&combined, prior.probabilities(), &outcome, m + 1, mc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NonMonitoredMode {
    /// One density fitted on all non-monitored traces.
    Pooled,
    /// One density per non-monitored website, posteriors summed.
    PerSite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenWorld {
    pub monitored: Vec<String>,
    pub mode: NonMonitoredMode,
}

/// Which outcome is measured and how websites are weighted. The prior is
/// given over all websites of the table in sorted order; in the open world
/// the non-monitored mass is the sum over non-monitored websites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub prior: PriorSpec,
    pub open: Option<OpenWorld>,
}

impl WorldConfig {
    pub fn closed(prior: PriorSpec) -> Self {
        WorldConfig { prior, open: None }
    }

    pub fn mode_name(&self) -> &'static str {
        match &self.open {
            None => "closed",
            Some(o) if o.mode == NonMonitoredMode::Pooled => "open-pooled",
            Some(_) => "open-per-site",
        }
    }
}

/// Fits per-group densities for every class of `table` and estimates the
/// leakage of the grouped features.
pub fn joint_leakage(
    table: &FeatureTable,
    groups: &[Vec<usize>],
    world: &WorldConfig,
    mc: McConfig,
    beta: usize,
) -> Result<LeakageEstimate, QuantError> {
    let websites = table.websites();
    let prior = world.prior.resolve(websites.len())?;
    let Some(open) = &world.open else {
        let model = FactorizedModel::fit(table, groups, beta)?;
        return closed_world_leakage(&model, &prior, mc);
    };

    let is_monitored = |w: &String| open.monitored.contains(w);
    if let Some(w) = open.monitored.iter().find(|w| !websites.contains(w)) {
        return Err(QuantError::Config(format!("monitored website {w} not in the data")));
    }
    let (m_idx, n_idx): (Vec<usize>, Vec<usize>) = (0..websites.len()).partition(|&i| is_monitored(&websites[i]));
    if m_idx.is_empty() || n_idx.is_empty() {
        return Err(QuantError::Config(
            "open world needs monitored and non-monitored websites".into(),
        ));
    }
    let rows_of = |i: usize| -> Vec<&[f64]> { table.classes()[i].rows.iter().map(Vec::as_slice).collect() };
    let p = prior.probabilities();
    let monitored = FactorizedModel::fit_rows(
        m_idx.iter().map(|&i| websites[i].clone()).collect(),
        &m_idx.iter().map(|&i| rows_of(i)).collect::<Vec<_>>(),
        groups,
        beta,
    )?;
    let mut probs: Vec<f64> = m_idx.iter().map(|&i| p[i]).collect();
    let nonmonitored = match open.mode {
        NonMonitoredMode::Pooled => {
            probs.push(n_idx.iter().map(|&i| p[i]).sum());
            let pooled: Vec<&[f64]> = n_idx.iter().flat_map(|&i| rows_of(i)).collect();
            FactorizedModel::fit_rows(vec!["non-monitored".into()], &[pooled], groups, beta)?
        }
        NonMonitoredMode::PerSite => {
            probs.extend(n_idx.iter().map(|&i| p[i]));
            FactorizedModel::fit_rows(
                n_idx.iter().map(|&i| websites[i].clone()).collect(),
                &n_idx.iter().map(|&i| rows_of(i)).collect::<Vec<_>>(),
                groups,
                beta,
            )?
        }
    };
    open_world_leakage(
        &monitored,
        &nonmonitored,
        &DiscreteDistribution::from_weights(&probs)?,
        mc,
    )
}

/// Leakage of a single feature in the closed world.
pub fn individual_leakage(
    table: &FeatureTable,
    feature: usize,
    prior: &DiscreteDistribution,
    mc: McConfig,
    beta: usize,
) -> Result<LeakageEstimate, QuantError> {
    let model = FactorizedModel::fit(table, &[vec![feature]], beta)?;
    closed_world_leakage(&model, prior, mc)
}

/// Restriction of a grouping to one category's features; empty groups are
/// dropped.
pub fn category_groups(groups: &[Vec<usize>], category: Category) -> Vec<Vec<usize>> {
    let range = category.range();
    groups
        .iter()
        .map(|g| g.iter().copied().filter(|f| range.contains(f)).collect::<Vec<_>>())
        .filter(|g| !g.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryLeakage {
    pub category: usize,
    pub name: String,
    pub features: usize,
    pub bits: Option<f64>,
    pub stderr: Option<f64>,
    pub error: Option<String>,
}

/// Joint leakage of each category's share of the grouping. Only meaningful
/// for tables in the full fingerprint layout.
pub fn per_category_leakage(
    table: &FeatureTable,
    groups: &[Vec<usize>],
    world: &WorldConfig,
    mc: McConfig,
    beta: usize,
) -> Result<Vec<CategoryLeakage>, QuantError> {
    if table.width() != FEATURE_COUNT {
        return Err(QuantError::Config(
            "per-category leakage needs the full fingerprint layout".into(),
        ));
    }
    Ok(Category::ALL
        .iter()
        .map(|&cat| {
            let sub = category_groups(groups, cat);
            let features = sub.iter().map(Vec::len).sum();
            let (bits, stderr, error) = if sub.is_empty() {
                (None, None, None)
            } else {
                match joint_leakage(table, &sub, world, mc, beta) {
                    Ok(e) => (Some(e.bits), Some(e.mc_standard_error), None),
                    Err(e) => (None, None, Some(e.to_string())),
                }
            };
            CategoryLeakage {
                category: cat.index(),
                name: cat.name().to_string(),
                features,
                bits,
                stderr,
                error,
            }
        })
        .collect())
}

/// Result file of a leakage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub mode: String,
    pub prior_spec: PriorSpec,
    pub k: usize,
    pub seed: u64,
    pub bits: f64,
    pub stderr: f64,
    pub per_category: Vec<CategoryLeakage>,
    pub degenerate_sample_count: usize,
}

impl LeakageReport {
    pub fn new(world: &WorldConfig, mc: McConfig, est: &LeakageEstimate, per_category: Vec<CategoryLeakage>) -> Self {
        LeakageReport {
            mode: world.mode_name().to_string(),
            prior_spec: world.prior.clone(),
            k: mc.k,
            seed: mc.seed,
            bits: est.bits,
            stderr: est.mc_standard_error,
            per_category,
            degenerate_sample_count: est.degenerate_samples,
        }
    }
}
