//! Bootstrap and subsampling confidence intervals for leakage estimators.
//!
//! Trial `i` draws from ChaCha stream `i` of the master seed, so trial
//! values do not depend on thread scheduling.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureTable;
use crate::traces::{Dataset, Trace};

#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    #[error("need at least 2 trials, got {0}")]
    Trials(usize),
    #[error("confidence level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error("world size {size} exceeds the {population} available websites")]
    WorldSize { size: usize, population: usize },
    #[error("estimate on the full data failed: {0}")]
    Point(String),
    #[error("only {succeeded} of {trials} trials succeeded")]
    TooManyFailures { succeeded: usize, trials: usize },
}

/// Data that can be resampled per website.
pub trait Resample: Sized {
    /// Websites in a fixed order.
    fn website_ids(&self) -> Vec<String>;
    /// Observations per website, in `website_ids` order.
    fn class_sizes(&self) -> Vec<usize>;
    /// Same websites, observation `picks[c][j]` of website `c` in slot `j`.
    fn reindex(&self, picks: &[Vec<usize>]) -> Self;
    /// Only the listed websites.
    fn restrict_to(&self, websites: &[String]) -> Self;
}

impl Resample for FeatureTable {
    fn website_ids(&self) -> Vec<String> {
        self.websites()
    }

    fn class_sizes(&self) -> Vec<usize> {
        self.classes().iter().map(|c| c.rows.len()).collect()
    }

    fn reindex(&self, picks: &[Vec<usize>]) -> Self {
        self.reindexed(picks)
    }

    fn restrict_to(&self, websites: &[String]) -> Self {
        self.restrict(websites).expect("websites come from the table")
    }
}

impl Resample for Dataset {
    fn website_ids(&self) -> Vec<String> {
        self.websites().to_vec()
    }

    fn class_sizes(&self) -> Vec<usize> {
        self.websites().iter().map(|w| self.traces_of(w).len()).collect()
    }

    fn reindex(&self, picks: &[Vec<usize>]) -> Self {
        let traces: Vec<Trace> = self
            .websites()
            .iter()
            .zip(picks)
            .flat_map(|(w, idx)| {
                let of_site = self.traces_of(w);
                idx.iter().enumerate().map(move |(j, &i)| {
                    let t = of_site[i].clone();
                    let visit = format!("{}#{j}", t.visit_id);
                    t.with_labels(w.clone(), visit)
                })
            })
            .collect();
        Dataset::from_traces(traces)
    }

    fn restrict_to(&self, websites: &[String]) -> Self {
        Dataset::from_traces(
            websites
                .iter()
                .flat_map(|w| self.traces_of(w).iter().cloned())
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleConfig {
    pub trials: usize,
    pub ci_level: f64,
    pub seed: u64,
}

impl ResampleConfig {
    pub fn new(trials: usize, ci_level: f64, seed: u64) -> Result<Self, ValidationError> {
        if trials < 2 {
            return Err(ValidationError::Trials(trials));
        }
        if !(ci_level > 0.0 && ci_level < 1.0) {
            return Err(ValidationError::Level(ci_level));
        }
        Ok(ResampleConfig { trials, ci_level, seed })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
    /// Estimate on the full data; absent for subsampling.
    pub point: Option<f64>,
    /// One entry per trial; `None` when the estimator failed.
    pub trials: Vec<Option<f64>>,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,value\n");
        for (i, v) in self.trials.iter().enumerate() {
            out.push_str(&format!("{i},{}\n", v.map_or(String::new(), |x| x.to_string())));
        }
        out
    }
}

/// Nearest-rank quantile of sorted values: the smallest value with at least
/// a `q` share of the values at or below it.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn interval<E>(
    outcomes: Vec<Result<f64, E>>,
    config: &ResampleConfig,
    point: Option<f64>,
) -> Result<Interval, ValidationError> {
    let trials: Vec<Option<f64>> = outcomes.into_iter().map(Result::ok).collect();
    let mut ok: Vec<f64> = trials.iter().flatten().copied().collect();
    if 2 * ok.len() < config.trials {
        return Err(ValidationError::TooManyFailures {
            succeeded: ok.len(),
            trials: config.trials,
        });
    }
    ok.sort_by(f64::total_cmp);
    let tail = (1.0 - config.ci_level) / 2.0;
    Ok(Interval {
        low: nearest_rank(&ok, tail),
        high: nearest_rank(&ok, 1.0 - tail),
        point,
        trials,
    })
}

/// Resamples each website's observations with replacement (same size),
/// re-runs `estimator` per trial, and takes empirical quantiles.
pub fn bootstrap_ci<D, E, F>(data: &D, estimator: F, config: &ResampleConfig) -> Result<Interval, ValidationError>
where
    D: Resample + Sync,
    E: std::fmt::Display + Send,
    F: Fn(&D) -> Result<f64, E> + Sync,
{
    let point = estimator(data).map_err(|e| ValidationError::Point(e.to_string()))?;
    let sizes = data.class_sizes();
    let outcomes: Vec<Result<f64, E>> = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(config.seed, i);
            let picks: Vec<Vec<usize>> = sizes
                .iter()
                .map(|&n| (0..n).map(|_| rng.random_range(0..n)).collect())
                .collect();
            estimator(&data.reindex(&picks))
        })
        .collect();
    interval(outcomes, config, Some(point))
}

/// Draws `world_size` distinct websites per trial and re-runs `estimator`
/// on each sub-world.
pub fn subsample_ci<D, E, F>(
    data: &D,
    estimator: F,
    world_size: usize,
    config: &ResampleConfig,
) -> Result<Interval, ValidationError>
where
    D: Resample + Sync,
    E: std::fmt::Display + Send,
    F: Fn(&D) -> Result<f64, E> + Sync,
{
    let websites = data.website_ids();
    if world_size > websites.len() || world_size == 0 {
        return Err(ValidationError::WorldSize {
            size: world_size,
            population: websites.len(),
        });
    }
    let outcomes: Vec<Result<f64, E>> = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(config.seed, i);
            let mut chosen = sample(&mut rng, websites.len(), world_size).into_vec();
            chosen.sort_unstable();
            let names: Vec<String> = chosen.into_iter().map(|j| websites[j].clone()).collect();
            estimator(&data.restrict_to(&names))
        })
        .collect();
    interval(outcomes, config, None)
}
