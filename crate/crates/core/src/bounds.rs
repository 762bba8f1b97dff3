//! Closed-form links between classifier accuracy and information leakage,
//! and the averaging law for combining equal-size closed worlds.

use std::fmt::Write as _;

use thiserror::Error;

use crate::infotheory::{entropy, DiscreteDistribution};

#[derive(Debug, Error, PartialEq)]
pub enum BoundsError {
    #[error("world size must be at least 2, got {0}")]
    WorldSize(usize),
    #[error("accuracy must lie in [0, 1], got {0}")]
    Accuracy(f64),
    #[error("nothing to combine")]
    Empty,
}

fn xlog2x(x: f64) -> f64 {
    if x > 0.0 {
        x * x.log2()
    } else {
        0.0
    }
}

fn check_alpha(alpha: f64) -> Result<(), BoundsError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(BoundsError::Accuracy(alpha))
    }
}

/// Width of the leakage band for an `alpha`-accurate classifier over `n`
/// websites: `(1 - alpha) log2(n - 1)`.
pub fn theorem1_range(n: usize, alpha: f64) -> Result<f64, BoundsError> {
    if n < 2 {
        return Err(BoundsError::WorldSize(n));
    }
    check_alpha(alpha)?;
    Ok((1.0 - alpha) * ((n - 1) as f64).log2())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakageBounds {
    pub min_bits: f64,
    pub max_bits: f64,
}

impl LeakageBounds {
    pub fn range(&self) -> f64 {
        self.max_bits - self.min_bits
    }
}

/// Least and greatest leakage consistent with accuracy `alpha`, taking the
/// entropy of the classifier output to be the entropy of `prior`.
pub fn leakage_bounds(prior: &DiscreteDistribution, alpha: f64) -> Result<LeakageBounds, BoundsError> {
    let n = prior.len();
    if n < 2 {
        return Err(BoundsError::WorldSize(n));
    }
    check_alpha(alpha)?;
    let h = entropy(prior);
    let miss = 1.0 - alpha;
    let max_bits = h + xlog2x(alpha) + xlog2x(miss);
    let spread = if miss > 0.0 {
        miss * (miss / (n - 1) as f64).log2()
    } else {
        0.0
    };
    let min_bits = h + xlog2x(alpha) + spread;
    Ok(LeakageBounds { min_bits, max_bits })
}

/// Leakage of the union of equal-size worlds: the mean of their leakages.
pub fn theorem2_combine(leakages: &[f64]) -> Result<f64, BoundsError> {
    if leakages.is_empty() {
        return Err(BoundsError::Empty);
    }
    Ok(leakages.iter().sum::<f64>() / leakages.len() as f64)
}

/// CSV with one row per accuracy `0.01, 0.02, ..., 1.00`, plus `alpha`
/// itself if it is not on the grid; the requested row is flagged.
pub fn alpha_sweep_csv(prior: &DiscreteDistribution, alpha: f64) -> Result<String, BoundsError> {
    check_alpha(alpha)?;
    let mut grid: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
    if !grid.iter().any(|&a| (a - alpha).abs() < 1e-12) {
        grid.push(alpha);
        grid.sort_by(f64::total_cmp);
    }
    let mut out = String::from("alpha,min_bits,max_bits,range_bits,selected\n");
    for a in grid {
        let b = leakage_bounds(prior, a)?;
        let range = theorem1_range(prior.len(), a)?;
        let selected = u8::from((a - alpha).abs() < 1e-12);
        let _ = writeln!(out, "{a},{},{},{range},{selected}", b.min_bits, b.max_bits);
    }
    Ok(out)
}
