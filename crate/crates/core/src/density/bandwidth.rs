//! Bandwidth selection for the continuous part of a feature.
//!
//! The primary selector is the Sheather-Jones "solve-the-equation" plug-in
//! rule evaluated on binned pairwise distances. When it cannot produce a
//! value (too few distinct points, a zero robust scale, non-finite density
//! functionals, or no root in the bracket) the rule of thumb
//! `1.06 * sd * m^(-1/5)` is used instead.

use std::f64::consts::PI;

use crate::stats;

/// Bandwidth used for every discrete observation.
pub const DISCRETE_BANDWIDTH: f64 = 0.001;

const BINS: usize = 1000;
const MAX_DELTA: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BandwidthMethod {
    PlugIn,
    RuleOfThumb,
    DiscreteConstant,
    /// Continuous samples without spread; handled as discrete.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Bandwidth {
    pub value: f64,
    pub method: BandwidthMethod,
}

impl Bandwidth {
    pub fn discrete() -> Self {
        Bandwidth {
            value: DISCRETE_BANDWIDTH,
            method: BandwidthMethod::DiscreteConstant,
        }
    }

    /// True when the continuous selectors could not be applied.
    pub fn is_flagged(&self) -> bool {
        self.method == BandwidthMethod::Degenerate
    }
}

/// `1.06 * sd * m^(-1/5)` with the sample standard deviation.
pub fn rule_of_thumb(samples: &[f64]) -> Option<f64> {
    let sd = stats::std_sample(samples);
    let h = 1.06 * sd * (samples.len() as f64).powf(-0.2);
    (h.is_finite() && h > 0.0).then_some(h)
}

/// Pair counts by binned distance: `counts[k]` is the number of unordered
/// pairs whose bins are `k` apart.
struct PairBins {
    width: f64,
    counts: Vec<f64>,
}

impl PairBins {
    fn new(samples: &[f64]) -> Option<Self> {
        let lo = stats::min(samples);
        let hi = stats::max(samples);
        let width = (hi - lo) * 1.01 / BINS as f64;
        if !(width > 0.0) {
            return None;
        }
        let mut occupancy = vec![0.0f64; BINS];
        for &x in samples {
            let b = (((x - lo) / width) as usize).min(BINS - 1);
            occupancy[b] += 1.0;
        }
        let mut counts = vec![0.0; BINS];
        counts[0] = occupancy.iter().map(|c| c * (c - 1.0) / 2.0).sum();
        for (k, slot) in counts.iter_mut().enumerate().skip(1) {
            *slot = occupancy.iter().zip(&occupancy[k..]).map(|(a, b)| a * b).sum();
        }
        Some(PairBins { width, counts })
    }

    /// Sum over binned pairs of `kernel(delta)` with `delta = (d / h)^2`.
    fn pair_sum(&self, h: f64, kernel: impl Fn(f64) -> f64) -> f64 {
        let mut sum = 0.0;
        for (k, &c) in self.counts.iter().enumerate() {
            let delta = (k as f64 * self.width / h).powi(2);
            if delta >= MAX_DELTA {
                break;
            }
            if c > 0.0 {
                sum += kernel(delta) * c;
            }
        }
        sum
    }

    /// Estimate of the integrated squared second derivative functional.
    fn phi4(&self, n: f64, h: f64) -> f64 {
        let s = self.pair_sum(h, |d| (-d / 2.0).exp() * (d * d - 6.0 * d + 3.0));
        (2.0 * s + 3.0 * n) / (n * (n - 1.0) * h.powi(5) * (2.0 * PI).sqrt())
    }

    fn phi6(&self, n: f64, h: f64) -> f64 {
        let s = self.pair_sum(h, |d| (-d / 2.0).exp() * (d * d * d - 15.0 * d * d + 45.0 * d - 15.0));
        (2.0 * s - 15.0 * n) / (n * (n - 1.0) * h.powi(7) * (2.0 * PI).sqrt())
    }
}

/// Sheather-Jones solve-the-equation bandwidth; `None` on numerical failure.
pub fn sheather_jones(samples: &[f64]) -> Option<f64> {
    let n = samples.len() as f64;
    if samples.len() < 3 {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = stats::quantile_sorted(&sorted, 0.75) - stats::quantile_sorted(&sorted, 0.25);
    let scale = stats::std_sample(samples).min(iqr / 1.349);
    if !(scale > 0.0) {
        return None;
    }
    let bins = PairBins::new(samples)?;
    let a = 1.24 * scale * n.powf(-1.0 / 7.0);
    let b = 1.23 * scale * n.powf(-1.0 / 9.0);
    let c1 = 1.0 / (2.0 * PI.sqrt() * n);
    let td = -bins.phi6(n, b);
    if !td.is_finite() || td <= 0.0 {
        return None;
    }
    let alpha2 = 1.357 * (bins.phi4(n, a) / td).powf(1.0 / 7.0);
    if !alpha2.is_finite() {
        return None;
    }
    let f = |h: f64| (c1 / bins.phi4(n, alpha2 * h.powf(5.0 / 7.0))).powf(0.2) - h;

    let hmax = 1.144 * scale * n.powf(-0.2);
    let (mut lo, mut hi) = (0.1 * hmax, hmax);
    let (mut f_lo, mut f_hi) = (f(lo), f(hi));
    let mut tries = 0;
    while f_lo * f_hi > 0.0 || !f_lo.is_finite() || !f_hi.is_finite() {
        if tries > 99 {
            return None;
        }
        if tries % 2 == 0 {
            hi *= 1.2;
            f_hi = f(hi);
        } else {
            lo /= 1.2;
            f_lo = f(lo);
        }
        tries += 1;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f_mid = f(mid);
        if !f_mid.is_finite() {
            return None;
        }
        if f_mid == 0.0 || (hi - lo) < 1e-10 * hmax {
            return Some(mid);
        }
        if f_lo * f_mid < 0.0 {
            hi = mid;
        } else {
            lo = mid;
            f_lo = f_mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Continuous bandwidth: plug-in, then rule of thumb, then flagged fallback
/// to the discrete constant when the samples have no spread.
pub fn continuous_bandwidth(samples: &[f64]) -> Bandwidth {
    if let Some(h) = sheather_jones(samples) {
        return Bandwidth {
            value: h,
            method: BandwidthMethod::PlugIn,
        };
    }
    if let Some(h) = rule_of_thumb(samples) {
        return Bandwidth {
            value: h,
            method: BandwidthMethod::RuleOfThumb,
        };
    }
    Bandwidth {
        value: DISCRETE_BANDWIDTH,
        method: BandwidthMethod::Degenerate,
    }
}
