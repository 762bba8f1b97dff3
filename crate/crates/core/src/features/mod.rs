//! The 3043-dimensional website fingerprint.
//!
//! Features are grouped into 14 categories whose sizes are fixed by the
//! layout below. Wherever the published feature descriptions enumerate fewer
//! values than a category's size, the remainder is filled by documented
//! deterministic companions (see each category function). The composition is
//! versioned through [`LAYOUT_VERSION`].
//!
//! All extractors expect a cell-form trace (see
//! [`to_cell_sequence`](crate::traces::to_cell_sequence)); direction comes from
//! the sign of each packet and byte sizes from its magnitude.

mod bursts;
mod counts;
mod distribution;
mod intervals;
mod ordering;
mod table;
mod timing;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traces::Trace;

pub use bursts::{burst_features, outgoing_bursts};
pub use counts::{first20_features, first30_features, last30_features, packet_count_features, ROUNDING_GRANULARITY};
pub use distribution::{cumul_features, packet_distribution_features, CUMUL_POINTS};
pub use intervals::{interval_features, interval_windows, IntervalVariant};
pub use ordering::{ngram_counts, ngram_features, transposition_features};
pub use table::{ClassRows, FeatureTable, TableError};
pub use timing::{packets_per_second_features, time_features};

/// Bumped whenever the composition of any category changes.
pub const LAYOUT_VERSION: u32 = 1;

pub const FEATURE_COUNT: usize = 3043;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("cannot extract features from an empty trace")]
    EmptyTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    PacketCount,
    TimeStatistics,
    Ngram,
    Transposition,
    IntervalI,
    IntervalII,
    IntervalIII,
    PacketDistribution,
    Bursts,
    First20,
    First30,
    Last30,
    PacketsPerSecond,
    Cumul,
}

impl Category {
    pub const ALL: [Category; 14] = [
        Category::PacketCount,
        Category::TimeStatistics,
        Category::Ngram,
        Category::Transposition,
        Category::IntervalI,
        Category::IntervalII,
        Category::IntervalIII,
        Category::PacketDistribution,
        Category::Bursts,
        Category::First20,
        Category::First30,
        Category::Last30,
        Category::PacketsPerSecond,
        Category::Cumul,
    ];

    /// One-based category number.
    pub fn index(self) -> usize {
        self as usize + 1
    }

    pub fn from_index(index: usize) -> Option<Category> {
        index.checked_sub(1).and_then(|i| Category::ALL.get(i).copied())
    }

    pub fn len(self) -> usize {
        match self {
            Category::PacketCount => 13,
            Category::TimeStatistics => 24,
            Category::Ngram => 124,
            Category::Transposition => 604,
            Category::IntervalI => 600,
            Category::IntervalII => 602,
            Category::IntervalIII => 586,
            Category::PacketDistribution => 225,
            Category::Bursts => 11,
            Category::First20 => 20,
            Category::First30 => 2,
            Category::Last30 => 2,
            Category::PacketsPerSecond => 126,
            Category::Cumul => 104,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::PacketCount => "Packet Count",
            Category::TimeStatistics => "Time Statistics",
            Category::Ngram => "Ngram",
            Category::Transposition => "Transposition",
            Category::IntervalI => "Interval-I",
            Category::IntervalII => "Interval-II",
            Category::IntervalIII => "Interval-III",
            Category::PacketDistribution => "Packet Distribution",
            Category::Bursts => "Bursts",
            Category::First20 => "First 20 Packets",
            Category::First30 => "First 30 Packets",
            Category::Last30 => "Last 30 Packets",
            Category::PacketsPerSecond => "Packet Count per Second",
            Category::Cumul => "CUMUL Features",
        }
    }

    /// Offset of this category's first feature in the full vector.
    pub fn offset(self) -> usize {
        Category::ALL.iter().take_while(|&&c| c != self).map(|c| c.len()).sum()
    }

    pub fn range(self) -> std::ops::Range<usize> {
        let start = self.offset();
        start..start + self.len()
    }

    /// Category owning the feature at `feature` in the full vector.
    pub fn of_feature(feature: usize) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.range().contains(&feature))
    }
}

/// Column name of a feature: `cat<k>_<i>` with `k` one-based and `i`
/// zero-based within the category.
pub fn feature_name(feature: usize) -> String {
    let cat = Category::of_feature(feature).expect("feature index out of range");
    format!("cat{}_{}", cat.index(), feature - cat.offset())
}

pub fn feature_names() -> Vec<String> {
    (0..FEATURE_COUNT).map(feature_name).collect()
}

/// Parses a `cat<k>_<i>` name back to a full-vector index.
pub fn parse_feature_name(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("cat")?;
    let (k, i) = rest.split_once('_')?;
    let cat = Category::from_index(k.parse().ok()?)?;
    let i: usize = i.parse().ok()?;
    (i < cat.len()).then(|| cat.offset() + i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRange {
    pub index: usize,
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// JSON sidecar describing where each category lives in the vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutMap {
    pub version: u32,
    pub total: usize,
    pub categories: Vec<CategoryRange>,
}

impl LayoutMap {
    pub fn current() -> Self {
        LayoutMap {
            version: LAYOUT_VERSION,
            total: FEATURE_COUNT,
            categories: Category::ALL
                .iter()
                .map(|&c| CategoryRange {
                    index: c.index(),
                    name: c.name().to_string(),
                    offset: c.offset(),
                    len: c.len(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn category(&self, cat: Category) -> &[f64] {
        &self.values[cat.range()]
    }
}

/// Extracts the full fingerprint of a trace.
pub fn extract_features(trace: &Trace) -> Result<FeatureVector, FeatureError> {
    if trace.is_empty() {
        return Err(FeatureError::EmptyTrace);
    }
    let mut values = Vec::with_capacity(FEATURE_COUNT);
    for cat in Category::ALL {
        let block = match cat {
            Category::PacketCount => packet_count_features(trace),
            Category::TimeStatistics => time_features(trace),
            Category::Ngram => ngram_features(trace),
            Category::Transposition => transposition_features(trace),
            Category::IntervalI => interval_features(trace, IntervalVariant::I),
            Category::IntervalII => interval_features(trace, IntervalVariant::II),
            Category::IntervalIII => interval_features(trace, IntervalVariant::III),
            Category::PacketDistribution => packet_distribution_features(trace),
            Category::Bursts => burst_features(trace),
            Category::First20 => first20_features(trace),
            Category::First30 => first30_features(trace),
            Category::Last30 => last30_features(trace),
            Category::PacketsPerSecond => packets_per_second_features(trace),
            Category::Cumul => cumul_features(trace),
        };
        debug_assert_eq!(block.len(), cat.len(), "{cat:?}");
        values.extend(block);
    }
    debug_assert!(values.iter().all(|v| v.is_finite()));
    Ok(FeatureVector { values })
}
