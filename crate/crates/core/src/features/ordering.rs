//! Ngram and Transposition categories.

use crate::stats;
use crate::traces::{Direction, Trace};

const TRANSPOSITION_LIMIT: usize = 300;

/// Counts of every direction n-gram. Index bits are read most significant
/// first with outgoing = 0 and incoming = 1, which is lexicographic order
/// over {-1, +1}.
pub fn ngram_counts(trace: &Trace, n: usize) -> Vec<f64> {
    assert!((1..=16).contains(&n), "n-gram order out of range");
    let mut counts = vec![0.0; 1 << n];
    let bits: Vec<usize> = trace
        .packets()
        .iter()
        .map(|p| usize::from(p.direction() == Direction::Incoming))
        .collect();
    for w in bits.windows(n) {
        let idx = w.iter().fold(0, |acc, &b| (acc << 1) | b);
        counts[idx] += 1.0;
    }
    counts
}

/// 124 values: n-gram counts for n = 2..=6 concatenated.
pub fn ngram_features(trace: &Trace) -> Vec<f64> {
    (2..=6).flat_map(|n| ngram_counts(trace, n)).collect()
}

fn positions(trace: &Trace, dir: Direction) -> Vec<f64> {
    trace
        .packets()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.direction() == dir)
        .take(TRANSPOSITION_LIMIT)
        .map(|(i, _)| i as f64)
        .collect()
}

/// 604 values: for each of the first 300 incoming packets the number of
/// packets preceding it (zero padded), the same for outgoing packets, then
/// mean and standard deviation of the incoming positions and of the outgoing
/// positions.
pub fn transposition_features(trace: &Trace) -> Vec<f64> {
    let incoming = positions(trace, Direction::Incoming);
    let outgoing = positions(trace, Direction::Outgoing);
    let mut out = Vec::with_capacity(604);
    for pos in [&incoming, &outgoing] {
        out.extend_from_slice(pos);
        out.resize(out.len() + TRANSPOSITION_LIMIT - pos.len(), 0.0);
    }
    for pos in [&incoming, &outgoing] {
        out.push(stats::mean(pos));
        out.push(stats::std_pop(pos));
    }
    out
}
