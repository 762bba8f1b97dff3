//! Interval-I, Interval-II and Interval-III categories.
//!
//! An interval is the window between a packet and the previous packet of the
//! same direction. Its *window size* is the number of packets strictly inside
//! the window; its *span* is window size + 1, the distance in packet index.
//! Interval-I records window sizes. Interval-II/III histogram spans, which
//! start at 1 so that every interval lands in one of the 300 bins.

use crate::traces::{Direction, Trace};

const LIMIT: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalVariant {
    /// 600: first 300 incoming then first 300 outgoing window sizes.
    I,
    /// 602: span histograms (300 bins) per direction, then interval totals.
    II,
    /// 586: per direction, the span histogram with spans 3-5, 6-8 and 9-13
    /// merged into their grouped sums (292 values) followed by the
    /// direction's interval total.
    III,
}

/// Window sizes of all intervals in one direction, in trace order.
pub fn interval_windows(trace: &Trace, dir: Direction) -> Vec<usize> {
    let idx: Vec<usize> = trace
        .packets()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.direction() == dir)
        .map(|(i, _)| i)
        .collect();
    idx.windows(2).map(|w| w[1] - w[0] - 1).collect()
}

/// `hist[i - 1]` counts intervals with span `i`; spans above 300 count as 300.
fn span_histogram(windows: &[usize]) -> Vec<f64> {
    let mut hist = vec![0.0; LIMIT];
    for &w in windows {
        hist[(w + 1).min(LIMIT) - 1] += 1.0;
    }
    hist
}

fn grouped(hist: &[f64]) -> Vec<f64> {
    let sum = |lo: usize, hi: usize| hist[lo - 1..hi].iter().sum::<f64>();
    let mut out = Vec::with_capacity(292);
    out.extend_from_slice(&hist[..2]);
    out.extend([sum(3, 5), sum(6, 8), sum(9, 13)]);
    out.extend_from_slice(&hist[13..]);
    out
}

pub fn interval_features(trace: &Trace, variant: IntervalVariant) -> Vec<f64> {
    let dirs = [Direction::Incoming, Direction::Outgoing];
    let windows = dirs.map(|d| interval_windows(trace, d));
    let mut out = Vec::with_capacity(602);
    match variant {
        IntervalVariant::I => {
            for w in &windows {
                let start = out.len();
                out.extend(w.iter().take(LIMIT).map(|&x| x as f64));
                out.resize(start + LIMIT, 0.0);
            }
        }
        IntervalVariant::II => {
            for w in &windows {
                out.extend(span_histogram(w));
            }
            out.extend(windows.iter().map(|w| w.len() as f64));
        }
        IntervalVariant::III => {
            for w in &windows {
                out.extend(grouped(&span_histogram(w)));
                out.push(w.len() as f64);
            }
        }
    }
    out
}
