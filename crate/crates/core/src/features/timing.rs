//! Time Statistics and Packet Count per Second categories.

use crate::stats;
use crate::traces::{Direction, Trace};

const SECONDS: usize = 100;
const SUBSETS: usize = 20;

fn times(trace: &Trace, dir: Option<Direction>) -> Vec<f64> {
    trace
        .packets()
        .iter()
        .filter(|p| dir.is_none_or(|d| p.direction() == d))
        .map(|p| p.time)
        .collect()
}

fn gaps(ts: &[f64]) -> Vec<f64> {
    ts.windows(2).map(|w| w[1] - w[0]).collect()
}

/// 24 values. For the total, incoming and outgoing streams in that order:
/// inter-arrival maximum, mean, standard deviation and third quartile (12).
/// Then for the same three streams: the 25/50/75/100% quantiles of packet
/// timestamps, i.e. transmission-time quartiles (12).
pub fn time_features(trace: &Trace) -> Vec<f64> {
    let streams = [None, Some(Direction::Incoming), Some(Direction::Outgoing)];
    let mut out = Vec::with_capacity(24);
    for dir in streams {
        let mut g = gaps(&times(trace, dir));
        g.sort_by(f64::total_cmp);
        out.extend([
            stats::max(&g),
            stats::mean(&g),
            stats::std_pop(&g),
            stats::quantile_sorted(&g, 0.75),
        ]);
    }
    for dir in streams {
        let t = times(trace, dir);
        out.extend([0.25, 0.5, 0.75, 1.0].map(|q| stats::quantile_sorted(&t, q)));
    }
    out
}

/// Packet counts in each of the first 100 seconds.
pub fn per_second_counts(trace: &Trace) -> Vec<f64> {
    let mut counts = vec![0.0; SECONDS];
    for p in trace.packets() {
        let s = p.time.floor() as usize;
        if s < SECONDS {
            counts[s] += 1.0;
        }
    }
    counts
}

/// 126 values: per-second counts for 100 s (zero padded); their standard
/// deviation, mean, median, minimum and maximum; 20 sums over consecutive
/// 5-second subsets; and the number of seconds spanned by the trace.
pub fn packets_per_second_features(trace: &Trace) -> Vec<f64> {
    let counts = per_second_counts(trace);
    let mut out = counts.clone();
    out.extend([
        stats::std_pop(&counts),
        stats::mean(&counts),
        stats::median(&counts),
        stats::min(&counts),
        stats::max(&counts),
    ]);
    out.extend(counts.chunks(SECONDS / SUBSETS).map(|c| c.iter().sum::<f64>()));
    out.push(trace.duration().floor() + 1.0);
    out
}
