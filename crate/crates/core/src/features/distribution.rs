//! Packet Distribution and CUMUL categories.

use crate::stats;
use crate::traces::{Direction, Trace};

const CHUNK: usize = 30;
const CHUNKS: usize = 200;
const SUBSETS: usize = 20;

/// Number of equidistant samples of the cumulative curve.
pub const CUMUL_POINTS: usize = 100;

/// 225 values: outgoing counts in the first 200 chunks of 30 packets (zero
/// padded, later chunks ignored); standard deviation, mean, median and
/// maximum of those 200; 20 sums over consecutive groups of 10 chunks; and
/// the grand total of the 200.
pub fn packet_distribution_features(trace: &Trace) -> Vec<f64> {
    let mut chunks: Vec<f64> = trace
        .packets()
        .chunks(CHUNK)
        .take(CHUNKS)
        .map(|c| c.iter().filter(|p| p.direction() == Direction::Outgoing).count() as f64)
        .collect();
    chunks.resize(CHUNKS, 0.0);
    let mut out = chunks.clone();
    out.extend([
        stats::std_pop(&chunks),
        stats::mean(&chunks),
        stats::median(&chunks),
        stats::max(&chunks),
    ]);
    out.extend(chunks.chunks(CHUNKS / SUBSETS).map(|c| c.iter().sum::<f64>()));
    out.push(chunks.iter().sum());
    out
}

/// 104 values: the cumulative sum of signed lengths, linearly interpolated
/// over packet index and sampled at 100 equidistant points from the first to
/// the last packet; then incoming count, outgoing count, incoming size sum
/// and outgoing size sum.
pub fn cumul_features(trace: &Trace) -> Vec<f64> {
    let cumulative: Vec<f64> = trace
        .packets()
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p.length as f64;
            Some(*acc)
        })
        .collect();
    let mut out = Vec::with_capacity(CUMUL_POINTS + 4);
    let last = cumulative.len().saturating_sub(1) as f64;
    for k in 0..CUMUL_POINTS {
        let x = last * k as f64 / (CUMUL_POINTS - 1) as f64;
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(cumulative.len() - 1);
        let frac = x - lo as f64;
        out.push(cumulative[lo] + (cumulative[hi] - cumulative[lo]) * frac);
    }
    let (mut n_in, mut n_out, mut s_in, mut s_out) = (0.0, 0.0, 0.0, 0.0);
    for p in trace.packets() {
        match p.direction() {
            Direction::Incoming => {
                n_in += 1.0;
                s_in += p.size() as f64;
            }
            Direction::Outgoing => {
                n_out += 1.0;
                s_out += p.size() as f64;
            }
        }
    }
    out.extend([n_in, n_out, s_in, s_out]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cells(signs: &[i64]) -> Trace {
        let raw: Vec<(f64, i64)> = signs.iter().map(|&s| (0.0, s)).collect();
        Trace::from_cells(&raw).unwrap()
    }

    #[test]
    fn chunk_counts() {
        let mut signs = vec![-1; 10];
        signs.extend(vec![1; 20]);
        signs.extend(vec![-1; 10]);
        signs.extend(vec![1; 20]);
        let f = packet_distribution_features(&cells(&signs));
        assert_eq!(&f[..3], &[10.0, 10.0, 0.0]);
        assert_eq!(f[224], 20.0);
        assert_eq!(f[204..224].iter().sum::<f64>(), 20.0);
        assert_eq!(f.len(), 225);
    }

    #[test]
    fn chunks_beyond_200_are_ignored() {
        let f = packet_distribution_features(&cells(&[-1; 7000]));
        assert!(f[..200].iter().all(|&v| v == 30.0));
        assert_eq!(f[224], 6000.0);
    }

    #[test]
    fn cumul_follows_interpolant() {
        let f = cumul_features(&cells(&[1, 1, -1]));
        assert_eq!(f[0], 1.0);
        assert_eq!(f[99], 1.0);
        // x = 2 * 33 / 99 = 0.666..., between 1 and 2
        assert!((f[33] - (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(&f[100..], &[2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn cumul_all_incoming_is_linear() {
        let f = cumul_features(&cells(&[1; 12]));
        for k in 0..CUMUL_POINTS {
            let expected = 1.0 + 11.0 * k as f64 / 99.0;
            assert!((f[k] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn single_packet_cumul() {
        let f = cumul_features(&cells(&[-1]));
        assert!(f[..100].iter().all(|&v| v == -1.0));
    }
}
