//! Bursts category.
//!
//! A burst of outgoing packets is a maximal run of outgoing packets that is
//! never interrupted by two adjacent incoming packets. A single incoming
//! packet between outgoing ones does not end the burst.

use crate::stats;
use crate::traces::{Direction, Trace};

/// A burst's packet count in `dir` and the trace indices of its first and
/// last packet in that direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Burst {
    pub size: usize,
    pub first: usize,
    pub last: usize,
}

fn bursts(trace: &Trace, dir: Direction) -> Vec<Burst> {
    let mut out = Vec::new();
    let mut current: Option<Burst> = None;
    let mut foreign_run = 0usize;
    for (i, p) in trace.packets().iter().enumerate() {
        if p.direction() != dir {
            foreign_run += 1;
            continue;
        }
        match current.as_mut() {
            Some(b) if foreign_run < 2 => {
                b.size += 1;
                b.last = i;
            }
            _ => {
                out.extend(current.take());
                current = Some(Burst {
                    size: 1,
                    first: i,
                    last: i,
                });
            }
        }
        foreign_run = 0;
    }
    out.extend(current);
    out
}

pub fn outgoing_bursts(trace: &Trace) -> Vec<Burst> {
    bursts(trace, Direction::Outgoing)
}

/// 11 values: outgoing-burst size maximum, mean and count; number of bursts
/// larger than 5, 10 and 20 packets; burst size standard deviation, median
/// and minimum; number of incoming bursts; mean number of packets between
/// consecutive outgoing bursts.
pub fn burst_features(trace: &Trace) -> Vec<f64> {
    let out_bursts = outgoing_bursts(trace);
    let sizes: Vec<f64> = out_bursts.iter().map(|b| b.size as f64).collect();
    let larger = |n: f64| sizes.iter().filter(|&&s| s > n).count() as f64;
    let gaps: Vec<f64> = out_bursts
        .windows(2)
        .map(|w| (w[1].first - w[0].last - 1) as f64)
        .collect();
    vec![
        stats::max(&sizes),
        stats::mean(&sizes),
        sizes.len() as f64,
        larger(5.0),
        larger(10.0),
        larger(20.0),
        stats::std_pop(&sizes),
        stats::median(&sizes),
        stats::min(&sizes),
        bursts(trace, Direction::Incoming).len() as f64,
        stats::mean(&gaps),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    const O: i64 = -1;
    const I: i64 = 1;

    fn cells(signs: &[i64]) -> Trace {
        let raw: Vec<(f64, i64)> = signs.iter().map(|&s| (0.0, s)).collect();
        Trace::from_cells(&raw).unwrap()
    }

    #[test]
    fn hand_enumerated_bursts() {
        let t = cells(&[O, O, I, O, I, I, O, O, O]);
        let sizes: Vec<usize> = outgoing_bursts(&t).iter().map(|b| b.size).collect();
        assert_eq!(sizes, vec![3, 3]);
        let f = burst_features(&t);
        assert_eq!(&f[..3], &[3.0, 3.0, 2.0]);
        // packets strictly between index 3 and index 6
        assert_eq!(f[10], 2.0);
    }

    #[test]
    fn all_outgoing_is_one_burst() {
        let f = burst_features(&cells(&[O; 7]));
        assert_eq!(&f[..3], &[7.0, 7.0, 1.0]);
        assert_eq!(f[3], 1.0);
        assert_eq!(f[9], 0.0);
    }

    #[test]
    fn all_incoming_has_no_outgoing_bursts() {
        let f = burst_features(&cells(&[I; 5]));
        assert!(f[..9].iter().all(|&v| v == 0.0));
        assert_eq!(f[9], 1.0);
        assert_eq!(f.len(), 11);
    }
}
