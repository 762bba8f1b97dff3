//! Packet Count, First 20, First 30 and Last 30 categories.

use crate::traces::{Direction, Packet, Trace};

/// Granularity of the rounded packet counts.
pub const ROUNDING_GRANULARITY: f64 = 25.0;

fn round_to(x: f64, granularity: f64) -> f64 {
    (x / granularity).round() * granularity
}

fn ratio(part: f64, whole: f64) -> f64 {
    if whole > 0.0 {
        part / whole
    } else {
        0.0
    }
}

/// 13 values: total, outgoing, incoming counts; incoming and outgoing
/// ratios; the three counts rounded to [`ROUNDING_GRANULARITY`]; total,
/// incoming and outgoing byte sizes; incoming and outgoing size ratios.
pub fn packet_count_features(trace: &Trace) -> Vec<f64> {
    let total = trace.len() as f64;
    let incoming = trace.count(Direction::Incoming) as f64;
    let outgoing = trace.count(Direction::Outgoing) as f64;
    let size_of = |dir: Direction| -> f64 {
        trace
            .packets()
            .iter()
            .filter(|p| p.direction() == dir)
            .map(|p| p.size() as f64)
            .sum()
    };
    let bytes_in = size_of(Direction::Incoming);
    let bytes_out = size_of(Direction::Outgoing);
    let bytes_total = bytes_in + bytes_out;
    vec![
        total,
        outgoing,
        incoming,
        ratio(incoming, total),
        ratio(outgoing, total),
        round_to(total, ROUNDING_GRANULARITY),
        round_to(incoming, ROUNDING_GRANULARITY),
        round_to(outgoing, ROUNDING_GRANULARITY),
        bytes_total,
        bytes_in,
        bytes_out,
        ratio(bytes_in, bytes_total),
        ratio(bytes_out, bytes_total),
    ]
}

/// Direction signs of the first 20 packets, zero padded.
pub fn first20_features(trace: &Trace) -> Vec<f64> {
    let mut out: Vec<f64> = trace
        .packets()
        .iter()
        .take(20)
        .map(|p| p.direction().sign() as f64)
        .collect();
    out.resize(20, 0.0);
    out
}

fn in_out(packets: &[Packet]) -> Vec<f64> {
    let incoming = packets.iter().filter(|p| p.direction() == Direction::Incoming).count();
    vec![incoming as f64, (packets.len() - incoming) as f64]
}

/// Incoming and outgoing counts within the first 30 packets.
pub fn first30_features(trace: &Trace) -> Vec<f64> {
    let p = trace.packets();
    in_out(&p[..p.len().min(30)])
}

/// Incoming and outgoing counts within the last 30 packets.
pub fn last30_features(trace: &Trace) -> Vec<f64> {
    let p = trace.packets();
    in_out(&p[p.len().saturating_sub(30)..])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cells(signs: &[i64]) -> Trace {
        let raw: Vec<(f64, i64)> = signs.iter().enumerate().map(|(i, &s)| (i as f64 * 0.01, s)).collect();
        Trace::from_cells(&raw).unwrap()
    }

    #[test]
    fn basic_counts() {
        let f = packet_count_features(&cells(&[1, 1, -1]));
        assert_eq!(f[0], 3.0);
        assert_eq!(f[1], 1.0);
        assert_eq!(f[2], 2.0);
        assert!((f[3] - 2.0 / 3.0).abs() < 1e-15);
        assert!((f[4] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(f.len(), 13);
    }

    #[test]
    fn all_incoming_has_zero_out_ratio() {
        let f = packet_count_features(&cells(&[1; 10]));
        assert_eq!(f[4], 0.0);
        assert_eq!(f[3], 1.0);
    }

    #[test]
    fn rounded_outgoing_count() {
        let mut signs = vec![-1; 103];
        signs.extend([1; 7]);
        let f = packet_count_features(&cells(&signs));
        assert_eq!(f[1], 103.0);
        // 103 / 25 = 4.12 rounds to 4, i.e. 100.
        assert_eq!(f[7], 100.0);
        // 110 / 25 = 4.4 -> 100; 7 / 25 = 0.28 -> 0.
        assert_eq!(f[5], 100.0);
        assert_eq!(f[6], 0.0);
    }

    #[test]
    fn first_and_last_windows() {
        let t = cells(&[1, -1, 1, 1, -1, 1, 1, 1, -1, 1]);
        assert_eq!(first30_features(&t), in_out(t.packets()));
        assert_eq!(last30_features(&t), vec![7.0, 3.0]);
        let f20 = first20_features(&t);
        assert_eq!(&f20[..3], &[1.0, -1.0, 1.0]);
        assert_eq!(&f20[10..], &[0.0; 10]);
    }
}
