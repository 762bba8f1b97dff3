#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use wfleak::traces::{Dataset, Trace};

/// Cell trace with `n` cells, random directions and exponential gaps; the
/// first cell is outgoing at time 0.
pub fn random_trace(rng: &mut ChaCha8Rng, n: usize, p_in: f64, mean_gap: f64) -> Trace {
    let gap = Exp::new(1.0 / mean_gap).unwrap();
    let mut t = 0.0;
    let mut cells = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            t += gap.sample(rng);
        }
        let sign = if i > 0 && rng.random_bool(p_in) { 1 } else { -1 };
        cells.push((t, sign));
    }
    Trace::from_cells(&cells).unwrap()
}

/// Traces of a synthetic site: `n_in`/`n_out` cells spread uniformly over
/// `duration` seconds.
pub fn site_trace(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize, duration: f64) -> Trace {
    let mut cells: Vec<(f64, i64)> = vec![(0.0, -1)];
    cells.extend((0..n_in).map(|_| (rng.random::<f64>() * duration, 1)));
    cells.extend((1..n_out).map(|_| (rng.random::<f64>() * duration, -1)));
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    Trace::from_cells(&cells).unwrap()
}

/// Eight websites that differ in cell counts and duration.
pub fn eight_site_dataset(rng: &mut ChaCha8Rng, per_site: usize) -> Dataset {
    let mut traces = Vec::new();
    for c in 0..8 {
        let n_in = Normal::new(120.0 + 50.0 * c as f64, 12.0).unwrap();
        let n_out = Normal::new(20.0 + 8.0 * c as f64, 4.0).unwrap();
        let dur = Normal::new(2.0 + 0.6 * c as f64, 0.25).unwrap();
        for v in 0..per_site {
            let i = n_in.sample(rng).round().max(1.0) as usize;
            let o = n_out.sample(rng).round().max(1.0) as usize;
            let d = dur.sample(rng).max(0.5);
            traces.push(site_trace(rng, i, o, d).with_labels(format!("site{c}"), v.to_string()));
        }
    }
    Dataset::from_traces(traces)
}
