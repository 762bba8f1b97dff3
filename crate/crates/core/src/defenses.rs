//! Constant-rate padding defenses applied to cell traces.
//!
//! Both simulators are store-and-forward: a real cell leaves in the first
//! free slot of its direction at or after its own timestamp, cells of a
//! direction keep their order, and empty slots carry dummy cells. Outputs
//! are cell traces (`±1`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traces::{to_cell_sequence, Direction, Trace, DEFAULT_CELL_SIZE};

#[derive(Debug, Error, PartialEq)]
pub enum DefenseError {
    #[error("invalid defense parameter: {0}")]
    Param(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufloParams {
    /// Minimum transmission time in seconds.
    pub tau: f64,
    /// Slot interval in seconds.
    pub rho: f64,
    /// Bytes per cell; non-cell input is cut into cells of this size.
    pub cell_size: u32,
}

impl BufloParams {
    pub fn new(tau: f64, rho: f64, cell_size: u32) -> Result<Self, DefenseError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(DefenseError::Param("tau must be positive"));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(DefenseError::Param("rho must be positive"));
        }
        if cell_size == 0 {
            return Err(DefenseError::Param("cell size must be positive"));
        }
        Ok(BufloParams { tau, rho, cell_size })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TamarawParams {
    /// Per-direction counts are padded to a multiple of this.
    pub l: usize,
    pub rho_out: f64,
    pub rho_in: f64,
}

impl TamarawParams {
    pub fn new(l: usize, rho_out: f64, rho_in: f64) -> Result<Self, DefenseError> {
        if l == 0 {
            return Err(DefenseError::Param("L must be at least 1"));
        }
        if !(rho_out > 0.0 && rho_out.is_finite() && rho_in > 0.0 && rho_in.is_finite()) {
            return Err(DefenseError::Param("intervals must be positive"));
        }
        Ok(TamarawParams { l, rho_out, rho_in })
    }
}

/// A defended trace with, for each output cell, the input cell it carries
/// (`None` for dummies).
#[derive(Debug, Clone, PartialEq)]
pub struct Defended {
    pub trace: Trace,
    pub source: Vec<Option<usize>>,
}

fn cells_of(trace: &Trace, cell_size: u32) -> Trace {
    if trace.is_cell_form() {
        trace.clone()
    } else {
        to_cell_sequence(trace, cell_size)
    }
}

fn build(trace: &Trace, mut out: Vec<(f64, Direction, Option<usize>)>) -> Defended {
    // Stable sort: on equal times outgoing slots were pushed first.
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    let cells: Vec<(f64, i64)> = out.iter().map(|&(t, d, _)| (t, d.sign())).collect();
    let defended = Trace::from_cells(&cells)
        .expect("schedule is non-empty and ordered")
        .with_labels(trace.website_id.clone(), trace.visit_id.clone());
    Defended {
        trace: defended,
        source: out.into_iter().map(|x| x.2).collect(),
    }
}

/// BuFLO with strictly alternating outgoing/incoming slots every `rho`
/// seconds, starting with an outgoing slot at time 0. Sending stops after
/// the first slot at which every real cell is out and at least `tau`
/// seconds have elapsed.
pub fn apply_buflo_detailed(trace: &Trace, params: &BufloParams) -> Defended {
    let cells = cells_of(trace, params.cell_size);
    let mut queues: [Vec<(f64, usize)>; 2] = [Vec::new(), Vec::new()];
    for (i, p) in cells.packets().iter().enumerate() {
        let q = usize::from(p.direction() == Direction::Incoming);
        queues[q].push((p.time, i));
    }
    let mut next = [0usize; 2];
    let mut out = Vec::new();
    let mut slot = 0usize;
    loop {
        let t = slot as f64 * params.rho;
        let q = slot % 2;
        let dir = if q == 0 {
            Direction::Outgoing
        } else {
            Direction::Incoming
        };
        let real = match queues[q].get(next[q]) {
            Some(&(arrival, idx)) if arrival <= t => {
                next[q] += 1;
                Some(idx)
            }
            _ => None,
        };
        out.push((t, dir, real));
        let done = next[0] == queues[0].len() && next[1] == queues[1].len();
        if done && t >= params.tau {
            break;
        }
        slot += 1;
    }
    build(trace, out)
}

pub fn apply_buflo(trace: &Trace, params: &BufloParams) -> Trace {
    apply_buflo_detailed(trace, params).trace
}

/// Tamaraw: each direction sends one cell every `rho_out` / `rho_in`
/// seconds from time 0 until its last real cell is out, then pads until its
/// count is a multiple of `L`. Counts already at a multiple are left alone;
/// a direction without real cells sends nothing.
pub fn apply_tamaraw_detailed(trace: &Trace, params: &TamarawParams) -> Defended {
    let cells = cells_of(trace, DEFAULT_CELL_SIZE);
    let mut out = Vec::new();
    for (dir, rho) in [
        (Direction::Outgoing, params.rho_out),
        (Direction::Incoming, params.rho_in),
    ] {
        let real: Vec<(f64, usize)> = cells
            .packets()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.direction() == dir)
            .map(|(i, p)| (p.time, i))
            .collect();
        if real.is_empty() {
            continue;
        }
        let mut slot = 0usize;
        for &(arrival, idx) in &real {
            while (slot as f64) * rho < arrival {
                out.push((slot as f64 * rho, dir, None));
                slot += 1;
            }
            out.push((slot as f64 * rho, dir, Some(idx)));
            slot += 1;
        }
        while !slot.is_multiple_of(params.l) {
            out.push((slot as f64 * rho, dir, None));
            slot += 1;
        }
    }
    build(trace, out)
}

pub fn apply_tamaraw(trace: &Trace, params: &TamarawParams) -> Trace {
    apply_tamaraw_detailed(trace, params).trace
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub real_cells: usize,
    pub defended_cells: usize,
    /// `defended_cells / real_cells`.
    pub bandwidth: f64,
    /// Defended duration over original duration; `None` for a zero-length
    /// original.
    pub latency: Option<f64>,
}

pub fn overhead(original: &Trace, defended: &Trace, cell_size: u32) -> Overhead {
    let real = cells_of(original, cell_size);
    Overhead {
        real_cells: real.len(),
        defended_cells: defended.len(),
        bandwidth: defended.len() as f64 / real.len() as f64,
        latency: (real.duration() > 0.0).then(|| defended.duration() / real.duration()),
    }
}
