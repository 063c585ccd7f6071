//! Per-iteration diagnostics shared by every solver.

use nalgebra::DVector;

/// Diagnostics for one committed iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    /// Number of updates applied so far (1 for the first committed iterate).
    pub k: usize,
    /// `|x_k - T(x_k)|_inf` with the exact operator.
    pub residual: f64,
    /// `|x_k - x*|_inf`, or -1 without an oracle.
    pub dist_to_opt: f64,
    pub inner_backtracks: usize,
    pub safeguard_rejections: usize,
    /// Zero unless timing was requested.
    pub wall_ns: u64,
}

/// Everything a run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub initial_residual: f64,
    pub initial_dist: f64,
    pub records: Vec<IterRecord>,
    /// Last iterate (flattened row-major for Q-functions).
    pub last: DVector<f64>,
    /// Exact operator evaluations, including rejected candidates.
    pub operator_evals: usize,
    /// Linear solves that needed a ridge or fallback.
    pub regularized_solves: usize,
    /// Largest `|extra term| / bound` seen by a perturbation safeguard.
    pub max_perturbation_ratio: Option<f64>,
}

impl RunTrace {
    pub(crate) fn new(initial_residual: f64, initial_dist: f64, start: DVector<f64>) -> Self {
        RunTrace {
            initial_residual,
            initial_dist,
            records: Vec::new(),
            last: start,
            operator_evals: 1,
            regularized_solves: 0,
            max_perturbation_ratio: None,
        }
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.residual).collect()
    }

    pub fn final_residual(&self) -> f64 {
        self.records.last().map_or(self.initial_residual, |r| r.residual)
    }

    pub fn total_rejections(&self) -> usize {
        self.records.iter().map(|r| r.safeguard_rejections).sum()
    }
}

/// Wall-clock stopwatch that reads zero when disabled.
pub(crate) struct Stopwatch(Option<std::time::Instant>);

impl Stopwatch {
    pub(crate) fn start(enabled: bool) -> Self {
        Stopwatch(enabled.then(std::time::Instant::now))
    }

    pub(crate) fn lap(&mut self) -> u64 {
        match self.0.as_mut() {
            Some(t) => {
                let ns = t.elapsed().as_nanos() as u64;
                *t = std::time::Instant::now();
                ns
            }
            None => 0,
        }
    }
}
