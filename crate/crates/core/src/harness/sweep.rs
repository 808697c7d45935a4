//! Two-stage step-size sweep, robustness curves and the FZOO step-size transfer.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, ZoError};
use crate::harness::config::{ExperimentConfig, Metric};
use crate::harness::run::run;
use crate::harness::trace::Trace;

pub const COARSE_GRID: [f64; 11] = [1e-6, 5e-6, 1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1];

/// Metric of one trace; diverged runs get the sentinel.
pub fn trace_metric(trace: &Trace, metric: Metric) -> f64 {
    let sentinel = trace.sentinel();
    if trace.diverged() {
        return sentinel;
    }
    let v = match metric {
        Metric::Final => trace.summary.final_loss,
        Metric::Best => trace.summary.best_loss,
    };
    v.min(sentinel)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub eta: f64,
    /// Mean over seeds of the sweep metric.
    pub mean: f64,
    pub std: f64,
    pub final_mean: f64,
    pub best_mean: f64,
    pub per_seed: Vec<f64>,
    pub diverged: usize,
}

impl GridPoint {
    fn from_traces(eta: f64, traces: &[Trace], metric: Metric) -> Self {
        let per_seed: Vec<f64> = traces.iter().map(|t| trace_metric(t, metric)).collect();
        let finals: Vec<f64> = traces.iter().map(|t| trace_metric(t, Metric::Final)).collect();
        let bests: Vec<f64> = traces.iter().map(|t| trace_metric(t, Metric::Best)).collect();
        let (mean, std) = mean_std(&per_seed);
        GridPoint {
            eta,
            mean,
            std,
            final_mean: mean_std(&finals).0,
            best_mean: mean_std(&bests).0,
            per_seed,
            diverged: traces.iter().filter(|t| t.diverged()).count(),
        }
    }

    pub fn all_diverged(&self) -> bool {
        self.diverged == self.per_seed.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub metric: Metric,
    /// Every evaluated step size, ascending.
    pub grid: Vec<GridPoint>,
    pub coarse_best: f64,
    /// Neighbors of the coarse winner, virtual ones included.
    pub bracket: (f64, f64),
    pub best_eta: f64,
}

impl SweepResult {
    pub fn best(&self) -> &GridPoint {
        self.grid.iter().find(|g| g.eta == self.best_eta).expect("best step size is on the grid")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("eta,mean,std,final_mean,best_mean,diverged\n");
        for g in &self.grid {
            let _ = writeln!(out, "{},{},{},{},{},{}", g.eta, g.mean, g.std, g.final_mean, g.best_mean, g.diverged);
        }
        out
    }
}

/// Index of the lowest mean; the first (smallest η) wins ties.
fn argmin(points: &[GridPoint]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        if p.mean < points[best].mean {
            best = i;
        }
    }
    best
}

/// Neighbors of `grid[i]`; beyond either end the grid's own spacing pattern
/// is continued by one point.
pub fn coarse_neighbors(grid: &[f64], i: usize) -> (f64, f64) {
    let n = grid.len();
    let lower = if i > 0 {
        grid[i - 1]
    } else if n >= 3 {
        grid[0] / (grid[2] / grid[1])
    } else {
        grid[0] / 10.0
    };
    let upper = if i + 1 < n {
        grid[i + 1]
    } else if n >= 3 {
        grid[n - 1] * (grid[n - 2] / grid[n - 3])
    } else {
        grid[n - 1] * 10.0
    };
    (lower, upper)
}

fn mantissa_value(m: u32, k: i32) -> f64 {
    format!("{m}e{k}").parse().expect("well-formed literal")
}

/// All `m·10^k` with `m ∈ 1..=9` strictly inside `(lo, hi)`, ascending.
pub fn integer_mantissas_between(lo: f64, hi: f64) -> Vec<f64> {
    if !(lo > 0.0 && hi > lo) {
        return Vec::new();
    }
    let k_lo = lo.log10().floor() as i32 - 1;
    let k_hi = hi.log10().ceil() as i32 + 1;
    let mut out = Vec::new();
    for k in k_lo..=k_hi {
        for m in 1..=9 {
            let v = mantissa_value(m, k);
            if v > lo && v < hi {
                out.push(v);
            }
        }
    }
    out
}

/// Fine-stage candidates around `winner`, including the winner itself.
pub fn fine_candidates(lower: f64, winner: f64, upper: f64) -> Vec<f64> {
    let mut out = integer_mantissas_between(lower, winner);
    out.push(winner);
    out.extend(integer_mantissas_between(winner, upper));
    out
}

fn evaluate(base: &ExperimentConfig, etas: &[f64], metric: Metric) -> Result<Vec<GridPoint>> {
    etas.par_iter()
        .map(|&eta| run(&base.with_eta(eta)).map(|traces| GridPoint::from_traces(eta, &traces, metric)))
        .collect()
}

/// Coarse grid, then integer-mantissa refinement inside the brackets around
/// the coarse winner. The winner over everything evaluated is `best_eta`.
pub fn coarse_fine_sweep(base: &ExperimentConfig) -> Result<SweepResult> {
    base.validate()?;
    let metric = base.sweep.metric;
    let mut coarse = base.sweep.coarse.clone().unwrap_or_else(|| COARSE_GRID.to_vec());
    coarse.sort_by(f64::total_cmp);
    coarse.dedup();
    let coarse_points = evaluate(base, &coarse, metric)?;
    if coarse_points.iter().all(GridPoint::all_diverged) {
        return Err(ZoError::AllDiverged);
    }
    let w = argmin(&coarse_points);
    let coarse_best = coarse[w];
    let bracket = coarse_neighbors(&coarse, w);
    let fresh: Vec<f64> = fine_candidates(bracket.0, coarse_best, bracket.1)
        .into_iter()
        .filter(|eta| !coarse.contains(eta))
        .collect();
    let mut grid = coarse_points;
    grid.extend(evaluate(base, &fresh, metric)?);
    grid.sort_by(|a, b| a.eta.total_cmp(&b.eta));
    let best_eta = grid[argmin(&grid)].eta;
    Ok(SweepResult { metric, grid, coarse_best, bracket, best_eta })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub eta: f64,
    /// `η / η*`.
    pub ratio: f64,
    pub best: f64,
    pub last: f64,
    pub diverged: usize,
}

pub fn robustness_curve(sweep: &SweepResult) -> Vec<RobustnessRow> {
    sweep
        .grid
        .iter()
        .map(|g| RobustnessRow {
            eta: g.eta,
            ratio: g.eta / sweep.best_eta,
            best: g.best_mean,
            last: g.final_mean,
            diverged: g.diverged,
        })
        .collect()
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut out = String::from("eta,ratio,best,last,diverged\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.eta, r.ratio, r.best, r.last, r.diverged);
    }
    out
}

/// `log10(max η) − log10(min η)` over `{η : last ≤ factor · min last}`.
pub fn robust_log_width(rows: &[RobustnessRow], factor: f64) -> f64 {
    let best = rows.iter().map(|r| r.last).fold(f64::INFINITY, f64::min);
    let inside: Vec<f64> = rows.iter().filter(|r| r.last <= factor * best).map(|r| r.eta).collect();
    match (inside.first(), inside.last()) {
        (Some(lo), Some(hi)) => hi.log10() - lo.log10(),
        _ => 0.0,
    }
}

/// `η_FZOO / mean(σ_t)`.
pub fn transfer_step_size(eta_fzoo: f64, sigmas: &[f64]) -> Result<f64> {
    if sigmas.is_empty() {
        return Err(invalid("no loss-scale values to transfer from"));
    }
    let mean = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(invalid(format!("mean loss scale must be positive, got {mean}")));
    }
    Ok(eta_fzoo / mean)
}
