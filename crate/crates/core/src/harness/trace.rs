//! Per-step traces and their CSV/JSON forms.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::optimizers::OptimizerKind;

pub const TRACE_HEADER: &str = "step,loss,grad_norm_sq,v_min,v_max,v_mean,fn_evals,block_forwards,elapsed_s";

/// Diverged runs report this multiple of their initial loss.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm_sq: Option<f64>,
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
    pub v_mean: Option<f64>,
    pub fn_evals: u64,
    pub block_forwards: u64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub eta: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_loss: f64,
    pub steps_run: u64,
    pub steps_to_threshold: Option<u64>,
    pub divergence: Option<Divergence>,
    pub fn_evals: u64,
    pub block_forwards: u64,
    /// `(1/T) Σ_{t<T} ‖∇F(x_t)‖²`, when the gradient is tracked every step.
    pub mean_grad_norm_sq: Option<f64>,
    /// Largest `‖x_t‖` seen.
    pub max_iterate_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    /// FZOO loss scales `σ_t`, one per step.
    pub sigmas: Vec<f64>,
    pub summary: TraceSummary,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Trace {
    pub fn diverged(&self) -> bool {
        self.summary.divergence.is_some()
    }

    pub fn sentinel(&self) -> f64 {
        DIVERGENCE_FACTOR * self.summary.initial_loss.abs()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.loss,
                opt(r.grad_norm_sq),
                opt(r.v_min),
                opt(r.v_max),
                opt(r.v_mean),
                r.fn_evals,
                r.block_forwards,
                r.elapsed_s
            );
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }

    /// Write `trace_seed<k>.csv` and `summary_seed<k>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let seed = self.summary.seed;
        std::fs::write(dir.join(format!("trace_seed{seed}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("summary_seed{seed}.json")), self.summary_json())?;
        Ok(())
    }
}

/// Parse a trace CSV back into records.
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRecord>> {
    let bad = |line: usize, what: &str| crate::error::invalid(format!("trace line {line}: {what}"));
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRACE_HEADER => {}
        _ => return Err(crate::error::invalid("trace header mismatch")),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad(n, "expected 9 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "bad number"));
        let optnum = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        let int = |s: &str| s.parse::<u64>().map_err(|_| bad(n, "bad integer"));
        out.push(TraceRecord {
            step: int(f[0])?,
            loss: num(f[1])?,
            grad_norm_sq: optnum(f[2])?,
            v_min: optnum(f[3])?,
            v_max: optnum(f[4])?,
            v_mean: optnum(f[5])?,
            fn_evals: int(f[6])?,
            block_forwards: int(f[7])?,
            elapsed_s: num(f[8])?,
        });
    }
    Ok(out)
}
