//! Step rules. Every rule consumes projected-gradient scalars or an estimate
//! built from replayed directions; none of them stores a direction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, ZoError};
use crate::estimators::{EvalCounter, Partition};
use crate::objectives::Objective;
use crate::perturb::{fill_direction, PerturbationSpec, ReplayCoordinate};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_MEAZO_BETA: f64 = 0.999;
pub const DEFAULT_ZETA: f64 = 1e-8;
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_Q: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "zo-sgd")]
    ZoSgd,
    #[serde(rename = "zo-adam")]
    ZoAdam,
    #[serde(rename = "radazo")]
    RAdaZo,
    #[serde(rename = "meazo")]
    Meazo,
    #[serde(rename = "meazo-grouped")]
    MeazoGrouped,
    #[serde(rename = "fzoo")]
    Fzoo,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 6] = [
        OptimizerKind::ZoSgd,
        OptimizerKind::ZoAdam,
        OptimizerKind::RAdaZo,
        OptimizerKind::Meazo,
        OptimizerKind::MeazoGrouped,
        OptimizerKind::Fzoo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::ZoSgd => "zo-sgd",
            OptimizerKind::ZoAdam => "zo-adam",
            OptimizerKind::RAdaZo => "radazo",
            OptimizerKind::Meazo => "meazo",
            OptimizerKind::MeazoGrouped => "meazo-grouped",
            OptimizerKind::Fzoo => "fzoo",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = ZoError;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown optimizer {s:?}")))
    }
}

/// `1 − β^t`.
#[inline]
fn bias_correction(beta: f64, t: u64) -> f64 {
    -f64::exp_m1(t as f64 * beta.ln())
}

fn check_finite(x: &[f64], values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(&bad) => Err(ZoError::NumericFailure { point: x.to_vec(), value: bad }),
        None => Ok(()),
    }
}

fn check_eta_zeta(eta: f64, zeta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(invalid(format!("step size must be positive, got {eta}")));
    }
    if !(zeta > 0.0 && zeta.is_finite()) {
        return Err(invalid(format!("zeta must be positive, got {zeta}")));
    }
    Ok(())
}

/// `x ← x − η ĝ`.
pub fn zo_sgd_step(x: &mut [f64], estimate: &[f64], eta: f64) -> Result<()> {
    if !(eta > 0.0) {
        return Err(invalid(format!("step size must be positive, got {eta}")));
    }
    if x.len() != estimate.len() {
        return Err(invalid("estimate and point differ in dimension"));
    }
    check_finite(x, estimate)?;
    for (xi, g) in x.iter_mut().zip(estimate) {
        *xi -= eta * g;
    }
    Ok(())
}

/// Per-coordinate first and second moment EMAs, shared by ZO-Adam, R-AdaZO and
/// the first-order Adam reference.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub t: u64,
    pub eta: f64,
    pub zeta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SecondMoment {
    RawEstimate,
    FirstMoment,
}

impl AdamState {
    pub fn new(d: usize, eta: f64, beta1: f64, beta2: f64, zeta: f64) -> Result<Self> {
        if d == 0 {
            return Err(invalid("parameter dimension must be at least 1"));
        }
        check_eta_zeta(eta, zeta)?;
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(Self { m: vec![0.0; d], v: vec![0.0; d], beta1, beta2, t: 0, eta, zeta })
    }

    /// Reals kept between steps.
    pub fn persistent_floats(&self) -> usize {
        self.m.len() + self.v.len()
    }

    /// Bias-corrected `v̂`.
    pub fn v_hat(&self) -> Vec<f64> {
        let c = bias_correction(self.beta2, self.t.max(1));
        self.v.iter().map(|v| v / c).collect()
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], rule: SecondMoment) -> Result<()> {
        if x.len() != self.m.len() || g.len() != self.m.len() {
            return Err(invalid("estimate and state differ in dimension"));
        }
        check_finite(x, g)?;
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = bias_correction(b1, self.t);
        let c2 = bias_correction(b2, self.t);
        for k in 0..x.len() {
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g[k];
            let second = match rule {
                SecondMoment::RawEstimate => g[k],
                SecondMoment::FirstMoment => self.m[k],
            };
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * second * second;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            x[k] -= self.eta * m_hat / (v_hat.sqrt() + self.zeta);
        }
        Ok(())
    }

    /// ZO-Adam: `v` tracks the squared estimate.
    pub fn zo_adam_step(&mut self, x: &mut [f64], estimate: &[f64]) -> Result<()> {
        self.step(x, estimate, SecondMoment::RawEstimate)
    }

    /// R-AdaZO: `v` tracks the squared (uncorrected) first moment.
    pub fn radazo_step(&mut self, x: &mut [f64], estimate: &[f64]) -> Result<()> {
        self.step(x, estimate, SecondMoment::FirstMoment)
    }
}

/// MEAZO state: a single scalar EMA of `g²` with `g = (1/q) Σ Δ_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeazoState {
    pub v: f64,
    pub t: u64,
    pub beta: f64,
    pub eta: f64,
    pub zeta: f64,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(invalid(format!("beta must lie in (0, 1), got {beta}")));
    }
    Ok(())
}

impl MeazoState {
    pub fn new(eta: f64, beta: f64, zeta: f64) -> Result<Self> {
        check_eta_zeta(eta, zeta)?;
        check_beta(beta)?;
        Ok(Self { v: 0.0, t: 0, beta, eta, zeta })
    }

    pub fn persistent_floats(&self) -> usize {
        1
    }

    pub fn v_hat(&self) -> f64 {
        self.v / bias_correction(self.beta, self.t.max(1))
    }

    /// Fold `g = mean(scalars)` into `v` and return the step coefficient
    /// `η / (√v̂ + ζ)`.
    pub fn update_moment(&mut self, scalars: &[f64]) -> Result<f64> {
        if scalars.is_empty() {
            return Err(invalid("q must be at least 1"));
        }
        check_finite(&[], scalars)?;
        let g = scalars.iter().sum::<f64>() / scalars.len() as f64;
        self.t += 1;
        self.v = self.beta * self.v + (1.0 - self.beta) * g * g;
        let v_hat = self.v / bias_correction(self.beta, self.t);
        Ok(self.eta / (v_hat.sqrt() + self.zeta))
    }

    /// `x ← x − η/(√v̂ + ζ) · (s/q) Σ Δ_i u_i`, regenerating each `u_i` from
    /// `(step, i)` so no estimate vector is materialized.
    pub fn step(&mut self, x: &mut [f64], scalars: &[f64], spec: &PerturbationSpec, step: u64) -> Result<()> {
        if x.is_empty() {
            return Err(invalid("parameter dimension must be at least 1"));
        }
        let coef = self.update_moment(scalars)?;
        let factor = coef * spec.distribution.estimator_scale(x.len()) / scalars.len() as f64;
        let mut u = vec![0.0; x.len()];
        for (i, &delta) in scalars.iter().enumerate() {
            fill_direction(spec, ReplayCoordinate::new(step, i as u64), &mut u)?;
            let w = factor * delta;
            for (xk, uk) in x.iter_mut().zip(&u) {
                *xk -= w * uk;
            }
        }
        Ok(())
    }
}

/// One scalar EMA per block.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedMeazoState {
    pub v: Vec<f64>,
    pub t: u64,
    pub beta: f64,
    pub eta: f64,
    pub zeta: f64,
}

impl GroupedMeazoState {
    pub fn new(p: usize, eta: f64, beta: f64, zeta: f64) -> Result<Self> {
        if p == 0 {
            return Err(invalid("grouped state needs at least one block"));
        }
        check_eta_zeta(eta, zeta)?;
        check_beta(beta)?;
        Ok(Self { v: vec![0.0; p], t: 0, beta, eta, zeta })
    }

    pub fn persistent_floats(&self) -> usize {
        self.v.len()
    }

    pub fn v_hat(&self) -> Vec<f64> {
        let c = bias_correction(self.beta, self.t.max(1));
        self.v.iter().map(|v| v / c).collect()
    }

    /// `scalars[i][j]` are the per-block projected gradients of the grouped estimator.
    pub fn step(
        &mut self,
        x: &mut [f64],
        scalars: &[Vec<f64>],
        partition: &Partition,
        spec: &PerturbationSpec,
        step: u64,
    ) -> Result<()> {
        let p = self.v.len();
        if partition.len() != p || partition.dim() != x.len() {
            return Err(invalid(format!(
                "partition has {} blocks over {} coordinates; state expects {p} blocks over {}",
                partition.len(),
                partition.dim(),
                x.len()
            )));
        }
        if scalars.is_empty() {
            return Err(invalid("q must be at least 1"));
        }
        if scalars.iter().any(|row| row.len() != p) {
            return Err(invalid("scalar rows must have one entry per block"));
        }
        for row in scalars {
            check_finite(x, row)?;
        }
        let q = scalars.len() as f64;
        self.t += 1;
        let c = bias_correction(self.beta, self.t);
        let scale = spec.distribution.estimator_scale(x.len()) / q;
        let mut coefs = Vec::with_capacity(p);
        for j in 0..p {
            let g = scalars.iter().map(|row| row[j]).sum::<f64>() / q;
            self.v[j] = self.beta * self.v[j] + (1.0 - self.beta) * g * g;
            let v_hat = self.v[j] / c;
            coefs.push(self.eta / (v_hat.sqrt() + self.zeta) * scale);
        }
        let mut u = vec![0.0; x.len()];
        for (i, row) in scalars.iter().enumerate() {
            fill_direction(spec, ReplayCoordinate::new(step, i as u64), &mut u)?;
            for (j, block) in partition.blocks().iter().enumerate() {
                let w = coefs[j] * row[j];
                for &k in block {
                    x[k] -= w * u[k];
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FzooState {
    pub eta: f64,
    pub epsilon: f64,
    pub q: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FzooStep {
    /// Population standard deviation of the perturbed losses.
    pub sigma: f64,
    pub evals: EvalCounter,
}

impl FzooState {
    pub fn new(eta: f64, epsilon: f64, q: usize) -> Result<Self> {
        if q < 2 {
            return Err(invalid(format!("FZOO needs q >= 2, got {q}")));
        }
        if !(eta > 0.0) || !(epsilon > 0.0) {
            return Err(invalid("FZOO step size and epsilon must be positive"));
        }
        Ok(Self { eta, epsilon, q })
    }

    /// One-sided step: `q + 1` evaluations, then
    /// `x ← x − η/(ε q σ) Σ (f_i − f_0) u_i`.
    pub fn step<O: Objective + ?Sized>(
        &self,
        f: &O,
        x: &mut [f64],
        spec: &PerturbationSpec,
        step: u64,
    ) -> Result<FzooStep> {
        if self.q < 2 {
            return Err(invalid(format!("FZOO needs q >= 2, got {}", self.q)));
        }
        let d = x.len();
        let eval = |p: &[f64]| -> Result<f64> {
            let v = f.value(p);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(ZoError::NumericFailure { point: p.to_vec(), value: v })
            }
        };
        let f0 = eval(x)?;
        let mut u = vec![0.0; d];
        let mut probe = vec![0.0; d];
        let mut losses = Vec::with_capacity(self.q);
        for i in 0..self.q {
            fill_direction(spec, ReplayCoordinate::new(step, i as u64), &mut u)?;
            for ((p, xk), uk) in probe.iter_mut().zip(x.iter()).zip(&u) {
                *p = xk + self.epsilon * uk;
            }
            losses.push(eval(&probe)?);
        }
        let evals = EvalCounter {
            objective_evals: self.q as u64 + 1,
            full_forward_calls: self.q as u64 + 1,
            block_forward_calls: f.layered().map_or(0, |c| (c.blocks() * (self.q + 1)) as u64),
        };
        let sigma = population_std(&losses);
        if !(sigma > 0.0) {
            return Err(ZoError::DegenerateScale);
        }
        let coef = self.eta / (self.epsilon * self.q as f64 * sigma);
        for (i, fi) in losses.iter().enumerate() {
            fill_direction(spec, ReplayCoordinate::new(step, i as u64), &mut u)?;
            let w = coef * (fi - f0);
            for (xk, uk) in x.iter_mut().zip(&u) {
                *xk -= w * uk;
            }
        }
        Ok(FzooStep { sigma, evals })
    }
}

pub(crate) fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}
