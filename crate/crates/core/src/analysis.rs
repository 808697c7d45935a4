//! Numerical checks of the squared-moment formulas, the smoothing lemmas and
//! the convergence bounds, plus the second-moment collapse study.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, ZoError};
use crate::estimators::{projected_scalars, zo_gradient};
use crate::objectives::{
    make_block_quadratic, norm_sq, smoothed_gradient, smoothed_value, Affine, BlockQuadratic, Objective, Regime,
    SmoothingLaw,
};
use crate::optimizers::{AdamState, MeazoState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_ZETA};
use crate::perturb::{initial_point, Distribution, PerturbationSpec};

const MC_CHUNK: usize = 4096;

/// Per-coordinate sums of `y` and `y²` over `n` trials, reduced in chunk order.
fn mc_sums<F>(n: usize, d: usize, trial: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(u64, &mut [f64]) -> Result<()> + Sync,
{
    let chunks = n.div_ceil(MC_CHUNK);
    let parts: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut s1 = vec![0.0; d];
            let mut s2 = vec![0.0; d];
            let mut y = vec![0.0; d];
            for t in c * MC_CHUNK..n.min((c + 1) * MC_CHUNK) {
                trial(t as u64, &mut y)?;
                for k in 0..d {
                    s1[k] += y[k];
                    s2[k] += y[k] * y[k];
                }
            }
            Ok((s1, s2))
        })
        .collect();
    let mut s1 = vec![0.0; d];
    let mut s2 = vec![0.0; d];
    for part in parts {
        let (a, b) = part?;
        for k in 0..d {
            s1[k] += a[k];
            s2[k] += b[k];
        }
    }
    Ok((s1, s2))
}

fn mean_and_se(s1: &[f64], s2: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let nf = n as f64;
    let mean: Vec<f64> = s1.iter().map(|s| s / nf).collect();
    let se = s2
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / nf - m * m).max(0.0) / (nf - 1.0)).sqrt())
        .collect();
    (mean, se)
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff.abs() / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentReport {
    /// Elementwise mean of `ĝ²` over the trials.
    pub empirical: Vec<f64>,
    pub predicted: Vec<f64>,
    /// Monte Carlo standard error of each `empirical` entry.
    pub std_error: Vec<f64>,
    pub max_rel_err: f64,
    /// Largest `|empirical − predicted| / std_error`.
    pub max_z: f64,
    pub n_trials: usize,
}

impl MomentReport {
    /// One CSV row per coordinate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("coord,empirical,predicted,std_error\n");
        for k in 0..self.empirical.len() {
            let _ = writeln!(out, "{k},{},{},{}", self.empirical[k], self.predicted[k], self.std_error[k]);
        }
        out
    }
}

/// Closed-form `E[ĝ²]` of the q-sample estimator in the `ε → 0` limit.
pub fn predicted_squared_moment(g: &[f64], q: usize, distribution: Distribution) -> Result<Vec<f64>> {
    if q == 0 {
        return Err(invalid("q must be at least 1"));
    }
    if g.is_empty() {
        return Err(invalid("gradient must be non-empty"));
    }
    let d = g.len() as f64;
    let qf = q as f64;
    let n2 = norm_sq(g);
    match distribution {
        Distribution::Gaussian => Ok(g.iter().map(|gk| (n2 + gk * gk) / qf + gk * gk).collect()),
        Distribution::UniformSphere => Ok(g
            .iter()
            .map(|gk| d * (n2 + 2.0 * gk * gk) / (qf * (d + 2.0)) + (qf - 1.0) / qf * gk * gk)
            .collect()),
        other => Err(invalid(format!("no closed-form squared moment for {other} directions"))),
    }
}

/// Monte Carlo `E[ĝ²]` on `f(x) = gᵀx`, where central differences are exact.
/// Trial `n` replays its directions from step `n` of `seed`.
pub fn mc_squared_moment(g: &[f64], q: usize, distribution: Distribution, n: usize, seed: u64) -> Result<MomentReport> {
    if n < 10_000 {
        return Err(invalid(format!("need at least 10^4 trials, got {n}")));
    }
    let predicted = predicted_squared_moment(g, q, distribution)?;
    let f = Affine { slope: g.to_vec(), offset: 0.0 };
    let spec = PerturbationSpec::new(distribution, 1.0, seed)?;
    let x = vec![0.0; g.len()];
    let (s1, s2) = mc_sums(n, g.len(), |t, y| {
        let est = zo_gradient(&f, &x, &spec, q, t)?;
        for (yk, gk) in y.iter_mut().zip(&est.gradient) {
            *yk = gk * gk;
        }
        Ok(())
    })?;
    let (empirical, std_error) = mean_and_se(&s1, &s2, n);
    let mut max_rel_err: f64 = 0.0;
    let mut max_z: f64 = 0.0;
    for k in 0..g.len() {
        let diff = empirical[k] - predicted[k];
        let rel = if predicted[k] > 0.0 { diff.abs() / predicted[k] } else { diff.abs() };
        max_rel_err = max_rel_err.max(rel);
        max_z = max_z.max(z_score(diff, std_error[k]));
    }
    Ok(MomentReport { empirical, predicted, std_error, max_rel_err, max_z, n_trials: n })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanReport {
    pub mean: Vec<f64>,
    pub target: Vec<f64>,
    pub std_error: Vec<f64>,
    pub max_z: f64,
    pub n_trials: usize,
}

/// Monte Carlo mean of the q-sample estimator at `x`, compared with `target`.
pub fn mc_estimator_mean<O: Objective + ?Sized>(
    f: &O,
    x: &[f64],
    spec: &PerturbationSpec,
    q: usize,
    n: usize,
    target: &[f64],
) -> Result<MeanReport> {
    if n < 2 {
        return Err(invalid("need at least two trials"));
    }
    if target.len() != x.len() {
        return Err(invalid("target and point differ in dimension"));
    }
    let (s1, s2) = mc_sums(n, x.len(), |t, y| {
        let est = zo_gradient(f, x, spec, q, t)?;
        y.copy_from_slice(&est.gradient);
        Ok(())
    })?;
    let (mean, std_error) = mean_and_se(&s1, &s2, n);
    let max_z = (0..x.len())
        .map(|k| z_score(mean[k] - target[k], std_error[k]))
        .fold(0.0, f64::max);
    Ok(MeanReport { mean, target: target.to_vec(), std_error, max_z, n_trials: n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VtStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Excess kurtosis; 0 for a constant vector.
    pub kurtosis: f64,
}

impl VtStats {
    pub const LABELS: [&'static str; 5] = ["Min.", "Max.", "Mean", "Stan. Dev.", "Kurtosis"];

    pub fn values(&self) -> [f64; 5] {
        [self.min, self.max, self.mean, self.std, self.kurtosis]
    }
}

pub fn vt_statistics(v: &[f64]) -> Result<VtStats> {
    if v.is_empty() {
        return Err(invalid("statistics of an empty vector"));
    }
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(VtStats { min, max, mean: min, std: 0.0, kurtosis: 0.0 });
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = v.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    Ok(VtStats { min, max, mean, std: m2.sqrt(), kurtosis: m4 / (m2 * m2) - 3.0 })
}

/// Statistic-by-column table with one column per named vector.
pub fn format_table3(columns: &[(&str, VtStats)]) -> String {
    let mut out = String::from("Statistic");
    for (name, _) in columns {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for (row, label) in VtStats::LABELS.iter().enumerate() {
        out.push_str(label);
        for (_, stats) in columns {
            let _ = write!(out, ",{:.2e}", stats.values()[row]);
        }
        out.push('\n');
    }
    out
}

/// `(max − min) / mean`, zero when all entries agree.
pub fn spread(v: &[f64]) -> f64 {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() || min == max {
        return 0.0;
    }
    (max - min) / (v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollapsePoint {
    pub spread: f64,
    /// `mean_k |v_k − ‖∇f‖²/q| / (‖∇f‖²/q)`.
    pub theory_target_err: f64,
}

pub fn vt_collapse_metric(v_trace: &[Vec<f64>], grad_norm_sq: Option<&[f64]>, q: usize) -> Result<Vec<CollapsePoint>> {
    let grads = grad_norm_sq.ok_or_else(|| invalid("collapse metric needs a gradient oracle"))?;
    if grads.len() != v_trace.len() {
        return Err(invalid("one gradient norm per trace entry is required"));
    }
    if q == 0 {
        return Err(invalid("q must be at least 1"));
    }
    v_trace
        .iter()
        .zip(grads)
        .map(|(v, &gn)| {
            if v.is_empty() {
                return Err(invalid("empty second-moment vector in trace"));
            }
            let target = gn / q as f64;
            let err = v.iter().map(|vk| (vk - target).abs()).sum::<f64>() / v.len() as f64 / target;
            Ok(CollapsePoint { spread: spread(v), theory_target_err: err })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    pub d: usize,
    pub q: usize,
    pub epsilon: f64,
    pub sigma: f64,
    pub sigma0_sq: f64,
    pub sigma1_sq: f64,
    /// Gradient-norm bound.
    pub g: f64,
    /// Smoothness.
    pub l: f64,
    /// `√β·G + ζ`.
    pub alpha: f64,
    pub beta: f64,
    pub zeta: f64,
}

/// `(σ₀², σ₁²)` of the affine variance bound for sphere directions.
pub fn affine_variance_constants(d: usize, q: usize, epsilon: f64, l: f64, sigma: f64) -> Result<(f64, f64)> {
    if d == 0 || q == 0 {
        return Err(invalid("d and q must be at least 1"));
    }
    let (df, qf) = (d as f64, q as f64);
    let sigma0_sq = df * epsilon * epsilon * l * l / (2.0 * qf) * (8.0 + df) + ((2.0 * df - 1.0) / qf + 1.0) * sigma * sigma;
    Ok((sigma0_sq, (4.0 * df - 1.0) / qf))
}

#[allow(clippy::too_many_arguments)]
pub fn theorem_constants(
    d: usize,
    q: usize,
    epsilon: f64,
    l: f64,
    sigma: f64,
    g: f64,
    beta: f64,
    zeta: f64,
) -> Result<TheoremConstants> {
    let (sigma0_sq, sigma1_sq) = affine_variance_constants(d, q, epsilon, l, sigma)?;
    Ok(TheoremConstants {
        d,
        q,
        epsilon,
        sigma,
        sigma0_sq,
        sigma1_sq,
        g,
        l,
        alpha: beta.sqrt() * g + zeta,
        beta,
        zeta,
    })
}

// Relative slack for parameters solved for equality: recovering `1 − β` from a
// `β` close to 1 keeps only a few significant digits.
const BOUNDARY_SLACK: f64 = 1.0 + 1e-9;

/// `max{G(1+σ₁²)√(1−β)/ζ, Lη/(2ζ)} ≤ 1/4`.
pub fn check_meazo_condition(g: f64, l: f64, sigma1_sq: f64, beta: f64, eta: f64, zeta: f64) -> bool {
    let first = g * (1.0 + sigma1_sq) * (1.0 - beta).sqrt() / zeta;
    let second = l * eta / (2.0 * zeta);
    first.max(second) <= 0.25 * BOUNDARY_SLACK
}

/// `2α[D/(ηT) + σ₀²/(2ζ)] + ε²L²(α/(ηT) + 2)`.
pub fn meazo_bound(c: &TheoremConstants, f0_minus_fstar: f64, eta: f64, t: u64, epsilon: f64) -> Result<f64> {
    if t == 0 {
        return Err(invalid("T must be at least 1"));
    }
    if !check_meazo_condition(c.g, c.l, c.sigma1_sq, c.beta, eta, c.zeta) {
        return Err(ZoError::Precondition(format!(
            "step-size condition violated: G(1+σ₁²)√(1−β)/ζ = {:.3e}, Lη/(2ζ) = {:.3e}",
            c.g * (1.0 + c.sigma1_sq) * (1.0 - c.beta).sqrt() / c.zeta,
            c.l * eta / (2.0 * c.zeta)
        )));
    }
    let et = eta * t as f64;
    Ok(2.0 * c.alpha * (f0_minus_fstar / et + c.sigma0_sq / (2.0 * c.zeta))
        + epsilon * epsilon * c.l * c.l * (c.alpha / et + 2.0))
}

/// ZO-SGD bound with sphere directions. The smoothing term uses
/// `K₀/2 + 2` with `K₀ = 1/(ηT(1 − Lη(1+σ₁²)/2))`.
#[allow(clippy::too_many_arguments)]
pub fn zosgd_bound(
    d: usize,
    q: usize,
    epsilon: f64,
    l: f64,
    sigma: f64,
    eta: f64,
    t: u64,
    f0_minus_fstar: f64,
) -> Result<f64> {
    if t == 0 {
        return Err(invalid("T must be at least 1"));
    }
    let (sigma0_sq, sigma1_sq) = affine_variance_constants(d, q, epsilon, l, sigma)?;
    let limit = 2.0 / ((1.0 + sigma1_sq) * l);
    if !(eta > 0.0 && eta < limit) {
        return Err(ZoError::Precondition(format!("ZO-SGD needs 0 < η < {limit:.6e}, got {eta}")));
    }
    let shrink = 1.0 - l * eta * (1.0 + sigma1_sq) / 2.0;
    let k0 = 1.0 / (eta * t as f64 * shrink);
    let k1 = l * eta * sigma0_sq / (2.0 - l * eta * (1.0 + sigma1_sq));
    Ok(k0 * f0_minus_fstar + k1 + epsilon * epsilon * l * l * (k0 / 2.0 + 2.0))
}

/// `D/(ηT(1 − Lη/2)) + Lησ²/(2 − Lη)`.
pub fn classical_sgd_bound(f0_minus_fstar: f64, l: f64, sigma: f64, eta: f64, t: u64) -> Result<f64> {
    if !(eta > 0.0 && eta < 2.0 / l) || t == 0 {
        return Err(ZoError::Precondition(format!("SGD needs 0 < η < 2/L and T ≥ 1, got η = {eta}")));
    }
    Ok(f0_minus_fstar / (eta * t as f64 * (1.0 - l * eta / 2.0)) + l * eta * sigma * sigma / (2.0 - l * eta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmoothingReport {
    pub points: usize,
    pub max_function_error: f64,
    pub max_gradient_error: f64,
    /// Smallest `rhs − lhs` of the function-error lemma.
    pub worst_function_slack: f64,
    /// Smallest `rhs − lhs` of the gradient-error lemma.
    pub worst_gradient_slack: f64,
}

/// `|F_ε − F| ≤ (ε²/2)·L·E‖v‖²` and `‖∇F_ε − ∇F‖ ≤ εL·E‖v‖` at each point.
pub fn check_smoothing_inequalities(
    quad: &BlockQuadratic,
    epsilon: f64,
    law: SmoothingLaw,
    points: &[Vec<f64>],
) -> Result<SmoothingReport> {
    let d = quad.dim();
    let l = quad.lambda_max();
    let f_rhs = 0.5 * epsilon * epsilon * l * law.mean_norm_sq(d);
    let g_rhs = epsilon * l * law.mean_norm(d);
    let mut report = SmoothingReport {
        points: points.len(),
        max_function_error: 0.0,
        max_gradient_error: 0.0,
        worst_function_slack: f64::INFINITY,
        worst_gradient_slack: f64::INFINITY,
    };
    for x in points {
        if x.len() != d {
            return Err(invalid("sample point has the wrong dimension"));
        }
        let f_err = (smoothed_value(quad, x, epsilon, law)? - quad.value(x)).abs();
        let smoothed = smoothed_gradient(quad, x, epsilon)?;
        let exact = quad.hessian_vector(x);
        let g_err = smoothed.iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        report.max_function_error = report.max_function_error.max(f_err);
        report.max_gradient_error = report.max_gradient_error.max(g_err);
        report.worst_function_slack = report.worst_function_slack.min(f_rhs - f_err);
        report.worst_gradient_slack = report.worst_gradient_slack.min(g_rhs - g_err);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fig2Method {
    #[serde(rename = "fo-adam")]
    FoAdam,
    #[serde(rename = "zo-adam")]
    ZoAdam,
    #[serde(rename = "meazo")]
    Meazo,
}

impl Fig2Method {
    pub const ALL: [Fig2Method; 3] = [Fig2Method::FoAdam, Fig2Method::ZoAdam, Fig2Method::Meazo];

    pub fn as_str(self) -> &'static str {
        match self {
            Fig2Method::FoAdam => "fo-adam",
            Fig2Method::ZoAdam => "zo-adam",
            Fig2Method::Meazo => "meazo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig2Config {
    pub dims: Vec<usize>,
    pub methods: Vec<Fig2Method>,
    pub regime: Regime,
    pub eta: f64,
    pub q: usize,
    pub epsilon: f64,
    pub distribution: Distribution,
    pub threshold: f64,
    pub max_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub zeta: f64,
    pub seed: u64,
    pub objective_seed: u64,
    pub init_seed: u64,
    /// `‖x₀‖`.
    pub init_norm: f64,
    /// Steps averaged for the terminal `‖∇f‖²/q` target.
    pub tail_window: usize,
    pub record_every: u64,
}

impl Default for Fig2Config {
    fn default() -> Self {
        Self {
            dims: vec![9, 25, 49, 100, 1024],
            methods: Fig2Method::ALL.to_vec(),
            regime: Regime::Heterogeneous,
            eta: 1e-4,
            q: 10,
            epsilon: 1e-3,
            distribution: Distribution::Gaussian,
            threshold: 1e-3,
            max_steps: 30_000,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            zeta: DEFAULT_ZETA,
            seed: 0,
            objective_seed: 0,
            init_seed: 0,
            init_norm: 1.0,
            tail_window: 100,
            record_every: 100,
        }
    }
}

impl Fig2Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| ZoError::Config(e.to_string()))?;
        if cfg.dims.is_empty() || cfg.dims.contains(&0) || cfg.methods.is_empty() || cfg.q == 0 {
            return Err(ZoError::Config("dims, methods and q must be non-empty and positive".into()));
        }
        if !(cfg.init_norm > 0.0 && cfg.init_norm.is_finite()) {
            return Err(ZoError::Config(format!("init_norm must be positive, got {}", cfg.init_norm)));
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ZoError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fig2Point {
    pub step: u64,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub spread: f64,
    pub v_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig2Run {
    pub method: Fig2Method,
    pub d: usize,
    pub steps: u64,
    pub reached: bool,
    pub final_loss: f64,
    /// Bias-corrected second moment at termination.
    pub terminal_v: Vec<f64>,
    pub spread: f64,
    pub stats: VtStats,
    /// Mean of `‖∇f(x_t)‖²/q` over the last `tail_window` iterates.
    pub collapse_target: f64,
    /// `max_k |v_k − target| / target`.
    pub max_rel_dev: f64,
    pub series: Vec<Fig2Point>,
}

/// Run one method on the `d`-dimensional quadratic until `F ≤ threshold` or
/// the step cap.
pub fn fig2_run(cfg: &Fig2Config, method: Fig2Method, d: usize) -> Result<Fig2Run> {
    let quad = make_block_quadratic(d, cfg.regime, cfg.objective_seed)?;
    let mut x = initial_point(d, cfg.init_seed, 1.0);
    let norm = norm_sq(&x).sqrt();
    x.iter_mut().for_each(|v| *v *= cfg.init_norm / norm);
    let spec = PerturbationSpec::new(cfg.distribution, cfg.epsilon, cfg.seed)?;
    let mut adam = AdamState::new(d, cfg.eta, cfg.beta1, cfg.beta2, cfg.zeta)?;
    let mut meazo = MeazoState::new(cfg.eta, cfg.beta2, cfg.zeta)?;
    let window = cfg.tail_window.max(1);
    let mut tail = VecDeque::with_capacity(window);
    let mut series = Vec::new();
    let v_now = |adam: &AdamState, meazo: &MeazoState| match method {
        Fig2Method::Meazo => vec![meazo.v_hat()],
        _ => adam.v_hat(),
    };

    let mut step = 0u64;
    let (loss, reached) = loop {
        let loss = quad.value(&x);
        if !loss.is_finite() {
            return Err(ZoError::NumericFailure { point: x, value: loss });
        }
        let grad = quad.hessian_vector(&x);
        let gn = norm_sq(&grad);
        if tail.len() == window {
            tail.pop_front();
        }
        tail.push_back(gn / cfg.q as f64);
        if cfg.record_every > 0 && step.is_multiple_of(cfg.record_every) {
            let v = v_now(&adam, &meazo);
            series.push(Fig2Point { step, loss, grad_norm_sq: gn, spread: spread(&v), v_mean: v.iter().sum::<f64>() / v.len() as f64 });
        }
        if loss <= cfg.threshold {
            break (loss, true);
        }
        if step == cfg.max_steps {
            break (loss, false);
        }
        step += 1;
        match method {
            Fig2Method::FoAdam => adam.zo_adam_step(&mut x, &grad)?,
            Fig2Method::ZoAdam => {
                let est = zo_gradient(&quad, &x, &spec, cfg.q, step)?;
                adam.zo_adam_step(&mut x, &est.gradient)?;
            }
            Fig2Method::Meazo => {
                let (scalars, _) = projected_scalars(&quad, &x, &spec, cfg.q, step)?;
                meazo.step(&mut x, &scalars, &spec, step)?;
            }
        }
    };
    let terminal_v = v_now(&adam, &meazo);
    let collapse_target = tail.iter().sum::<f64>() / tail.len() as f64;
    let max_rel_dev = terminal_v
        .iter()
        .map(|v| (v - collapse_target).abs() / collapse_target)
        .fold(0.0, f64::max);
    Ok(Fig2Run {
        method,
        d,
        steps: step,
        reached,
        final_loss: loss,
        spread: spread(&terminal_v),
        stats: vt_statistics(&terminal_v)?,
        terminal_v,
        collapse_target,
        max_rel_dev,
        series,
    })
}

/// Every `(method, d)` pair of the config, in method-major order.
pub fn fig2_collapse(cfg: &Fig2Config) -> Result<Vec<Fig2Run>> {
    let jobs: Vec<(Fig2Method, usize)> =
        cfg.methods.iter().flat_map(|&m| cfg.dims.iter().map(move |&d| (m, d))).collect();
    jobs.into_par_iter().map(|(m, d)| fig2_run(cfg, m, d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicted_hand_cases() {
        assert_eq!(predicted_squared_moment(&[1.0, 0.0], 1, Distribution::Gaussian).unwrap(), vec![3.0, 1.0]);
        assert_eq!(predicted_squared_moment(&[1.0, 0.0], 1, Distribution::UniformSphere).unwrap(), vec![1.5, 0.5]);
        assert_eq!(predicted_squared_moment(&[1.0, 0.0], 2, Distribution::UniformSphere).unwrap(), vec![1.25, 0.25]);
        assert!(predicted_squared_moment(&[1.0], 1, Distribution::Rademacher).is_err());
        assert!(predicted_squared_moment(&[1.0], 0, Distribution::Gaussian).is_err());
    }

    #[test]
    fn predicted_large_q_limit() {
        let g = [0.6, -0.8, 0.0];
        let p = predicted_squared_moment(&g, 1_000_000, Distribution::Gaussian).unwrap();
        for (pk, gk) in p.iter().zip(&g) {
            assert!((pk - gk * gk).abs() < 3e-6);
        }
    }

    #[test]
    fn bias_term_dominates_in_stated_regime() {
        // ‖g‖² > (q+1)·max g_k²  ⇒  ‖g‖²/q > (1/q + 1)·g_k² for every k
        let g: Vec<f64> = (0..64).map(|k| 1.0 + (k % 5) as f64 * 0.1).collect();
        let q = 4;
        let n2 = norm_sq(&g);
        let gmax = g.iter().map(|v| v * v).fold(0.0, f64::max);
        assert!(n2 > (q as f64 + 1.0) * gmax);
        for gk in &g {
            assert!(n2 / q as f64 > (1.0 / q as f64 + 1.0) * gk * gk);
        }
    }

    #[test]
    fn zero_gradient_moments() {
        let r = mc_squared_moment(&[0.0, 0.0, 0.0], 2, Distribution::Gaussian, 10_000, 1).unwrap();
        assert_eq!(r.empirical, vec![0.0; 3]);
        assert_eq!(r.predicted, vec![0.0; 3]);
        assert_eq!(r.max_rel_err, 0.0);
        assert!(mc_squared_moment(&[1.0], 1, Distribution::Gaussian, 100, 1).is_err());
    }

    #[test]
    fn mc_is_deterministic() {
        let a = mc_squared_moment(&[0.3, 0.4], 1, Distribution::UniformSphere, 20_000, 3).unwrap();
        let b = mc_squared_moment(&[0.3, 0.4], 1, Distribution::UniformSphere, 20_000, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stats_examples() {
        let s = vt_statistics(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.min, s.max, s.mean), (1.0, 4.0, 2.5));
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
        // m4 = (2·1.5⁴ + 2·0.5⁴)/4 = 2.5625, m2² = 1.5625
        assert!((s.kurtosis - (2.5625 / 1.5625 - 3.0)).abs() < 1e-12);
        let c = vt_statistics(&[0.1; 7]).unwrap();
        assert_eq!((c.min, c.max, c.mean, c.std, c.kurtosis), (0.1, 0.1, 0.1, 0.0, 0.0));
        assert!(vt_statistics(&[]).is_err());
    }

    #[test]
    fn table3_layout() {
        let s = vt_statistics(&[1.0, 2.0]).unwrap();
        let t = format_table3(&[("ZO-Adam", s), ("FO-Adam", s)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "Statistic,ZO-Adam,FO-Adam");
        let labels: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(labels, VtStats::LABELS);
        assert!(lines[1].starts_with("Min.,1.00e0"));
    }

    #[test]
    fn collapse_metric_cases() {
        let pts = vt_collapse_metric(&[vec![2.0], vec![4.0, 4.0]], Some(&[2.0, 8.0]), 1).unwrap();
        assert_eq!(pts[0], CollapsePoint { spread: 0.0, theory_target_err: 0.0 });
        assert_eq!(pts[1].theory_target_err, 0.5);
        let het = vt_collapse_metric(&[vec![1.0, 3.0]], Some(&[4.0]), 2).unwrap();
        assert_eq!(het[0].spread, 1.0);
        assert!(vt_collapse_metric(&[vec![1.0]], None, 1).is_err());
    }

    #[test]
    fn condition_boundary() {
        let (g, l, s1, zeta) = (3.0f64, 7.0, 2.5, 0.5f64);
        let eta = zeta / (2.0 * l);
        let beta = 1.0 - (zeta / (4.0 * g * (1.0 + s1))).powi(2);
        assert!(check_meazo_condition(g, l, s1, beta, eta, zeta));
        assert!(!check_meazo_condition(g, l, s1, beta, 2.0 * eta, zeta));
        // β → 1 leaves only the step-size term
        let b1 = 1.0 - 1e-15;
        assert!(check_meazo_condition(g, l, s1, b1, eta * 0.99, zeta));
        assert!(!check_meazo_condition(g, l, s1, b1, eta * 1.01, zeta));
    }

    #[test]
    fn constants_examples() {
        let c = theorem_constants(9, 10, 1e-3, 1000.0, 0.0, 1.0, 0.5, 1.0).unwrap();
        assert!((c.sigma0_sq - 7.65).abs() < 1e-9);
        assert_eq!(c.sigma1_sq, 3.5);
        assert!((c.alpha - (0.5f64.sqrt() + 1.0)).abs() < 1e-15);
        let z = theorem_constants(1, 1, 0.0, 5.0, 0.0, 1.0, 0.5, 1.0).unwrap();
        assert_eq!((z.sigma0_sq, z.sigma1_sq), (0.0, 3.0));
    }

    fn satisfiable(d: usize, q: usize, eps: f64, sigma: f64) -> (TheoremConstants, f64) {
        let (l, g, zeta) = (10.0, 5.0, 1.0);
        let (_, s1) = affine_variance_constants(d, q, eps, l, sigma).unwrap();
        let beta = 1.0 - (zeta / (4.0 * g * (1.0 + s1))).powi(2);
        (theorem_constants(d, q, eps, l, sigma, g, beta, zeta).unwrap(), zeta / (2.0 * l))
    }

    #[test]
    fn meazo_bound_behaviour() {
        let (c, eta) = satisfiable(4, 2, 1e-3, 0.1);
        let b1 = meazo_bound(&c, 2.0, eta, 1000, 1e-3).unwrap();
        let b2 = meazo_bound(&c, 2.0, eta, 2000, 1e-3).unwrap();
        assert!(b1 > 0.0 && b2 < b1);
        let (noisier, _) = satisfiable(4, 2, 1e-3, 0.2);
        assert!(meazo_bound(&noisier, 2.0, eta, 1000, 1e-3).unwrap() > b1);
        assert!(matches!(meazo_bound(&c, 2.0, 4.0 * eta, 1000, 1e-3), Err(ZoError::Precondition(_))));
        // no noise, no smoothing, long horizon
        let (clean, eta) = satisfiable(4, 2, 0.0, 0.0);
        assert!(meazo_bound(&clean, 2.0, eta, u64::MAX / 2, 0.0).unwrap() < 1e-12);
    }

    #[test]
    fn zosgd_bound_behaviour() {
        let (d, q, l) = (4, 3, 2.0);
        let limit = 2.0 / ((1.0 + 15.0 / 3.0) * l);
        assert!(matches!(zosgd_bound(d, q, 1e-3, l, 0.1, limit, 10, 1.0), Err(ZoError::Precondition(_))));
        let eta = limit / 4.0;
        let b = |t, eps, sigma| zosgd_bound(d, q, eps, l, sigma, eta, t, 1.0).unwrap();
        assert!(b(10, 1e-3, 0.1) > b(20, 1e-3, 0.1));
        assert!(b(10, 1e-2, 0.1) > b(10, 1e-3, 0.1));
        assert!(b(10, 1e-3, 0.2) > b(10, 1e-3, 0.1));
    }

    #[test]
    fn zosgd_bound_reduces_to_sgd() {
        let (l, sigma, eta, t, dd) = (3.0, 0.7, 0.2, 50, 4.0);
        let zo = zosgd_bound(9, 1_000_000_000, 1e-12, l, sigma, eta, t, dd).unwrap();
        let sgd = classical_sgd_bound(dd, l, sigma, eta, t).unwrap();
        assert!(((zo - sgd) / sgd).abs() < 1e-6);
    }

    #[test]
    fn smoothing_checks_on_quadratic() {
        let quad = make_block_quadratic(9, Regime::Heterogeneous, 1).unwrap();
        let pts: Vec<Vec<f64>> = (0..5).map(|s| initial_point(9, s, 1.0)).collect();
        let r = check_smoothing_inequalities(&quad, 1e-2, SmoothingLaw::Ball, &pts).unwrap();
        assert_eq!(r.max_gradient_error, 0.0);
        let exact = 0.5 * 1e-4 * quad.trace() / 11.0;
        assert!((r.max_function_error - exact).abs() < 1e-12);
        assert!(r.worst_function_slack >= 0.0 && r.worst_gradient_slack > 0.0);
        let z = check_smoothing_inequalities(&quad, 0.0, SmoothingLaw::Sphere, &pts).unwrap();
        assert_eq!((z.max_function_error, z.worst_function_slack, z.worst_gradient_slack), (0.0, 0.0, 0.0));
    }

    #[test]
    fn fo_adam_constant_gradient_collapses_to_g_squared() {
        let f = Affine { slope: vec![0.5, -2.0, 1.0], offset: 0.0 };
        let mut st = AdamState::new(3, 1e-6, 0.9, 0.99, 1e-8).unwrap();
        let mut x = vec![0.0; 3];
        for _ in 0..4000 {
            let g = f.gradient(&x).unwrap();
            st.zo_adam_step(&mut x, &g).unwrap();
        }
        let v = st.v_hat();
        for (vk, gk) in v.iter().zip(&f.slope) {
            assert!((vk - gk * gk).abs() < 1e-12);
        }
        assert!((spread(&v) - (4.0 - 0.25) / (5.25 / 3.0)).abs() < 1e-9);
    }

    #[test]
    fn fig2_single_coordinate_has_no_spread() {
        let cfg = Fig2Config { dims: vec![1], max_steps: 300, q: 2, ..Fig2Config::default() };
        for run in fig2_collapse(&cfg).unwrap() {
            assert_eq!(run.spread, 0.0);
            assert_eq!(run.terminal_v.len(), 1);
        }
    }
}
