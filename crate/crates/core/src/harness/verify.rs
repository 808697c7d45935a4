//! Config-driven moment and bound verification.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    classical_sgd_bound, meazo_bound, mc_squared_moment, theorem_constants, zosgd_bound, MomentReport,
    TheoremConstants,
};
use crate::error::{Result, ZoError};
use crate::harness::config::{ExperimentConfig, InitSpec, ObjectiveSpec, OptimizerConfig, QuadraticSpec, SweepConfig};
use crate::harness::run::run;
use crate::objectives::{make_block_quadratic, norm_sq, Objective, Regime};
use crate::optimizers::{OptimizerKind, DEFAULT_BETA1, DEFAULT_BETA2};
use crate::perturb::{initial_point, Distribution};

/// Moment agreement tolerance in standard errors.
pub const MOMENT_Z_TOLERANCE: f64 = 4.0;

fn config_err(msg: impl Into<String>) -> ZoError {
    ZoError::Config(msg.into())
}

fn read_config(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

/// Unit vector drawn from the init stream.
pub fn random_unit(d: usize, seed: u64) -> Vec<f64> {
    let g = initial_point(d, seed, 1.0);
    let n = norm_sq(&g).sqrt();
    g.into_iter().map(|v| v / n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentCase {
    pub distribution: Distribution,
    pub d: usize,
    pub q: usize,
    /// Explicit slope; a random unit vector when absent.
    #[serde(default)]
    pub g: Option<Vec<f64>>,
    #[serde(default)]
    pub g_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsConfig {
    pub cases: Vec<MomentCase>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_trials() -> usize {
    1_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentOutcome {
    pub case: MomentCase,
    pub g: Vec<f64>,
    pub report: MomentReport,
    pub pass: bool,
}

impl MomentsConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_config(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cases.is_empty() {
            return Err(config_err("cases must be non-empty"));
        }
        for c in &self.cases {
            if c.d == 0 || c.q == 0 {
                return Err(config_err("each case needs d >= 1 and q >= 1"));
            }
            if let Some(g) = &c.g {
                if g.len() != c.d {
                    return Err(config_err(format!("g has length {}, expected d = {}", g.len(), c.d)));
                }
            }
        }
        Ok(())
    }
}

pub fn verify_moments(cfg: &MomentsConfig) -> Result<Vec<MomentOutcome>> {
    cfg.validate()?;
    cfg.cases
        .iter()
        .map(|c| {
            let g = c.g.clone().unwrap_or_else(|| random_unit(c.d, c.g_seed));
            let report = mc_squared_moment(&g, c.q, c.distribution, cfg.trials, cfg.seed)?;
            let pass = report.max_z <= MOMENT_Z_TOLERANCE;
            Ok(MomentOutcome { case: c.clone(), g, report, pass })
        })
        .collect()
}

/// Bound check on a quadratic `½xᵀHx` restricted to `‖x‖ ≤ radius`, so that
/// `G = λ_max·radius` bounds the gradient norm there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    pub d: usize,
    pub regime: Regime,
    pub objective_seed: u64,
    pub q: usize,
    pub epsilon: f64,
    #[serde(alias = "T")]
    pub steps: u64,
    pub seeds: Vec<u64>,
    pub init_seed: u64,
    pub init_scale: f64,
    pub radius: f64,
    pub zeta: f64,
    /// MEAZO step size as a fraction of the largest admissible `ζ/(2L)`.
    pub meazo_eta_fraction: f64,
    /// ZO-SGD step size as a fraction of `2/((1+σ₁²)L)`.
    pub zosgd_eta_fraction: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            d: 9,
            regime: Regime::Heterogeneous,
            objective_seed: 0,
            q: 10,
            epsilon: 1e-3,
            steps: 2000,
            seeds: (0..10).collect(),
            init_seed: 0,
            init_scale: 1.0,
            radius: 10.0,
            zeta: 1.0,
            meazo_eta_fraction: 1.0,
            zosgd_eta_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub optimizer: OptimizerKind,
    pub eta: f64,
    pub bound: f64,
    /// Seed mean of `(1/T) Σ ‖∇F(x_t)‖²`.
    pub empirical: f64,
    pub per_seed: Vec<f64>,
    pub max_iterate_norm: f64,
    pub diverged: usize,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassicalLimit {
    pub q: usize,
    pub epsilon: f64,
    pub zosgd: f64,
    pub classical: f64,
    pub rel_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub constants: TheoremConstants,
    pub lambda_max: f64,
    pub initial_gap: f64,
    pub meazo: BoundCheck,
    pub zosgd: BoundCheck,
    pub classical_limit: ClassicalLimit,
}

impl BoundsReport {
    pub fn holds(&self) -> bool {
        self.meazo.holds && self.zosgd.holds
    }
}

impl BoundsConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_config(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.q == 0 || self.steps == 0 || self.seeds.is_empty() {
            return Err(config_err("d, q, steps and seeds must be non-empty"));
        }
        for (name, v) in [("epsilon", self.epsilon), ("init_scale", self.init_scale), ("radius", self.radius), ("zeta", self.zeta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("meazo_eta_fraction", self.meazo_eta_fraction), ("zosgd_eta_fraction", self.zosgd_eta_fraction)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(config_err(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if self.zosgd_eta_fraction >= 1.0 {
            return Err(config_err("zosgd_eta_fraction must be below 1"));
        }
        Ok(())
    }

    fn experiment(&self, name: OptimizerKind, eta: f64, beta: f64) -> ExperimentConfig {
        ExperimentConfig {
            objective: ObjectiveSpec {
                quadratic: Some(QuadraticSpec { d: self.d, regime: self.regime, seed: self.objective_seed }),
                chain: None,
                noise: None,
            },
            optimizer: OptimizerConfig {
                name,
                eta,
                beta,
                beta1: DEFAULT_BETA1,
                beta2: DEFAULT_BETA2,
                zeta: self.zeta,
            },
            q: self.q,
            epsilon: self.epsilon,
            distribution: Distribution::UniformSphere,
            partition: None,
            steps: self.steps,
            seeds: self.seeds.clone(),
            eval_every: 1,
            output: None,
            init: InitSpec { seed: self.init_seed, scale: self.init_scale },
            threshold: None,
            record_timing: false,
            sweep: SweepConfig::default(),
        }
    }

    fn check(&self, name: OptimizerKind, eta: f64, beta: f64, bound: f64) -> Result<BoundCheck> {
        let traces = run(&self.experiment(name, eta, beta))?;
        let diverged = traces.iter().filter(|t| t.diverged()).count();
        let per_seed: Vec<f64> =
            traces.iter().map(|t| t.summary.mean_grad_norm_sq.unwrap_or(f64::INFINITY)).collect();
        let empirical = if diverged > 0 { f64::INFINITY } else { per_seed.iter().sum::<f64>() / per_seed.len() as f64 };
        let max_iterate_norm = traces.iter().map(|t| t.summary.max_iterate_norm).fold(0.0, f64::max);
        Ok(BoundCheck {
            optimizer: name,
            eta,
            bound,
            empirical,
            per_seed,
            max_iterate_norm,
            diverged,
            holds: diverged == 0 && max_iterate_norm <= self.radius && empirical <= bound,
        })
    }
}

/// Run MEAZO and ZO-SGD at bound-admissible parameters and compare the
/// seed-averaged gradient norm against both bounds. A run leaving the ball
/// of `radius` voids `G` and counts as a failure.
pub fn verify_bounds(cfg: &BoundsConfig) -> Result<BoundsReport> {
    cfg.validate()?;
    let quad = make_block_quadratic(cfg.d, cfg.regime, cfg.objective_seed)?;
    let l = quad.lambda_max();
    let g = l * cfg.radius;
    let x0 = initial_point(cfg.d, cfg.init_seed, cfg.init_scale);
    let gap = quad.value(&x0) - quad.optimum_value();

    let (_, sigma1_sq) = crate::analysis::affine_variance_constants(cfg.d, cfg.q, cfg.epsilon, l, 0.0)?;
    let root = cfg.zeta / (4.0 * g * (1.0 + sigma1_sq));
    let beta = 1.0 - root * root;
    let constants = theorem_constants(cfg.d, cfg.q, cfg.epsilon, l, 0.0, g, beta, cfg.zeta)?;

    let meazo_eta = cfg.meazo_eta_fraction * cfg.zeta / (2.0 * l);
    let meazo_b = meazo_bound(&constants, gap, meazo_eta, cfg.steps, cfg.epsilon)?;
    let meazo = cfg.check(OptimizerKind::Meazo, meazo_eta, beta, meazo_b)?;

    let sgd_eta = cfg.zosgd_eta_fraction * 2.0 / ((1.0 + sigma1_sq) * l);
    let sgd_b = zosgd_bound(cfg.d, cfg.q, cfg.epsilon, l, 0.0, sgd_eta, cfg.steps, gap)?;
    let zosgd = cfg.check(OptimizerKind::ZoSgd, sgd_eta, beta, sgd_b)?;

    let classical_limit = classical_limit(cfg.d, l, 0.1 / l, cfg.steps, gap, 0.5)?;
    Ok(BoundsReport { constants, lambda_max: l, initial_gap: gap, meazo, zosgd, classical_limit })
}

/// Both bounds at `q = 10⁹`, `ε = 10⁻¹²`.
pub fn classical_limit(d: usize, l: f64, eta: f64, t: u64, gap: f64, sigma: f64) -> Result<ClassicalLimit> {
    let (q, epsilon) = (1_000_000_000, 1e-12);
    let zosgd = zosgd_bound(d, q, epsilon, l, sigma, eta, t, gap)?;
    let classical = classical_sgd_bound(gap, l, sigma, eta, t)?;
    Ok(ClassicalLimit { q, epsilon, zosgd, classical, rel_diff: (zosgd - classical).abs() / classical })
}
