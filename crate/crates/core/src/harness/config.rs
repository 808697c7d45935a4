//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZoError};
use crate::estimators::{Partition, PartitionSpec};
use crate::objectives::{make_block_quadratic, BlockQuadratic, LayeredChain, Objective, Regime};
use crate::optimizers::{
    OptimizerKind, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON, DEFAULT_MEAZO_BETA, DEFAULT_Q, DEFAULT_ZETA,
};
use crate::perturb::{Distribution, PerturbationSpec};

fn config_err(msg: impl Into<String>) -> ZoError {
    ZoError::Config(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    pub d: usize,
    #[serde(default = "default_regime")]
    pub regime: Regime,
    #[serde(default)]
    pub seed: u64,
}

fn default_regime() -> Regime {
    Regime::Heterogeneous
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub p: usize,
    /// `p + 1` layer widths, input first. Defaults to width 8 throughout.
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Exactly one of `quadratic` or `chain`, optionally wrapped in `noise`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<QuadraticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
}

pub const CHAIN_DEFAULT_WIDTH: usize = 8;
/// Largest quadratic a config may ask for.
pub const MAX_QUADRATIC_DIM: usize = 1 << 16;
/// Largest chain parameter count a config may ask for.
pub const MAX_CHAIN_PARAMS: usize = 1 << 22;

fn chain_params(widths: &[usize]) -> Option<usize> {
    widths.windows(2).try_fold(0usize, |acc, w| w[1].checked_mul(w[0])?.checked_add(w[1])?.checked_add(acc))
}

/// A constructed base objective.
#[derive(Debug, Clone)]
pub enum BuiltObjective {
    Quadratic(BlockQuadratic),
    Chain(LayeredChain),
}

impl BuiltObjective {
    pub fn as_objective(&self) -> &dyn Objective {
        match self {
            BuiltObjective::Quadratic(q) => q,
            BuiltObjective::Chain(c) => c,
        }
    }

    pub fn natural_blocks(&self) -> Vec<std::ops::Range<usize>> {
        match self {
            BuiltObjective::Quadratic(q) => q.block_ranges(),
            BuiltObjective::Chain(c) => c.block_ranges(),
        }
    }

    /// `F*`, when known in closed form.
    pub fn optimum_value(&self) -> Option<f64> {
        match self {
            BuiltObjective::Quadratic(q) => Some(q.optimum_value()),
            BuiltObjective::Chain(_) => None,
        }
    }
}

impl ObjectiveSpec {
    pub fn build(&self) -> Result<BuiltObjective> {
        match (&self.quadratic, &self.chain) {
            (Some(q), None) if q.d > MAX_QUADRATIC_DIM => {
                Err(config_err(format!("quadratic d = {} exceeds {MAX_QUADRATIC_DIM}", q.d)))
            }
            (Some(q), None) => make_block_quadratic(q.d, q.regime, q.seed)
                .map(BuiltObjective::Quadratic)
                .map_err(|e| config_err(e.to_string())),
            (None, Some(c)) => {
                if c.p == 0 || c.p >= MAX_CHAIN_PARAMS {
                    return Err(config_err(format!("chain needs 1 <= p < {MAX_CHAIN_PARAMS}, got {}", c.p)));
                }
                let widths = c.widths.clone().unwrap_or_else(|| vec![CHAIN_DEFAULT_WIDTH; c.p + 1]);
                if widths.len() != c.p + 1 {
                    return Err(config_err(format!("chain with p = {} needs {} widths, got {}", c.p, c.p + 1, widths.len())));
                }
                if chain_params(&widths).is_none_or(|n| n > MAX_CHAIN_PARAMS) {
                    return Err(config_err(format!("chain exceeds {MAX_CHAIN_PARAMS} parameters")));
                }
                LayeredChain::new(widths, c.seed).map(BuiltObjective::Chain).map_err(|e| config_err(e.to_string()))
            }
            (Some(_), Some(_)) => Err(config_err("objective must be either quadratic or chain, not both")),
            (None, None) => Err(config_err("objective needs a quadratic or chain table")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: OptimizerKind,
    pub eta: f64,
    /// MEAZO EMA decay.
    #[serde(default = "default_meazo_beta")]
    pub beta: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_zeta")]
    pub zeta: f64,
}

fn default_meazo_beta() -> f64 {
    DEFAULT_MEAZO_BETA
}
fn default_beta1() -> f64 {
    DEFAULT_BETA1
}
fn default_beta2() -> f64 {
    DEFAULT_BETA2
}
fn default_zeta() -> f64 {
    DEFAULT_ZETA
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of each starting coordinate.
    #[serde(default = "one")]
    pub scale: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self { seed: 0, scale: 1.0 }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Loss at the last step.
    #[default]
    Final,
    /// Lowest recorded loss.
    Best,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub metric: Metric,
    /// Overrides the default coarse grid.
    #[serde(default)]
    pub coarse: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub objective: ObjectiveSpec,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_distribution")]
    pub distribution: Distribution,
    #[serde(default)]
    pub partition: Option<PartitionSpec>,
    #[serde(alias = "T")]
    pub steps: u64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub init: InitSpec,
    /// Loss level for steps-to-threshold.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Write wall-clock time into traces. Off by default so traces are byte-stable.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_q() -> usize {
    DEFAULT_Q
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_distribution() -> Distribution {
    Distribution::Gaussian
}
fn default_eval_every() -> u64 {
    1
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(format!("{name} must be positive and finite, got {v}")))
    }
}

fn unit_interval(name: &str, v: f64, allow_zero: bool) -> Result<()> {
    let ok = if allow_zero { (0.0..1.0).contains(&v) } else { v > 0.0 && v < 1.0 };
    if ok {
        Ok(())
    } else {
        let lo = if allow_zero { "[0" } else { "(0" };
        Err(config_err(format!("{name} must lie in {lo}, 1), got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config_err("steps must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds must be non-empty"));
        }
        if self.q == 0 {
            return Err(config_err("q must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(config_err("eval_every must be at least 1"));
        }
        positive("epsilon", self.epsilon)?;
        positive("init.scale", self.init.scale)?;
        let o = &self.optimizer;
        positive("optimizer.eta", o.eta)?;
        positive("optimizer.zeta", o.zeta)?;
        unit_interval("optimizer.beta", o.beta, false)?;
        unit_interval("optimizer.beta1", o.beta1, true)?;
        unit_interval("optimizer.beta2", o.beta2, true)?;
        if let Some(t) = self.threshold {
            if !t.is_finite() {
                return Err(config_err("threshold must be finite"));
            }
        }
        if let Some(n) = &self.objective.noise {
            if !(n.sigma >= 0.0 && n.sigma.is_finite()) {
                return Err(config_err(format!("noise.sigma must be non-negative, got {}", n.sigma)));
            }
        }
        match (o.name, &self.partition) {
            (OptimizerKind::Meazo, Some(_)) => {
                return Err(config_err("meazo keeps one global scalar; use meazo-grouped with a partition"))
            }
            (OptimizerKind::MeazoGrouped, None) => return Err(config_err("meazo-grouped needs a partition")),
            (OptimizerKind::Fzoo, Some(_)) => return Err(config_err("fzoo does not take a partition")),
            (OptimizerKind::Fzoo, None) if self.q < 2 => return Err(config_err("fzoo needs q >= 2")),
            _ => {}
        }
        if let Some(c) = &self.sweep.coarse {
            if c.is_empty() || c.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(config_err("sweep.coarse must list positive step sizes"));
            }
        }
        let built = self.objective.build()?;
        self.resolve_partition(&built)?;
        Ok(())
    }

    pub fn perturbation(&self, seed: u64) -> Result<PerturbationSpec> {
        PerturbationSpec::new(self.distribution, self.epsilon, seed)
    }

    pub fn resolve_partition(&self, built: &BuiltObjective) -> Result<Option<Partition>> {
        let d = built.as_objective().dim();
        self.partition
            .as_ref()
            .map(|p| p.resolve(d, Some(&built.natural_blocks())).map_err(|e| config_err(e.to_string())))
            .transpose()
    }

    /// The same config over different seeds.
    pub fn with_seeds(&self, seeds: Vec<u64>) -> Self {
        let mut c = self.clone();
        c.seeds = seeds;
        c
    }

    /// The same config at a different step size.
    pub fn with_eta(&self, eta: f64) -> Self {
        let mut c = self.clone();
        c.optimizer.eta = eta;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
steps = 10
seeds = [0, 1]

[objective.quadratic]
d = 9

[optimizer]
name = "zo-sgd"
eta = 1e-3
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_toml_str(BASE).unwrap();
        assert_eq!(c.q, 1);
        assert_eq!(c.epsilon, 1e-6);
        assert_eq!(c.distribution, Distribution::Gaussian);
        assert_eq!(c.eval_every, 1);
        assert_eq!(c.optimizer.beta1, 0.9);
        assert_eq!(c.optimizer.beta2, 0.999);
        assert_eq!(c.objective.quadratic.as_ref().unwrap().regime, Regime::Heterogeneous);
        assert!(!c.record_timing);
    }

    #[test]
    fn capital_t_alias() {
        let c = ExperimentConfig::from_toml_str(&BASE.replace("steps = 10", "T = 7")).unwrap();
        assert_eq!(c.steps, 7);
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::from_toml_str(BASE).unwrap();
        c.partition = Some(PartitionSpec::Layers(3));
        c.threshold = Some(1e-3);
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    fn rejects(s: &str) {
        assert!(matches!(ExperimentConfig::from_toml_str(s), Err(ZoError::Config(_))), "accepted:\n{s}");
    }

    #[test]
    fn invalid_configs() {
        rejects(&BASE.replace("steps = 10", "steps = 0"));
        rejects(&BASE.replace("seeds = [0, 1]", "seeds = []"));
        rejects(&BASE.replace("eta = 1e-3", "eta = -1.0"));
        rejects(&BASE.replace("d = 9", "d = 10"));
        rejects(&BASE.replace("\"zo-sgd\"", "\"sgd\""));
        rejects(&format!("{BASE}\nbogus = 1\n"));
        rejects(&BASE.replace("name = \"zo-sgd\"", "name = \"meazo-grouped\""));
        rejects(&BASE.replace("seeds = [0, 1]", "seeds = [0]\npartition = \"layers:3\"").replace("zo-sgd", "meazo"));
        rejects(&BASE.replace("seeds = [0, 1]", "seeds = [0]\npartition = \"layers:4\""));
        rejects(&BASE.replace("zo-sgd", "fzoo"));
        rejects(&format!("{BASE}\n[objective.chain]\np = 2\n"));
        rejects(&BASE.replace("eta = 1e-3", "eta = 1e-3\nbeta = 1.0"));
    }

    #[test]
    fn oversized_objectives_are_rejected() {
        rejects(&BASE.replace("d = 9", "d = 1048576"));
        let chain = BASE.replace("[objective.quadratic]\nd = 9", "[objective.chain]\np = 1099511627776");
        rejects(&chain);
        let wide = BASE.replace("[objective.quadratic]\nd = 9", "[objective.chain]\np = 2\nwidths = [4294967296, 4294967296]");
        rejects(&wide);
    }

    #[test]
    fn chain_and_ranges() {
        let s = r#"
steps = 3
seeds = [4]
partition = [[0, 20], [20, 40]]
[objective.chain]
p = 2
widths = [4, 4, 4]
[optimizer]
name = "meazo-grouped"
eta = 0.01
"#;
        let c = ExperimentConfig::from_toml_str(s).unwrap();
        let built = c.objective.build().unwrap();
        assert_eq!(built.as_objective().dim(), 40);
        assert_eq!(c.resolve_partition(&built).unwrap().unwrap().len(), 2);
    }
}
