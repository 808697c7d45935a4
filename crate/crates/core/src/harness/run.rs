//! The optimization loop behind `run`, sweeps and robustness curves.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Result, ZoError};
use crate::estimators::{
    efficient_grouped_eval, grouped_zo_gradient, projected_scalars, zo_gradient, EvalCounter, GroupedEstimate,
    Partition, PartitionSpec,
};
use crate::harness::config::{BuiltObjective, ExperimentConfig};
use crate::harness::trace::{Divergence, Trace, TraceRecord, TraceSummary, DIVERGENCE_FACTOR};
use crate::objectives::{norm_sq, sample_noisy, Objective};
use crate::optimizers::{zo_sgd_step, AdamState, FzooState, GroupedMeazoState, MeazoState, OptimizerKind};
use crate::perturb::{initial_point, PerturbationSpec};

enum Stepper {
    Sgd { eta: f64 },
    Adam { state: AdamState, radazo: bool },
    Meazo(MeazoState),
    Grouped(GroupedMeazoState),
    Fzoo(FzooState),
}

impl Stepper {
    fn new(cfg: &ExperimentConfig, d: usize, partition: Option<&Partition>) -> Result<Self> {
        let o = &cfg.optimizer;
        Ok(match o.name {
            OptimizerKind::ZoSgd => Stepper::Sgd { eta: o.eta },
            OptimizerKind::ZoAdam | OptimizerKind::RAdaZo => Stepper::Adam {
                state: AdamState::new(d, o.eta, o.beta1, o.beta2, o.zeta)?,
                radazo: o.name == OptimizerKind::RAdaZo,
            },
            OptimizerKind::Meazo => Stepper::Meazo(MeazoState::new(o.eta, o.beta, o.zeta)?),
            OptimizerKind::MeazoGrouped => {
                let p = partition.map_or(0, Partition::len);
                Stepper::Grouped(GroupedMeazoState::new(p, o.eta, o.beta, o.zeta)?)
            }
            OptimizerKind::Fzoo => Stepper::Fzoo(FzooState::new(o.eta, cfg.epsilon, cfg.q)?),
        })
    }

    /// `(min, max, mean)` of the bias-corrected second moment.
    fn v_stats(&self) -> Option<(f64, f64, f64)> {
        let v = match self {
            Stepper::Adam { state, .. } => state.v_hat(),
            Stepper::Meazo(s) => vec![s.v_hat()],
            Stepper::Grouped(s) => s.v_hat(),
            Stepper::Sgd { .. } | Stepper::Fzoo(_) => return None,
        };
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((min, max, v.iter().sum::<f64>() / v.len() as f64))
    }
}

struct Estimation<'a> {
    spec: &'a PerturbationSpec,
    q: usize,
    partition: Option<&'a Partition>,
    efficient: bool,
}

impl Estimation<'_> {
    fn grouped(&self, f: &dyn Objective, x: &[f64], step: u64, partition: &Partition) -> Result<GroupedEstimate> {
        if self.efficient {
            efficient_grouped_eval(f, x, self.spec, self.q, step)
        } else {
            grouped_zo_gradient(f, x, self.spec, self.q, partition, step)
        }
    }

    fn gradient(&self, f: &dyn Objective, x: &[f64], step: u64) -> Result<(Vec<f64>, EvalCounter)> {
        match self.partition {
            None => zo_gradient(f, x, self.spec, self.q, step).map(|e| (e.gradient, e.evals)),
            Some(p) => self.grouped(f, x, step, p).map(|e| (e.gradient, e.evals)),
        }
    }

    fn step(&self, stepper: &mut Stepper, f: &dyn Objective, x: &mut [f64], t: u64) -> Result<(EvalCounter, Option<f64>)> {
        match stepper {
            Stepper::Sgd { eta } => {
                let (g, evals) = self.gradient(f, x, t)?;
                zo_sgd_step(x, &g, *eta)?;
                Ok((evals, None))
            }
            Stepper::Adam { state, radazo } => {
                let (g, evals) = self.gradient(f, x, t)?;
                if *radazo {
                    state.radazo_step(x, &g)?;
                } else {
                    state.zo_adam_step(x, &g)?;
                }
                Ok((evals, None))
            }
            Stepper::Meazo(state) => {
                let (scalars, evals) = projected_scalars(f, x, self.spec, self.q, t)?;
                state.step(x, &scalars, self.spec, t)?;
                Ok((evals, None))
            }
            Stepper::Grouped(state) => {
                let partition = self.partition.expect("grouped MEAZO is validated to carry a partition");
                let est = self.grouped(f, x, t, partition)?;
                state.step(x, &est.scalars, partition, self.spec, t)?;
                Ok((est.evals, None))
            }
            Stepper::Fzoo(state) => {
                let out = state.step(f, x, self.spec, t)?;
                Ok((out.evals, Some(out.sigma)))
            }
        }
    }
}

fn starting_point(cfg: &ExperimentConfig, built: &BuiltObjective) -> Vec<f64> {
    match built {
        BuiltObjective::Quadratic(q) => initial_point(q.dim(), cfg.init.seed, cfg.init.scale),
        BuiltObjective::Chain(c) => {
            let mut x = c.init_params(cfg.init.seed);
            x.iter_mut().for_each(|v| *v *= cfg.init.scale);
            x
        }
    }
}

/// Run one seed. Numeric blow-ups end the trace early with a divergence
/// marker instead of failing.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Trace> {
    cfg.validate()?;
    let built = cfg.objective.build()?;
    let base = built.as_objective();
    let partition = cfg.resolve_partition(&built)?;
    let efficient = matches!(built, BuiltObjective::Chain(_))
        && cfg.objective.noise.is_none()
        && matches!(cfg.partition, Some(PartitionSpec::Layers(_)));
    let spec = cfg.perturbation(seed)?;
    let est = Estimation { spec: &spec, q: cfg.q, partition: partition.as_ref(), efficient };
    let mut stepper = Stepper::new(cfg, base.dim(), partition.as_ref())?;
    let mut x = starting_point(cfg, &built);

    let initial_loss = base.value(&x);
    if !initial_loss.is_finite() {
        return Err(ZoError::NumericFailure { point: x, value: initial_loss });
    }
    let cap = DIVERGENCE_FACTOR * initial_loss.abs();
    let track_grad = cfg.eval_every == 1 && base.gradient(&x).is_some();
    let clock = cfg.record_timing.then(Instant::now);

    let mut records = Vec::with_capacity((cfg.steps / cfg.eval_every) as usize + 1);
    let mut sigmas = Vec::new();
    let mut counter = EvalCounter::default();
    let mut grad_sum = 0.0;
    let (mut final_loss, mut best_loss) = (initial_loss, initial_loss);
    let mut steps_to_threshold = cfg.threshold.filter(|th| initial_loss <= *th).map(|_| 0);
    let mut divergence = None;
    let mut max_norm = norm_sq(&x).sqrt();
    let mut steps_run = 0;

    for t in 1..=cfg.steps {
        if track_grad {
            grad_sum += base.gradient(&x).map_or(0.0, |g| norm_sq(&g));
        }
        let noisy = cfg.objective.noise.as_ref().map(|n| sample_noisy(base, n.sigma, n.seed ^ seed.rotate_left(32), t));
        let f: &dyn Objective = match &noisy {
            Some(n) => n,
            None => base,
        };
        match est.step(&mut stepper, f, &mut x, t) {
            Ok((evals, sigma)) => {
                counter.add(evals);
                sigmas.extend(sigma);
            }
            Err(ZoError::NumericFailure { value, .. }) => {
                divergence = Some(Divergence { step: t, value });
                break;
            }
            Err(ZoError::DegenerateScale) => {
                divergence = Some(Divergence { step: t, value: f64::NAN });
                break;
            }
            Err(e) => return Err(e),
        }
        let loss = base.value(&x);
        if !loss.is_finite() || (cap > 0.0 && loss > cap) {
            divergence = Some(Divergence { step: t, value: loss });
            break;
        }
        steps_run = t;
        final_loss = loss;
        best_loss = best_loss.min(loss);
        max_norm = max_norm.max(norm_sq(&x).sqrt());
        if steps_to_threshold.is_none() && cfg.threshold.is_some_and(|th| loss <= th) {
            steps_to_threshold = Some(t);
        }
        if t % cfg.eval_every == 0 || t == cfg.steps {
            let v = stepper.v_stats();
            records.push(TraceRecord {
                step: t,
                loss,
                grad_norm_sq: base.gradient(&x).map(|g| norm_sq(&g)),
                v_min: v.map(|s| s.0),
                v_max: v.map(|s| s.1),
                v_mean: v.map(|s| s.2),
                fn_evals: counter.objective_evals,
                block_forwards: counter.block_forward_calls,
                elapsed_s: clock.map_or(0.0, |c| c.elapsed().as_secs_f64()),
            });
        }
    }

    let summary = TraceSummary {
        seed,
        optimizer: cfg.optimizer.name,
        eta: cfg.optimizer.eta,
        initial_loss,
        final_loss,
        best_loss,
        steps_run,
        steps_to_threshold,
        divergence,
        fn_evals: counter.objective_evals,
        block_forwards: counter.block_forward_calls,
        mean_grad_norm_sq: (track_grad && divergence.is_none()).then(|| grad_sum / cfg.steps as f64),
        max_iterate_norm: max_norm,
    };
    Ok(Trace { records, sigmas, summary })
}

/// All seeds of `cfg`, in config order.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<Trace>> {
    cfg.validate()?;
    cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(extra: &str, optimizer: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            "steps = 50\nseeds = [0, 1]\nepsilon = 1e-3\n{extra}\n[objective.quadratic]\nd = 9\n[optimizer]\n{optimizer}\n"
        ))
        .unwrap()
    }

    #[test]
    fn one_step_one_record() {
        let mut c = cfg("", "name = \"zo-sgd\"\neta = 1e-4");
        c.steps = 1;
        let t = run_seed(&c, 0).unwrap();
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.records[0].step, 1);
        assert_eq!(t.records[0].fn_evals, 2);
    }

    #[test]
    fn eval_cadence_keeps_last_step() {
        let c = cfg("eval_every = 7", "name = \"meazo\"\neta = 1e-3");
        let t = run_seed(&c, 0).unwrap();
        let steps: Vec<u64> = t.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![7, 14, 21, 28, 35, 42, 49, 50]);
        assert!(t.records.iter().all(|r| r.v_min.is_some()));
        assert!(t.summary.mean_grad_norm_sq.is_none());
    }

    #[test]
    fn huge_step_diverges_without_error() {
        let c = cfg("", "name = \"zo-sgd\"\neta = 100.0");
        let t = run_seed(&c, 0).unwrap();
        assert!(t.diverged());
        assert!(t.summary.steps_run < 50);
        assert_eq!(t.records.len() as u64, t.summary.steps_run);
    }

    #[test]
    fn counters_for_each_optimizer() {
        for (name, q, per_step) in [("zo-sgd", 2, 4), ("zo-adam", 3, 6), ("radazo", 1, 2), ("meazo", 2, 4), ("fzoo", 4, 5)] {
            let c = cfg(&format!("q = {q}"), &format!("name = \"{name}\"\neta = 1e-5"));
            let t = run_seed(&c, 0).unwrap();
            assert_eq!(t.summary.fn_evals, per_step * 50, "{name}");
            for w in t.records.windows(2) {
                assert!(w[0].step < w[1].step && w[0].fn_evals <= w[1].fn_evals);
            }
        }
    }

    #[test]
    fn grouped_on_quadratic_uses_natural_blocks() {
        let c = cfg("partition = \"layers:3\"", "name = \"meazo-grouped\"\neta = 1e-3");
        let t = run_seed(&c, 0).unwrap();
        assert_eq!(t.summary.fn_evals, 2 * 3 * 50);
        assert!(t.summary.final_loss < t.summary.initial_loss);
    }

    #[test]
    fn fzoo_records_sigmas() {
        let c = cfg("q = 3", "name = \"fzoo\"\neta = 1e-4");
        let t = run_seed(&c, 0).unwrap();
        assert_eq!(t.sigmas.len(), 50);
        assert!(t.sigmas.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn seeds_are_independent_and_ordered() {
        let c = cfg("", "name = \"zo-adam\"\neta = 1e-3");
        let all = run(&c).unwrap();
        assert_eq!(all[0], run_seed(&c, 0).unwrap());
        assert_eq!(all[1], run_seed(&c, 1).unwrap());
        assert_ne!(all[0].summary.final_loss, all[1].summary.final_loss);
    }

    #[test]
    fn threshold_bookkeeping() {
        let c = cfg("threshold = 1e9", "name = \"zo-sgd\"\neta = 1e-4");
        assert_eq!(run_seed(&c, 0).unwrap().summary.steps_to_threshold, Some(0));
        let c = cfg("threshold = -1.0", "name = \"zo-sgd\"\neta = 1e-4");
        assert_eq!(run_seed(&c, 0).unwrap().summary.steps_to_threshold, None);
    }
}
