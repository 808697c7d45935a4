//! Central-difference projected gradients and the q-sample ZO estimators.
//!
//! All estimators reduce over samples in index order (sample `i` outer, block
//! `j` inner) so that the grouped, ungrouped and prefix-cached paths produce
//! bit-identical vectors on the same replay stream.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, ZoError};
use crate::objectives::Objective;
use crate::perturb::{fill_direction, PerturbationSpec, ReplayCoordinate};

/// Disjoint coordinate blocks covering `0..d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    d: usize,
    blocks: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(d: usize, blocks: Vec<Vec<usize>>) -> Result<Self> {
        if d == 0 {
            return Err(invalid("partition dimension must be at least 1"));
        }
        if blocks.is_empty() {
            return Err(invalid("partition needs at least one block"));
        }
        let mut seen = vec![false; d];
        for (j, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(invalid(format!("partition block {j} is empty")));
            }
            for &k in block {
                if k >= d {
                    return Err(invalid(format!("partition index {k} out of range for dimension {d}")));
                }
                if std::mem::replace(&mut seen[k], true) {
                    return Err(invalid(format!("coordinate {k} appears in more than one block")));
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("coordinate {k} is not covered by any block")));
        }
        Ok(Self { d, blocks })
    }

    /// The trivial partition `p = 1`.
    pub fn single(d: usize) -> Result<Self> {
        Self::new(d, vec![(0..d).collect()])
    }

    /// Half-open index ranges.
    pub fn from_ranges(d: usize, ranges: &[Range<usize>]) -> Result<Self> {
        Self::new(d, ranges.iter().map(|r| r.clone().collect()).collect())
    }

    /// `p` contiguous blocks of near-equal size.
    pub fn contiguous(d: usize, p: usize) -> Result<Self> {
        if p == 0 || p > d {
            return Err(invalid(format!("cannot split {d} coordinates into {p} blocks")));
        }
        let ranges: Vec<_> = (0..p).map(|j| j * d / p..(j + 1) * d / p).collect();
        Self::from_ranges(d, &ranges)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, j: usize) -> &[usize] {
        &self.blocks[j]
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    /// Binary mask `m_j`.
    pub fn mask(&self, j: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for &k in &self.blocks[j] {
            m[k] = 1.0;
        }
        m
    }
}

/// How a partition is written in a config file: explicit half-open ranges,
/// or `"layers:p"` for an objective's own `p` natural blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PartitionSpec {
    Ranges(Vec<[usize; 2]>),
    #[serde(with = "layers_shorthand")]
    Layers(usize),
}

mod layers_shorthand {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &usize, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("layers:{p}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<usize, D::Error> {
        let s = String::deserialize(d)?;
        super::parse_layers(&s).map_err(serde::de::Error::custom)
    }
}

fn parse_layers(s: &str) -> Result<usize> {
    let p = s
        .strip_prefix("layers:")
        .ok_or_else(|| invalid(format!("expected \"layers:<p>\", got {s:?}")))?;
    let p: usize = p.trim().parse().map_err(|_| invalid(format!("bad block count in {s:?}")))?;
    if p == 0 {
        return Err(invalid("layers:p needs p >= 1"));
    }
    Ok(p)
}

impl FromStr for PartitionSpec {
    type Err = ZoError;

    /// Accepts `layers:p` or a comma list of half-open ranges such as `0..3,3..9`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with("layers:") {
            return parse_layers(s).map(PartitionSpec::Layers);
        }
        let mut ranges = Vec::new();
        for part in s.split(',') {
            let (a, b) = part
                .trim()
                .split_once("..")
                .ok_or_else(|| invalid(format!("bad range {part:?}")))?;
            let a: usize = a.trim().parse().map_err(|_| invalid(format!("bad range start in {part:?}")))?;
            let b: usize = b.trim().parse().map_err(|_| invalid(format!("bad range end in {part:?}")))?;
            ranges.push([a, b]);
        }
        Ok(PartitionSpec::Ranges(ranges))
    }
}

impl fmt::Display for PartitionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionSpec::Layers(p) => write!(f, "layers:{p}"),
            PartitionSpec::Ranges(r) => {
                let parts: Vec<String> = r.iter().map(|[a, b]| format!("{a}..{b}")).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl PartitionSpec {
    /// Resolve against dimension `d`. `natural` supplies the objective's own
    /// block ranges for the `layers:p` form.
    pub fn resolve(&self, d: usize, natural: Option<&[Range<usize>]>) -> Result<Partition> {
        match self {
            PartitionSpec::Ranges(r) => {
                let mut ranges = Vec::with_capacity(r.len());
                for &[a, b] in r {
                    if a >= b {
                        return Err(invalid(format!("empty or reversed range {a}..{b}")));
                    }
                    if b > d {
                        return Err(invalid(format!("range {a}..{b} exceeds dimension {d}")));
                    }
                    ranges.push(a..b);
                }
                Partition::from_ranges(d, &ranges)
            }
            PartitionSpec::Layers(p) => {
                let natural = natural.ok_or_else(|| invalid("layers:p needs an objective with natural blocks"))?;
                if natural.len() != *p {
                    return Err(invalid(format!(
                        "layers:{p} requested but the objective has {} natural blocks",
                        natural.len()
                    )));
                }
                Partition::from_ranges(d, natural)
            }
        }
    }
}

/// Work done by one estimator call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounter {
    /// Objective values produced, however they were computed.
    pub objective_evals: u64,
    /// Evaluations that ran the objective from scratch.
    pub full_forward_calls: u64,
    /// Individual block forwards, for layered objectives.
    pub block_forward_calls: u64,
}

impl EvalCounter {
    pub fn add(&mut self, other: EvalCounter) {
        self.objective_evals += other.objective_evals;
        self.full_forward_calls += other.full_forward_calls;
        self.block_forward_calls += other.block_forward_calls;
    }

    fn full_eval<O: Objective + ?Sized>(&mut self, f: &O) {
        self.objective_evals += 1;
        self.full_forward_calls += 1;
        if let Some(chain) = f.layered() {
            self.block_forward_calls += chain.blocks() as u64;
        }
    }
}

fn checked_value<O: Objective + ?Sized>(f: &O, x: &[f64]) -> Result<f64> {
    let v = f.value(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ZoError::NumericFailure { point: x.to_vec(), value: v })
    }
}

/// `(f(x + εu) − f(x − εu)) / (2ε)`, using exactly two evaluations.
pub fn projected_gradient<O: Objective + ?Sized>(f: &O, x: &[f64], u: &[f64], epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if x.len() != u.len() {
        return Err(invalid("point and direction differ in dimension"));
    }
    let plus: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + epsilon * b).collect();
    let minus: Vec<f64> = x.iter().zip(u).map(|(a, b)| a - epsilon * b).collect();
    let fp = checked_value(f, &plus)?;
    let fm = checked_value(f, &minus)?;
    Ok((fp - fm) / (2.0 * epsilon))
}

#[derive(Debug, Clone)]
pub struct ZoEstimate {
    pub gradient: Vec<f64>,
    /// Projected-gradient scalars `Δ_i`, one per sample.
    pub scalars: Vec<f64>,
    pub evals: EvalCounter,
}

#[derive(Debug, Clone)]
pub struct GroupedEstimate {
    pub gradient: Vec<f64>,
    /// `scalars[i][j]` is `Δ_ε(x; m_j ⊙ u_i)`.
    pub scalars: Vec<Vec<f64>>,
    pub evals: EvalCounter,
}

impl GroupedEstimate {
    /// Per-block means `g_j = (1/q) Σ_i Δ_{i,j}`.
    pub fn block_means(&self) -> Vec<f64> {
        let p = self.scalars.first().map_or(0, Vec::len);
        let q = self.scalars.len() as f64;
        (0..p).map(|j| self.scalars.iter().map(|row| row[j]).sum::<f64>() / q).collect()
    }
}

/// The q-sample estimator `(s/q) Σ_i Δ_ε(x; u_i) u_i`, with `s = d` for
/// sphere directions and `s = 1` otherwise. Directions are replayed from
/// `(step, i)`.
pub fn zo_gradient<O: Objective + ?Sized>(
    f: &O,
    x: &[f64],
    spec: &PerturbationSpec,
    q: usize,
    step: u64,
) -> Result<ZoEstimate> {
    if q == 0 {
        return Err(invalid("q must be at least 1"));
    }
    let d = x.len();
    if d == 0 || d != f.dim() {
        return Err(invalid(format!("point has dimension {d}, objective expects {}", f.dim())));
    }
    let mut u = vec![0.0; d];
    let mut acc = vec![0.0; d];
    let mut scalars = Vec::with_capacity(q);
    let mut evals = EvalCounter::default();
    for i in 0..q {
        fill_direction(spec, ReplayCoordinate::new(step, i as u64), &mut u)?;
        let delta = projected_gradient(f, x, &u, spec.epsilon)?;
        evals.full_eval(f);
        evals.full_eval(f);
        for (a, ui) in acc.iter_mut().zip(&u) {
            *a += delta * ui;
        }
        scalars.push(delta);
    }
    let factor = spec.distribution.estimator_scale(d) / q as f64;
    acc.iter_mut().for_each(|a| *a *= factor);
    Ok(ZoEstimate { gradient: acc, scalars, evals })
}

/// Only the scalars `Δ_ε(x; u_i)`, with no estimate vector formed. This is
/// all MEAZO needs, since its update replays the directions.
pub fn projected_scalars<O: Objective + ?Sized>(
    f: &O,
    x: &[f64],
    spec: &PerturbationSpec,
    q: usize,
    step: u64,
) -> Result<(Vec<f64>, EvalCounter)> {
    if q == 0 {
        return Err(invalid("q must be at least 1"));
    }
    let d = x.len();
    if d == 0 || d != f.dim() {
        return Err(invalid(format!("point has dimension {d}, objective expects {}", f.dim())));
    }
    let mut u = vec![0.0; d];
    let mut scalars = Vec::with_capacity(q);
    let mut evals = EvalCounter::default();
    for i in 0..q {
        fill_direction(spec, ReplayCoordinate::new(step, i as u64), &mut u)?;
        scalars.push(projected_gradient(f, x, &u, spec.epsilon)?);
        evals.full_eval(f);
        evals.full_eval(f);
    }
    Ok((scalars, evals))
}

/// Projected gradient along `m_j ⊙ u`, touching only the block's coordinates.
fn block_projected_gradient<O: Objective + ?Sized>(
    f: &O,
    x: &[f64],
    u: &[f64],
    block: &[usize],
    epsilon: f64,
    scratch: &mut Vec<f64>,
) -> Result<f64> {
    scratch.clear();
    scratch.extend_from_slice(x);
    for &k in block {
        scratch[k] = x[k] + epsilon * u[k];
    }
    let fp = checked_value(f, scratch)?;
    for &k in block {
        scratch[k] = x[k] - epsilon * u[k];
    }
    let fm = checked_value(f, scratch)?;
    Ok((fp - fm) / (2.0 * epsilon))
}

/// Block estimator `(s/q) Σ_i Σ_j Δ_ε(x; m_j ⊙ u_i)(m_j ⊙ u_i)` against a
/// black-box objective: `2qp` evaluations.
pub fn grouped_zo_gradient<O: Objective + ?Sized>(
    f: &O,
    x: &[f64],
    spec: &PerturbationSpec,
    q: usize,
    partition: &Partition,
    step: u64,
) -> Result<GroupedEstimate> {
    if q == 0 {
        return Err(invalid("q must be at least 1"));
    }
    let d = x.len();
    if partition.dim() != d || f.dim() != d {
        return Err(invalid(format!(
            "partition dimension {} does not match point dimension {d}",
            partition.dim()
        )));
    }
    let mut u = vec![0.0; d];
    let mut acc = vec![0.0; d];
    let mut scratch = Vec::with_capacity(d);
    let mut scalars = Vec::with_capacity(q);
    let mut evals = EvalCounter::default();
    for i in 0..q {
        fill_direction(spec, ReplayCoordinate::new(step, i as u64), &mut u)?;
        let mut row = Vec::with_capacity(partition.len());
        for block in partition.blocks() {
            let delta = block_projected_gradient(f, x, &u, block, spec.epsilon, &mut scratch)?;
            evals.full_eval(f);
            evals.full_eval(f);
            for &k in block {
                acc[k] += delta * u[k];
            }
            row.push(delta);
        }
        scalars.push(row);
    }
    let factor = spec.distribution.estimator_scale(d) / q as f64;
    acc.iter_mut().for_each(|a| *a *= factor);
    Ok(GroupedEstimate { gradient: acc, scalars, evals })
}

/// Block forwards used by [`efficient_grouped_eval`]: `pq(p+1) + p − 1`.
pub fn efficient_block_forwards(p: u64, q: u64) -> u64 {
    p * q * (p + 1) + p - 1
}

/// Grouped estimator over a layered objective, one block per layer, sweeping
/// blocks left to right and reusing the cached unperturbed prefix.
///
/// Matches [`grouped_zo_gradient`] bit for bit on the same replay stream.
pub fn efficient_grouped_eval<O: Objective + ?Sized>(
    objective: &O,
    x: &[f64],
    spec: &PerturbationSpec,
    q: usize,
    step: u64,
) -> Result<GroupedEstimate> {
    let chain = objective
        .layered()
        .ok_or_else(|| invalid("efficient grouped evaluation needs a layered objective"))?;
    if q == 0 {
        return Err(invalid("q must be at least 1"));
    }
    let d = x.len();
    if d != chain.dim() {
        return Err(invalid(format!("chain expects {} parameters, got {d}", chain.dim())));
    }
    let p = chain.blocks();
    let eps = spec.epsilon;
    let mut u = vec![0.0; d];
    let mut acc = vec![0.0; d];
    let mut scalars = vec![vec![0.0; p]; q];
    let mut evals = EvalCounter::default();

    let mut cache = chain.input().to_vec();
    for j in 1..=p {
        let h_prev = std::mem::take(&mut cache);
        let range = chain.block_range(j);
        if j < p {
            cache = chain.forward_block(j, &h_prev, &x[range.clone()]);
            evals.block_forward_calls += 1;
        }
        let suffix_blocks = (p - j + 1) as u64;
        let base = &x[range.clone()];
        let mut perturbed = vec![0.0; base.len()];
        for (i, row) in scalars.iter_mut().enumerate() {
            fill_direction(spec, ReplayCoordinate::new(step, i as u64), &mut u)?;
            let ub = &u[range.clone()];

            for ((slot, xb), ui) in perturbed.iter_mut().zip(base).zip(ub) {
                *slot = xb + eps * ui;
            }
            let fp = chain.forward_suffix(j, &h_prev, &perturbed, x);
            for ((slot, xb), ui) in perturbed.iter_mut().zip(base).zip(ub) {
                *slot = xb - eps * ui;
            }
            let fm = chain.forward_suffix(j, &h_prev, &perturbed, x);
            evals.block_forward_calls += 2 * suffix_blocks;
            evals.objective_evals += 2;
            for v in [fp, fm] {
                if !v.is_finite() {
                    return Err(ZoError::NumericFailure { point: x.to_vec(), value: v });
                }
            }

            let delta = (fp - fm) / (2.0 * eps);
            for (a, ui) in acc[range.clone()].iter_mut().zip(ub) {
                *a += delta * ui;
            }
            row[j - 1] = delta;
        }
    }
    let factor = spec.distribution.estimator_scale(d) / q as f64;
    acc.iter_mut().for_each(|a| *a *= factor);
    Ok(GroupedEstimate { gradient: acc, scalars, evals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{make_block_quadratic, Affine, FnObjective, LayeredChain, Regime};
    use crate::perturb::Distribution;

    fn spec(dist: Distribution) -> PerturbationSpec {
        PerturbationSpec::new(dist, 1e-3, 9).unwrap()
    }

    #[test]
    fn constant_has_zero_projected_gradient() {
        let f = FnObjective::new(3, |_: &[f64]| 4.2);
        assert_eq!(projected_gradient(&f, &[1.0, 2.0, 3.0], &[0.3, -1.0, 2.0], 0.7).unwrap(), 0.0);
    }

    #[test]
    fn affine_projected_gradient_is_exact() {
        let f = Affine { slope: vec![2.0, -1.0], offset: 0.0 };
        assert_eq!(projected_gradient(&f, &[0.0, 0.0], &[1.0, 1.0], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn half_norm_sq_example() {
        let f = FnObjective::new(2, |x: &[f64]| 0.5 * (x[0] * x[0] + x[1] * x[1]));
        let v = projected_gradient(&f, &[1.0, 2.0], &[1.0, 0.0], 0.1).unwrap();
        // f(1.1, 2) = 2.605, f(0.9, 2) = 2.405
        let oracle = (2.605 - 2.405) / 0.2;
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_value_reports_point() {
        let f = FnObjective::new(1, |x: &[f64]| if x[0] > 0.5 { f64::NAN } else { 0.0 });
        match projected_gradient(&f, &[0.0], &[1.0], 1.0) {
            Err(ZoError::NumericFailure { point, value }) => {
                assert_eq!(point, vec![1.0]);
                assert!(value.is_nan());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_objective_gives_zero_estimate() {
        let f = FnObjective::new(4, |_: &[f64]| -3.0);
        for dist in Distribution::ALL {
            let e = zo_gradient(&f, &[0.1, 0.2, 0.3, 0.4], &spec(dist), 3, 5).unwrap();
            assert!(e.gradient.iter().all(|&g| g == 0.0));
            let part = Partition::contiguous(4, 2).unwrap();
            let e = grouped_zo_gradient(&f, &[0.1, 0.2, 0.3, 0.4], &spec(dist), 2, &part, 5).unwrap();
            assert!(e.gradient.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn affine_single_sample_is_projection_times_direction() {
        let a = vec![1.5, -2.0, 0.25];
        let f = Affine { slope: a.clone(), offset: 1.0 };
        let s = spec(Distribution::Gaussian);
        let e = zo_gradient(&f, &[0.3, 0.1, -0.7], &s, 1, 12).unwrap();
        let u = crate::perturb::sample_direction(&s, ReplayCoordinate::new(12, 0), 3).unwrap();
        let au: f64 = a.iter().zip(&u).map(|(x, y)| x * y).sum();
        for (g, ui) in e.gradient.iter().zip(&u) {
            assert!((g - au * ui).abs() < 1e-9 * (1.0 + (au * ui).abs()));
        }
    }

    #[test]
    fn scalars_only_path_agrees() {
        let f = FnObjective::new(4, |x: &[f64]| x.iter().map(|v| v.powi(3)).sum());
        let x = [0.3, -0.1, 0.7, 0.2];
        let s = spec(Distribution::Ternary);
        let full = zo_gradient(&f, &x, &s, 3, 11).unwrap();
        let (scalars, evals) = projected_scalars(&f, &x, &s, 3, 11).unwrap();
        assert_eq!(scalars, full.scalars);
        assert_eq!(evals, full.evals);
    }

    #[test]
    fn evaluation_counts() {
        let f = FnObjective::new(6, |x: &[f64]| x.iter().sum());
        let e = zo_gradient(&f, &[0.0; 6], &spec(Distribution::Gaussian), 4, 0).unwrap();
        assert_eq!(e.evals.objective_evals, 8);
        let part = Partition::contiguous(6, 3).unwrap();
        let e = grouped_zo_gradient(&f, &[0.0; 6], &spec(Distribution::Gaussian), 4, &part, 0).unwrap();
        assert_eq!(e.evals.objective_evals, 2 * 4 * 3);
    }

    #[test]
    fn single_block_matches_ungrouped_bitwise() {
        let quad = make_block_quadratic(9, Regime::Heterogeneous, 4).unwrap();
        let x: Vec<f64> = (0..9).map(|k| (k as f64 * 0.37).sin()).collect();
        let part = Partition::single(9).unwrap();
        for dist in Distribution::ALL {
            let a = zo_gradient(&quad, &x, &spec(dist), 3, 17).unwrap();
            let b = grouped_zo_gradient(&quad, &x, &spec(dist), 3, &part, 17).unwrap();
            let bits = |v: &[f64]| v.iter().map(|g| g.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.gradient), bits(&b.gradient));
        }
    }

    #[test]
    fn per_coordinate_rademacher_recovers_affine_slope() {
        let a = vec![3.0, -1.0, 0.5, 2.0];
        let f = Affine { slope: a.clone(), offset: 0.0 };
        let part = Partition::contiguous(4, 4).unwrap();
        let e = grouped_zo_gradient(&f, &[0.2, 0.4, -1.0, 0.0], &spec(Distribution::Rademacher), 1, &part, 3).unwrap();
        for (g, ak) in e.gradient.iter().zip(&a) {
            assert!((g - ak).abs() < 1e-9);
        }
    }

    #[test]
    fn partition_mismatch_rejected() {
        let f = FnObjective::new(4, |x: &[f64]| x[0]);
        let part = Partition::contiguous(5, 2).unwrap();
        assert!(grouped_zo_gradient(&f, &[0.0; 4], &spec(Distribution::Gaussian), 1, &part, 0).is_err());
    }

    #[test]
    fn partition_validation() {
        assert!(Partition::new(3, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(Partition::new(3, vec![vec![0, 1]]).is_err());
        assert!(Partition::new(3, vec![vec![0, 1], vec![2, 3]]).is_err());
        assert!(Partition::new(3, vec![vec![], vec![0, 1, 2]]).is_err());
        let p = Partition::new(3, vec![vec![2], vec![0, 1]]).unwrap();
        let sum: Vec<f64> = (0..3).map(|k| p.mask(0)[k] + p.mask(1)[k]).collect();
        assert_eq!(sum, vec![1.0; 3]);
        assert_eq!(Partition::single(3).unwrap().mask(0), vec![1.0; 3]);
    }

    #[test]
    fn partition_spec_parsing() {
        assert_eq!("layers:4".parse::<PartitionSpec>().unwrap(), PartitionSpec::Layers(4));
        assert_eq!(
            "0..3, 3..9".parse::<PartitionSpec>().unwrap(),
            PartitionSpec::Ranges(vec![[0, 3], [3, 9]])
        );
        assert!("layers:0".parse::<PartitionSpec>().is_err());
        assert!("layers:x".parse::<PartitionSpec>().is_err());
        assert!("0-3".parse::<PartitionSpec>().is_err());
        let spec = PartitionSpec::Ranges(vec![[0, 3], [3, 9]]);
        assert_eq!(spec.to_string().parse::<PartitionSpec>().unwrap(), spec);
        assert!(PartitionSpec::Ranges(vec![[0, 3], [3, 10]]).resolve(9, None).is_err());
        assert!(PartitionSpec::Ranges(vec![[3, 3], [0, 9]]).resolve(9, None).is_err());
        assert!(PartitionSpec::Layers(2).resolve(9, None).is_err());
    }

    #[test]
    fn efficient_counts_closed_form() {
        assert_eq!(efficient_block_forwards(16, 1), 287);
        assert_eq!(efficient_block_forwards(1, 1), 2);
        assert_eq!(efficient_block_forwards(3, 2), 26);
    }

    #[test]
    fn efficient_matches_naive_on_chain() {
        let chain = LayeredChain::uniform(3, 4, 1).unwrap();
        let x = chain.init_params(2);
        let part = Partition::from_ranges(chain.dim(), &chain.block_ranges()).unwrap();
        for dist in Distribution::ALL {
            let naive = grouped_zo_gradient(&chain, &x, &spec(dist), 2, &part, 8).unwrap();
            let fast = efficient_grouped_eval(&chain, &x, &spec(dist), 2, 8).unwrap();
            let bits = |v: &[f64]| v.iter().map(|g| g.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&naive.gradient), bits(&fast.gradient));
            assert_eq!(naive.scalars, fast.scalars);
            assert_eq!(fast.evals.block_forward_calls, 26);
            assert_eq!(naive.evals.block_forward_calls, 2 * 2 * 3 * 3);
        }
    }

    #[test]
    fn efficient_requires_layered_objective() {
        let f = FnObjective::new(2, |x: &[f64]| x[0]);
        assert!(efficient_grouped_eval(&f, &[0.0, 0.0], &spec(Distribution::Gaussian), 1, 0).is_err());
    }
}
