//! Synthetic objectives with analytic oracles.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, ZoError};
use crate::perturb::{keyed_rng, mix64, DOMAIN_NOISE, DOMAIN_OBJECTIVE};

/// A scalar objective evaluated by zeroth-order methods.
///
/// Only `value` is needed by the estimators. The analytic hooks feed traces
/// and verification code and are `None` when the objective has no closed form.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Lipschitz constant of the gradient, when known.
    fn smoothness(&self) -> Option<f64> {
        None
    }

    /// The sequential block structure, for objectives that have one.
    fn layered(&self) -> Option<&LayeredChain> {
        None
    }
}

/// Wraps a closure as an [`Objective`].
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnObjective<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// `f(x) = aᵀx + c`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub slope: Vec<f64>,
    pub offset: f64,
}

impl Objective for Affine {
    fn dim(&self) -> usize {
        self.slope.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        dot(&self.slope, x) + self.offset
    }

    fn gradient(&self, _x: &[f64]) -> Option<Vec<f64>> {
        Some(self.slope.clone())
    }

    fn smoothness(&self) -> Option<f64> {
        Some(0.0)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Heterogeneous,
    Homogeneous,
}

impl FromStr for Regime {
    type Err = ZoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heterogeneous" => Ok(Regime::Heterogeneous),
            "homogeneous" => Ok(Regime::Homogeneous),
            other => Err(invalid(format!("unknown regime {other:?}"))),
        }
    }
}

const SPECTRUM_LO: f64 = 1.0;
const SPECTRUM_HI: f64 = 1000.0;
// multiplicative spread of eigenvalues around each block center
const JITTER_LO: f64 = 0.9;
const JITTER_HI: f64 = 1.1;

/// `F(x) = ½ xᵀHx` with `H` block-diagonal: `√d` blocks of size `√d`.
#[derive(Debug, Clone)]
pub struct BlockQuadratic {
    d: usize,
    block: usize,
    regime: Regime,
    /// Row-major `block × block` matrices, one per diagonal block.
    blocks: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    centers: Vec<f64>,
}

/// Build the block quadratic for dimension `d` (a perfect square).
///
/// Heterogeneous block centers are log-spaced over `[1, 1000]`; homogeneous
/// blocks all sit at `√1000`. Within a block the eigenvalues are the center
/// times factors evenly spread over `[0.9, 1.1]`, rotated by a seeded
/// orthogonal basis.
pub fn make_block_quadratic(d: usize, regime: Regime, seed: u64) -> Result<BlockQuadratic> {
    if d == 0 {
        return Err(invalid("quadratic dimension must be at least 1"));
    }
    let s = (d as f64).sqrt().round() as usize;
    if s * s != d {
        return Err(invalid(format!("quadratic dimension {d} is not a perfect square")));
    }
    let centers: Vec<f64> = (0..s)
        .map(|b| match regime {
            Regime::Heterogeneous if s > 1 => {
                let t = b as f64 / (s - 1) as f64;
                SPECTRUM_LO * (SPECTRUM_HI / SPECTRUM_LO).powf(t)
            }
            Regime::Heterogeneous => SPECTRUM_LO,
            Regime::Homogeneous => (SPECTRUM_LO * SPECTRUM_HI).sqrt(),
        })
        .collect();

    let mut blocks = Vec::with_capacity(s);
    let mut eigenvalues = Vec::with_capacity(d);
    for (b, &c) in centers.iter().enumerate() {
        let lambdas: Vec<f64> = (0..s)
            .map(|k| {
                let t = if s > 1 { k as f64 / (s - 1) as f64 } else { 0.5 };
                c * (JITTER_LO + (JITTER_HI - JITTER_LO) * t)
            })
            .collect();
        let q = random_orthogonal(s, seed, b as u64);
        // H_b = Q diag(λ) Qᵀ
        let mut h = vec![0.0; s * s];
        for r in 0..s {
            for col in 0..s {
                let mut acc = 0.0;
                for k in 0..s {
                    acc += q[r * s + k] * lambdas[k] * q[col * s + k];
                }
                h[r * s + col] = acc;
            }
        }
        // symmetrize away rounding
        for r in 0..s {
            for col in (r + 1)..s {
                let m = 0.5 * (h[r * s + col] + h[col * s + r]);
                h[r * s + col] = m;
                h[col * s + r] = m;
            }
        }
        blocks.push(h);
        eigenvalues.extend(lambdas);
    }
    Ok(BlockQuadratic { d, block: s, regime, blocks, eigenvalues, centers })
}

/// Gram-Schmidt on a seeded Gaussian matrix. Columns of the result are orthonormal.
fn random_orthogonal(n: usize, seed: u64, block: u64) -> Vec<f64> {
    let mut rng = keyed_rng(DOMAIN_OBJECTIVE, seed, &[block]);
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for i in 0..n {
            for _ in 0..2 {
                for j in 0..i {
                    let proj = dot(&cols[i], &cols[j]);
                    let (head, tail) = cols.split_at_mut(i);
                    for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                        *a -= proj * b;
                    }
                }
            }
            let n_i = norm_sq(&cols[i]).sqrt();
            if n_i < 1e-10 {
                ok = false;
                break;
            }
            cols[i].iter_mut().for_each(|v| *v /= n_i);
        }
        if ok {
            let mut q = vec![0.0; n * n];
            for (c, col) in cols.iter().enumerate() {
                for (r, v) in col.iter().enumerate() {
                    q[r * n + c] = *v;
                }
            }
            return q;
        }
    }
}

impl BlockQuadratic {
    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_centers(&self) -> &[f64] {
        &self.centers
    }

    /// Eigenvalues grouped block by block.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn block_matrix(&self, b: usize) -> &[f64] {
        &self.blocks[b]
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.iter().cloned().fold(f64::MIN, f64::max)
    }

    pub fn optimum_value(&self) -> f64 {
        0.0
    }

    /// Coordinate ranges of the diagonal blocks.
    pub fn block_ranges(&self) -> Vec<std::ops::Range<usize>> {
        (0..self.block_count()).map(|b| b * self.block..(b + 1) * self.block).collect()
    }

    pub fn hessian_vector(&self, x: &[f64]) -> Vec<f64> {
        let s = self.block;
        let mut out = vec![0.0; self.d];
        for (b, h) in self.blocks.iter().enumerate() {
            let xb = &x[b * s..(b + 1) * s];
            for r in 0..s {
                out[b * s + r] = dot(&h[r * s..(r + 1) * s], xb);
            }
        }
        out
    }
}

impl Objective for BlockQuadratic {
    fn dim(&self) -> usize {
        self.d
    }

    fn value(&self, x: &[f64]) -> f64 {
        let s = self.block;
        let mut total = 0.0;
        for (b, h) in self.blocks.iter().enumerate() {
            let xb = &x[b * s..(b + 1) * s];
            for r in 0..s {
                total += xb[r] * dot(&h[r * s..(r + 1) * s], xb);
            }
        }
        0.5 * total
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(self.hessian_vector(x))
    }

    fn smoothness(&self) -> Option<f64> {
        Some(self.lambda_max())
    }
}

/// Law of the smoothing variable `v` in `F_ε(x) = E[F(x + εv)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothingLaw {
    /// `v` uniform in the unit ball. This is the law the d-scaled sphere estimator targets.
    Ball,
    /// `v` uniform on the unit sphere.
    Sphere,
}

impl SmoothingLaw {
    /// `E‖v‖²`.
    pub fn mean_norm_sq(self, d: usize) -> f64 {
        let d = d as f64;
        match self {
            SmoothingLaw::Ball => d / (d + 2.0),
            SmoothingLaw::Sphere => 1.0,
        }
    }

    /// `E‖v‖`.
    pub fn mean_norm(self, d: usize) -> f64 {
        let d = d as f64;
        match self {
            SmoothingLaw::Ball => d / (d + 1.0),
            SmoothingLaw::Sphere => 1.0,
        }
    }
}

impl FromStr for SmoothingLaw {
    type Err = ZoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ball" => Ok(SmoothingLaw::Ball),
            "sphere" | "sphere-limit" => Ok(SmoothingLaw::Sphere),
            other => Err(invalid(format!("unsupported smoothing law {other:?}"))),
        }
    }
}

impl fmt::Display for SmoothingLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SmoothingLaw::Ball => "ball",
            SmoothingLaw::Sphere => "sphere",
        })
    }
}

/// Closed-form `F_ε(x) = F(x) + (ε²/2)·tr(H)·E‖v‖²/d`.
pub fn smoothed_value(quad: &BlockQuadratic, x: &[f64], epsilon: f64, law: SmoothingLaw) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(invalid(format!("smoothing radius must be non-negative, got {epsilon}")));
    }
    let d = quad.dim();
    let c = law.mean_norm_sq(d) / d as f64;
    Ok(quad.value(x) + 0.5 * epsilon * epsilon * quad.trace() * c)
}

/// `∇F_ε(x)`, which for a quadratic is `Hx` for every `ε`.
pub fn smoothed_gradient(quad: &BlockQuadratic, x: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0) {
        return Err(invalid(format!("smoothing radius must be non-negative, got {epsilon}")));
    }
    Ok(quad.hessian_vector(x))
}

/// `f(x; ξ) = F(x) + tiltᵀx` with `tilt ~ N(0, σ²/d · I)`, so
/// `E‖∇f(x; ξ) − ∇F(x)‖² = σ²` exactly and the smoothness constant is unchanged.
pub struct NoisySample<'a, O: ?Sized> {
    base: &'a O,
    tilt: Vec<f64>,
}

/// Draw the per-sample objective for sample `xi` under noise stream `noise_seed`.
pub fn sample_noisy<'a, O: Objective + ?Sized>(base: &'a O, sigma: f64, noise_seed: u64, xi: u64) -> NoisySample<'a, O> {
    let d = base.dim();
    let tilt = if sigma == 0.0 {
        vec![0.0; d]
    } else {
        let scale = sigma / (d as f64).sqrt();
        let mut rng = keyed_rng(DOMAIN_NOISE, noise_seed, &[xi]);
        (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    NoisySample { base, tilt }
}

impl<O: Objective + ?Sized> NoisySample<'_, O> {
    pub fn tilt(&self) -> &[f64] {
        &self.tilt
    }
}

impl<O: Objective + ?Sized> Objective for NoisySample<'_, O> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.base.value(x) + dot(&self.tilt, x)
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut g = self.base.gradient(x)?;
        g.iter_mut().zip(&self.tilt).for_each(|(a, b)| *a += b);
        Some(g)
    }

    fn smoothness(&self) -> Option<f64> {
        self.base.smoothness()
    }
}

/// `p` blocks `h_j = tanh(W_j h_{j−1} + b_j)` followed by `‖h_p − y‖²`.
///
/// The parameter vector is the concatenation of per-block slices, each laid
/// out as `W_j` (row-major, `widths[j] × widths[j−1]`) then `b_j`.
#[derive(Debug, Clone)]
pub struct LayeredChain {
    widths: Vec<usize>,
    input: Vec<f64>,
    target: Vec<f64>,
    offsets: Vec<usize>,
}

/// Cached unperturbed activation `h_{j−1}` feeding block `j` (1-based).
#[derive(Debug, Clone)]
pub struct PrefixCache {
    block: usize,
    activation: Vec<f64>,
    fingerprint: u64,
}

impl PrefixCache {
    pub fn block(&self) -> usize {
        self.block
    }

    pub fn activation(&self) -> &[f64] {
        &self.activation
    }
}

#[derive(Debug, Clone)]
pub struct ChainEval {
    pub loss: f64,
    /// `h_{start}, …, h_p` where `start` is the first forwarded block.
    pub activations: Vec<Vec<f64>>,
    pub blocks_forwarded: usize,
}

impl LayeredChain {
    /// `widths[0]` is the input width; block `j` maps `widths[j−1] → widths[j]`.
    pub fn new(widths: Vec<usize>, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(invalid("a chain needs an input width and at least one block"));
        }
        if widths.contains(&0) {
            return Err(invalid("chain widths must be positive"));
        }
        let mut rng = keyed_rng(DOMAIN_OBJECTIVE, seed, &[u64::MAX]);
        let input = (0..widths[0]).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let target = (0..*widths.last().unwrap()).map(|_| 0.5 * rng.random_range(-1.0..1.0)).collect();
        let mut offsets = vec![0];
        for j in 1..widths.len() {
            let last = *offsets.last().unwrap();
            offsets.push(last + widths[j] * widths[j - 1] + widths[j]);
        }
        Ok(Self { widths, input, target, offsets })
    }

    /// `p` blocks of uniform width.
    pub fn uniform(p: usize, width: usize, seed: u64) -> Result<Self> {
        if p == 0 {
            return Err(invalid("chain needs at least one block"));
        }
        Self::new(vec![width; p + 1], seed)
    }

    pub fn blocks(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Parameter range of block `j` (1-based).
    pub fn block_range(&self, j: usize) -> std::ops::Range<usize> {
        self.offsets[j - 1]..self.offsets[j]
    }

    pub fn block_ranges(&self) -> Vec<std::ops::Range<usize>> {
        (1..=self.blocks()).map(|j| self.block_range(j)).collect()
    }

    /// Scaled Gaussian initial parameters.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = keyed_rng(DOMAIN_OBJECTIVE, seed, &[u64::MAX - 1]);
        let mut x = vec![0.0; self.dim()];
        for j in 1..=self.blocks() {
            let fan_in = self.widths[j - 1] as f64;
            for v in &mut x[self.block_range(j)] {
                *v = rng.sample::<f64, _>(StandardNormal) / fan_in.sqrt();
            }
        }
        x
    }

    /// Forward block `j` (1-based) from `h_prev` with its own parameter slice.
    pub fn forward_block(&self, j: usize, h_prev: &[f64], params: &[f64]) -> Vec<f64> {
        let (w_in, w_out) = (self.widths[j - 1], self.widths[j]);
        let (weights, bias) = params.split_at(w_in * w_out);
        (0..w_out)
            .map(|r| (dot(&weights[r * w_in..(r + 1) * w_in], h_prev) + bias[r]).tanh())
            .collect()
    }

    pub fn terminal_loss(&self, h_p: &[f64]) -> f64 {
        h_p.iter().zip(&self.target).map(|(h, y)| (h - y) * (h - y)).sum()
    }

    /// Forward blocks `j..=p` from `h_prev`, reading block `j`'s parameters
    /// from `block_params` and later blocks from `x`.
    pub fn forward_suffix(&self, j: usize, h_prev: &[f64], block_params: &[f64], x: &[f64]) -> f64 {
        let mut h = self.forward_block(j, h_prev, block_params);
        for k in (j + 1)..=self.blocks() {
            h = self.forward_block(k, &h, &x[self.block_range(k)]);
        }
        self.terminal_loss(&h)
    }

    fn fingerprint(&self, x: &[f64], j: usize) -> u64 {
        x[..self.offsets[j - 1]]
            .iter()
            .fold(0x243f_6a88_85a3_08d3, |h, v| mix64(h ^ v.to_bits()))
    }

    /// Cache `h_{j−1}` for block `j`, computed from scratch at `x`.
    pub fn prefix(&self, x: &[f64], j: usize) -> Result<PrefixCache> {
        if j == 0 || j > self.blocks() {
            return Err(invalid(format!("prefix block {j} outside 1..={}", self.blocks())));
        }
        let mut h = self.input.clone();
        for k in 1..j {
            h = self.forward_block(k, &h, &x[self.block_range(k)]);
        }
        Ok(PrefixCache { block: j, activation: h, fingerprint: self.fingerprint(x, j) })
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }

    /// Backpropagated gradient of the loss.
    fn backprop(&self, x: &[f64]) -> Vec<f64> {
        let p = self.blocks();
        let mut hs = vec![self.input.clone()];
        for j in 1..=p {
            let h = self.forward_block(j, &hs[j - 1], &x[self.block_range(j)]);
            hs.push(h);
        }
        let mut grad = vec![0.0; self.dim()];
        let mut upstream: Vec<f64> = hs[p].iter().zip(&self.target).map(|(h, y)| 2.0 * (h - y)).collect();
        for j in (1..=p).rev() {
            let (w_in, w_out) = (self.widths[j - 1], self.widths[j]);
            let range = self.block_range(j);
            let weights = &x[range.start..range.start + w_in * w_out];
            let da: Vec<f64> = upstream.iter().zip(&hs[j]).map(|(g, h)| g * (1.0 - h * h)).collect();
            let g = &mut grad[range.clone()];
            for r in 0..w_out {
                for c in 0..w_in {
                    g[r * w_in + c] = da[r] * hs[j - 1][c];
                }
                g[w_in * w_out + r] = da[r];
            }
            let mut next = vec![0.0; w_in];
            for r in 0..w_out {
                for c in 0..w_in {
                    next[c] += weights[r * w_in + c] * da[r];
                }
            }
            upstream = next;
        }
        grad
    }
}

/// Evaluate the chain, resuming from a cached prefix when one is supplied.
pub fn chain_eval(chain: &LayeredChain, x: &[f64], prefix: Option<&PrefixCache>) -> Result<ChainEval> {
    if x.len() != chain.dim() {
        return Err(invalid(format!("chain expects {} parameters, got {}", chain.dim(), x.len())));
    }
    let (start, mut h) = match prefix {
        Some(cache) => {
            if cache.block == 0 || cache.block > chain.blocks() {
                return Err(invalid("prefix cache refers to a block outside the chain"));
            }
            if chain.fingerprint(x, cache.block) != cache.fingerprint {
                return Err(invalid(format!(
                    "stale prefix: parameters before block {} changed since it was cached",
                    cache.block
                )));
            }
            (cache.block, cache.activation.clone())
        }
        None => (1, chain.input.clone()),
    };
    let mut activations = Vec::with_capacity(chain.blocks() - start + 1);
    for j in start..=chain.blocks() {
        h = chain.forward_block(j, &h, &x[chain.block_range(j)]);
        activations.push(h.clone());
    }
    Ok(ChainEval {
        loss: chain.terminal_loss(&h),
        activations,
        blocks_forwarded: chain.blocks() - start + 1,
    })
}

impl Objective for LayeredChain {
    fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let mut h = self.input.clone();
        for j in 1..=self.blocks() {
            h = self.forward_block(j, &h, &x[self.block_range(j)]);
        }
        self.terminal_loss(&h)
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(self.backprop(x))
    }

    fn layered(&self) -> Option<&LayeredChain> {
        Some(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_fd<O: Objective>(f: &O, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[k] += h;
                xm[k] -= h;
                (f.value(&xp) - f.value(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn random_point(d: usize, seed: u64) -> Vec<f64> {
        let mut rng = keyed_rng(99, seed, &[]);
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn d9_heterogeneous_layout() {
        let q = make_block_quadratic(9, Regime::Heterogeneous, 0).unwrap();
        assert_eq!(q.block_count(), 3);
        assert_eq!(q.block_size(), 3);
        let c = q.block_centers();
        assert!((c[0] - 1.0).abs() < 1e-12);
        assert!((c[1] - 1000f64.sqrt()).abs() < 1e-9);
        assert!((c[2] - 1000.0).abs() < 1e-9);
        assert!((q.lambda_max() - 1100.0).abs() < 1e-9);
    }

    #[test]
    fn homogeneous_shares_spectrum() {
        let q = make_block_quadratic(16, Regime::Homogeneous, 3).unwrap();
        let c0 = q.block_centers()[0];
        assert!(q.block_centers().iter().all(|&c| c == c0));
    }

    #[test]
    fn non_square_rejected() {
        assert!(make_block_quadratic(10, Regime::Heterogeneous, 0).is_err());
        assert!(make_block_quadratic(0, Regime::Heterogeneous, 0).is_err());
        assert!(make_block_quadratic(1, Regime::Heterogeneous, 0).is_ok());
    }

    #[test]
    fn minimum_at_origin() {
        let q = make_block_quadratic(25, Regime::Heterogeneous, 1).unwrap();
        let zero = vec![0.0; 25];
        assert_eq!(q.value(&zero), 0.0);
        assert!(q.gradient(&zero).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn blocks_are_symmetric_with_declared_spectrum() {
        let q = make_block_quadratic(16, Regime::Heterogeneous, 5).unwrap();
        let s = q.block_size();
        for b in 0..q.block_count() {
            let h = q.block_matrix(b);
            for r in 0..s {
                for c in 0..s {
                    assert_eq!(h[r * s + c], h[c * s + r]);
                }
            }
            let tr: f64 = (0..s).map(|r| h[r * s + r]).sum();
            let eig_sum: f64 = q.eigenvalues()[b * s..(b + 1) * s].iter().sum();
            assert!((tr - eig_sum).abs() < 1e-9 * eig_sum);
        }
        assert!(q.eigenvalues().iter().all(|&l| l > 0.0));
    }

    #[test]
    fn quadratic_gradient_matches_finite_differences() {
        let q = make_block_quadratic(9, Regime::Heterogeneous, 2).unwrap();
        for s in 0..10 {
            let x = random_point(9, s);
            let g = q.gradient(&x).unwrap();
            let fd = central_fd(&q, &x, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn chain_gradient_matches_finite_differences() {
        let chain = LayeredChain::uniform(3, 4, 7).unwrap();
        for s in 0..5 {
            let x = chain.init_params(s);
            let g = chain.gradient(&x).unwrap();
            let fd = central_fd(&chain, &x, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn smoothing_closed_forms() {
        let q = make_block_quadratic(9, Regime::Heterogeneous, 0).unwrap();
        let x = random_point(9, 4);
        assert_eq!(smoothed_value(&q, &x, 0.0, SmoothingLaw::Ball).unwrap(), q.value(&x));
        let gap = smoothed_value(&q, &x, 0.1, SmoothingLaw::Ball).unwrap() - q.value(&x);
        let expected = 0.005 * q.trace() / 11.0;
        assert!((gap - expected).abs() < 1e-12 * expected.max(1.0));
        assert_eq!(smoothed_gradient(&q, &x, 0.3).unwrap(), q.gradient(&x).unwrap());
        assert!(smoothed_value(&q, &x, -0.1, SmoothingLaw::Ball).is_err());
        assert!("gaussian".parse::<SmoothingLaw>().is_err());
    }

    #[test]
    fn zero_sigma_is_deterministic() {
        let q = make_block_quadratic(4, Regime::Heterogeneous, 0).unwrap();
        let x = random_point(4, 1);
        for xi in 0..5 {
            let f = sample_noisy(&q, 0.0, 3, xi);
            assert_eq!(f.value(&x), q.value(&x));
        }
    }

    #[test]
    fn noisy_sample_keeps_smoothness() {
        let q = make_block_quadratic(4, Regime::Heterogeneous, 0).unwrap();
        let f = sample_noisy(&q, 2.0, 3, 11);
        assert_eq!(f.smoothness(), q.smoothness());
        let x = random_point(4, 1);
        let g = f.gradient(&x).unwrap();
        let fd = central_fd(&f, &x, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn prefix_at_first_block_forwards_everything() {
        let chain = LayeredChain::uniform(4, 8, 1).unwrap();
        let x = chain.init_params(0);
        let full = chain_eval(&chain, &x, None).unwrap();
        assert_eq!(full.blocks_forwarded, 4);
        let p1 = chain.prefix(&x, 1).unwrap();
        let r = chain_eval(&chain, &x, Some(&p1)).unwrap();
        assert_eq!(r.blocks_forwarded, 4);
        assert_eq!(r.loss.to_bits(), full.loss.to_bits());
    }

    #[test]
    fn prefix_at_last_block() {
        let chain = LayeredChain::uniform(4, 8, 1).unwrap();
        let x = chain.init_params(0);
        let full = chain_eval(&chain, &x, None).unwrap();
        let cache = chain.prefix(&x, 4).unwrap();
        let r = chain_eval(&chain, &x, Some(&cache)).unwrap();
        assert_eq!(r.blocks_forwarded, 1);
        assert_eq!(r.loss.to_bits(), full.loss.to_bits());
        assert_eq!(full.loss.to_bits(), chain.value(&x).to_bits());
    }

    #[test]
    fn cached_prefix_matches_from_scratch_after_perturbing_slice() {
        let chain = LayeredChain::uniform(4, 8, 2).unwrap();
        let x = chain.init_params(3);
        let cache = chain.prefix(&x, 3).unwrap();
        let mut xp = x.clone();
        for v in &mut xp[chain.block_range(3)] {
            *v += 0.01;
        }
        let cached = chain_eval(&chain, &xp, Some(&cache)).unwrap();
        assert_eq!(cached.blocks_forwarded, 2);
        let scratch = chain_eval(&chain, &xp, None).unwrap();
        assert_eq!(cached.loss.to_bits(), scratch.loss.to_bits());
    }

    #[test]
    fn stale_prefix_rejected() {
        let chain = LayeredChain::uniform(4, 8, 2).unwrap();
        let x = chain.init_params(3);
        let cache = chain.prefix(&x, 3).unwrap();
        let mut xp = x.clone();
        xp[chain.block_range(2).start] += 1e-3;
        assert!(matches!(chain_eval(&chain, &xp, Some(&cache)), Err(ZoError::InvalidArgument(_))));
    }

    #[test]
    fn chain_dimension_is_sum_of_slices() {
        let chain = LayeredChain::new(vec![3, 5, 2], 0).unwrap();
        assert_eq!(chain.dim(), (5 * 3 + 5) + (2 * 5 + 2));
        let ranges = chain.block_ranges();
        assert_eq!(ranges[0], 0..20);
        assert_eq!(ranges[1], 20..32);
    }
}
