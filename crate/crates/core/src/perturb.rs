//! Seed-replayed perturbation directions.
//!
//! A direction is never stored. It is a pure function of
//! `(base_seed, step, sample_index, block_index)`: the four words are mixed
//! into a 256-bit ChaCha key, so any single direction can be regenerated in
//! O(d) without advancing a shared stream.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Law of the perturbation direction `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    /// `u ~ N(0, I_d)`.
    Gaussian,
    /// `u` uniform on the unit sphere. Serialized as `"uniform"`.
    #[serde(rename = "uniform")]
    UniformSphere,
    /// Entries i.i.d. uniform on `{-1, +1}`.
    Rademacher,
    /// Entries i.i.d. uniform on `{-1, 0, +1}`.
    Ternary,
}

impl Distribution {
    pub const ALL: [Distribution; 4] = [
        Distribution::Gaussian,
        Distribution::UniformSphere,
        Distribution::Rademacher,
        Distribution::Ternary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Distribution::Gaussian => "gaussian",
            Distribution::UniformSphere => "uniform",
            Distribution::Rademacher => "rademacher",
            Distribution::Ternary => "ternary",
        }
    }

    /// Factor applied to `(1/q) Σ Δ_i u_i`. The sphere estimator is scaled by
    /// `d` so that it stays unbiased for the ball-smoothed gradient.
    pub fn estimator_scale(self, d: usize) -> f64 {
        match self {
            Distribution::UniformSphere => d as f64,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Distribution {
    type Err = crate::ZoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Distribution::Gaussian),
            "uniform" => Ok(Distribution::UniformSphere),
            "rademacher" => Ok(Distribution::Rademacher),
            "ternary" => Ok(Distribution::Ternary),
            other => Err(invalid(format!("unknown distribution tag {other:?}"))),
        }
    }
}

/// `σ` such that `E[u uᵀ] = σ I_d`.
pub fn second_moment_scale(distribution: Distribution, d: usize) -> f64 {
    match distribution {
        Distribution::Gaussian | Distribution::Rademacher => 1.0,
        Distribution::UniformSphere => 1.0 / d as f64,
        Distribution::Ternary => 2.0 / 3.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub distribution: Distribution,
    pub epsilon: f64,
    pub base_seed: u64,
}

impl PerturbationSpec {
    pub fn new(distribution: Distribution, epsilon: f64, base_seed: u64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be positive and finite, got {epsilon}")));
        }
        Ok(Self { distribution, epsilon, base_seed })
    }
}

/// Position of one direction inside a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ReplayCoordinate {
    pub step: u64,
    pub sample_index: u64,
    /// Zero when the estimator is ungrouped.
    pub block_index: u64,
}

impl ReplayCoordinate {
    pub fn new(step: u64, sample_index: u64) -> Self {
        Self { step, sample_index, block_index: 0 }
    }
}

// SplitMix64 finalizer.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator keyed by a seed and a path of words.
///
/// Different `domain` tags give unrelated streams for the same key words, so
/// direction draws, noise tilts and initial points never collide.
pub fn keyed_rng(domain: u64, seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = mix64(domain ^ 0x5a0d_e11a_u64.rotate_left(17));
    h = mix64(h ^ seed);
    for (i, &w) in path.iter().enumerate() {
        h = mix64(h ^ mix64(w.wrapping_add((i as u64 + 1).wrapping_mul(0xa076_1d64_78bd_642f))));
    }
    let mut key = [0u8; 32];
    let mut s = h;
    for chunk in key.chunks_exact_mut(8) {
        s = mix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub(crate) const DOMAIN_DIRECTION: u64 = 1;
pub(crate) const DOMAIN_NOISE: u64 = 2;
pub(crate) const DOMAIN_INIT: u64 = 3;
pub(crate) const DOMAIN_OBJECTIVE: u64 = 4;

/// Fill `out` with the direction at `coord`. `out.len()` is the dimension.
pub fn fill_direction(spec: &PerturbationSpec, coord: ReplayCoordinate, out: &mut [f64]) -> Result<()> {
    if out.is_empty() {
        return Err(invalid("direction dimension must be at least 1"));
    }
    let mut rng = keyed_rng(
        DOMAIN_DIRECTION,
        spec.base_seed,
        &[coord.step, coord.sample_index, coord.block_index],
    );
    match spec.distribution {
        Distribution::Gaussian => {
            for v in out.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        Distribution::UniformSphere => loop {
            let mut norm_sq = 0.0;
            for v in out.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                norm_sq += z * z;
                *v = z;
            }
            // a zero Gaussian draw has probability zero; redraw rather than divide by it
            if norm_sq > 0.0 {
                let inv = 1.0 / norm_sq.sqrt();
                out.iter_mut().for_each(|v| *v *= inv);
                break;
            }
        },
        Distribution::Rademacher => {
            for v in out.iter_mut() {
                *v = if rng.random::<bool>() { 1.0 } else { -1.0 };
            }
        }
        Distribution::Ternary => {
            for v in out.iter_mut() {
                *v = match rng.random_range(0u8..3) {
                    0 => -1.0,
                    1 => 0.0,
                    _ => 1.0,
                };
            }
        }
    }
    Ok(())
}

pub fn sample_direction(spec: &PerturbationSpec, coord: ReplayCoordinate, d: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; d];
    fill_direction(spec, coord, &mut out)?;
    Ok(out)
}

/// Seeded starting point `scale · z` with `z ~ N(0, I_d)`.
pub fn initial_point(d: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = keyed_rng(DOMAIN_INIT, seed, &[d as u64]);
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}
