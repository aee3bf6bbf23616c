//! Discretized space-time white noise.
//!
//! The noise space is split into cells and the normalized indicators
//! `φ_k = 1_{cell k} / √da` serve as orthonormal basis, so the white-noise
//! mass of `[t, t+dt) × cell_k` is `√(dt·da)·ξ_k` and the Brownian family
//! `B^k` is the cumulative sum of `√dt·ξ_k`. The same `ξ` drives every
//! spatial point.
//!
//! Each (realization, step) pair owns an independent ChaCha8 stream:
//! the key is `splitmix64(root_seed ^ splitmix64(index + GOLDEN))` and the
//! stream id is the step number. Any step can be regenerated without
//! replaying earlier ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::models::{CellResponse, ModelSpec};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of realization `index` under `root_seed`.
pub fn mix_seed(root_seed: u64, index: u64) -> u64 {
    splitmix64(root_seed ^ splitmix64(index.wrapping_add(GOLDEN)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NoiseStream {
    pub root_seed: u64,
    pub realization_index: u64,
}

impl NoiseStream {
    pub fn new(root_seed: u64, realization_index: u64) -> Self {
        NoiseStream {
            root_seed,
            realization_index,
        }
    }

    pub fn seed(&self) -> u64 {
        mix_seed(self.root_seed, self.realization_index)
    }

    /// Generator for an auxiliary purpose (`channel`) of this realization,
    /// independent of the per-step noise streams.
    pub fn aux_rng(&self, channel: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed() ^ 0xA5A5_5A5A_0F0F_F0F0));
        rng.set_stream(channel);
        rng
    }

    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed());
        rng.set_stream(step as u64);
        rng
    }

    pub fn fill_step_noise(&self, step: usize, out: &mut [f64]) {
        let mut rng = self.step_rng(step);
        for v in out.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
    }
}

/// Standard normals `ξ_k`, one per noise cell, for time step `step`.
pub fn sample_step_noise(stream: &NoiseStream, step: usize, na: usize) -> Vec<f64> {
    let mut out = vec![0.0; na];
    stream.fill_step_noise(step, &mut out);
    out
}

/// One-step stochastic integral
/// `Σ_k (∫_{cell k} G(a, y, u(y)) da / √da) · √dt · ξ_k` at every grid point,
/// i.e. `√(dt·da)·Σ_k Ḡ_k ξ_k` with `Ḡ_k` the cell average of `G`.
/// The `√ε` factor is left to the caller.
pub fn stochastic_increment(model: &ModelSpec, grid: &Grid, u: &Field, xi: &[f64]) -> Result<Field> {
    grid.check_len("state", u.len())?;
    if xi.len() != grid.na {
        return Err(Error::Dimension {
            what: "noise sample",
            expected: grid.na,
            got: xi.len(),
        });
    }
    let scale = (grid.dt() / grid.da()).sqrt();
    let resp = CellResponse::new(model, grid, xi);
    let mut values = Vec::with_capacity(grid.ny);
    for (i, &ui) in u.values.iter().enumerate() {
        let v = scale * resp.value(grid.y(i), ui);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "stochastic increment",
                index: i,
            });
        }
        values.push(v);
    }
    Ok(Field::new(u.t, values))
}

/// Discrete Brownian path `B^j` at times `0, dt, …, T`.
pub fn brownian_basis(stream: &NoiseStream, grid: &Grid, j: usize) -> Result<Vec<f64>> {
    if j >= grid.na {
        return Err(Error::Input(format!("cell index {j} out of range 0..{}", grid.na)));
    }
    let sdt = grid.dt().sqrt();
    let mut path = Vec::with_capacity(grid.nt + 1);
    path.push(0.0);
    let mut xi = vec![0.0; grid.na];
    let mut b = 0.0;
    for step in 0..grid.nt {
        stream.fill_step_noise(step, &mut xi);
        b += sdt * xi[j];
        path.push(b);
    }
    Ok(path)
}
