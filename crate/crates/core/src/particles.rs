//! Particle systems for super-Brownian motion and Fleming–Viot.
//!
//! Branching: particles of mass `ε/K` branch at rate `K` (die or split in
//! two, probability ½ each), so `⟨M(f)⟩ = ε∫⟨μ_s, f²⟩ds`. Moran: `N = K/ε`
//! individuals and each ordered pair resamples at rate `ε/2`, so
//! `⟨N(f)⟩ = ε∫(⟨μ_s, f²⟩ − ⟨μ_s, f⟩²)ds`. `K = 1` is the plain system;
//! larger `K` shrinks the finite-population terms that the limiting
//! processes do not have. Events are thinned per time step; branching
//! splits a step into substeps when `K·dt` would exceed ½.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{pairwise_sum, Field, Grid, PathField};
use crate::metrics::{Measure, MeasurePath};
use crate::noise::NoiseStream;

const SBM_CHANNEL: u64 = 1;
const MORAN_CHANNEL: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmOptions {
    pub refinement: f64,
    pub branching: bool,
    /// Multiplies the branching rate; 1 is the calibrated system.
    pub rate_factor: f64,
    pub particle_cap: usize,
    /// Record every `stride` steps (the last step is always recorded).
    pub stride: usize,
    /// Initial positions are spread uniformly over this width around each
    /// atom of `μ₀`.
    pub jitter: f64,
}

impl Default for SbmOptions {
    fn default() -> Self {
        SbmOptions {
            refinement: 1.0,
            branching: true,
            rate_factor: 1.0,
            particle_cap: 1_000_000,
            stride: 1,
            jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoranOptions {
    pub refinement: f64,
    pub resampling: bool,
    pub stride: usize,
    pub jitter: f64,
}

impl Default for MoranOptions {
    fn default() -> Self {
        MoranOptions {
            refinement: 1.0,
            resampling: true,
            stride: 1,
            jitter: 0.0,
        }
    }
}

fn recorded(step: usize, nt: usize, stride: usize) -> bool {
    step % stride.max(1) == 0 || step == nt
}

fn sample_positions(mu0: &Measure, count: usize, jitter: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let total = mu0.total_mass();
    if !(total > 0.0) {
        return Err(Error::Input("initial measure has no mass".into()));
    }
    let mut cdf = Vec::with_capacity(mu0.masses.len());
    let mut acc = 0.0;
    for m in &mu0.masses {
        acc += m / total;
        cdf.push(acc);
    }
    Ok((0..count)
        .map(|_| {
            let r: f64 = rng.random::<f64>();
            let k = cdf.partition_point(|&c| c < r).min(cdf.len() - 1);
            mu0.positions[k] + jitter * (rng.random::<f64>() - 0.5)
        })
        .collect())
}

fn brownian_move(xs: &mut [f64], sdt: f64, rng: &mut ChaCha8Rng) {
    for x in xs.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x += sdt * z;
    }
}

fn snapshot(xs: &[f64], mass: f64) -> Measure {
    let mut positions = xs.to_vec();
    positions.sort_by(f64::total_cmp);
    let masses = vec![mass; positions.len()];
    Measure { positions, masses }
}

/// Branching Brownian particles approximating super-Brownian motion with
/// `⟨M(f)⟩ = ε∫⟨μ_s, f²⟩ds`.
pub fn simulate_sbm_particles(
    mu0: &Measure,
    epsilon: f64,
    stream: &NoiseStream,
    grid: &Grid,
    opts: &SbmOptions,
) -> Result<MeasurePath> {
    if !(epsilon > 0.0) {
        return Err(Error::Validation(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(opts.refinement >= 1.0) {
        return Err(Error::Validation("refinement must be >= 1".into()));
    }
    if !(opts.rate_factor >= 0.0 && opts.rate_factor.is_finite()) {
        return Err(Error::Validation(format!("rate factor must be >= 0, got {}", opts.rate_factor)));
    }
    // substeps keep the per-substep branching probability at most ½
    let rate_dt = opts.refinement * opts.rate_factor * grid.dt();
    let substeps = if opts.branching { (2.0 * rate_dt).ceil().max(1.0) as usize } else { 1 };
    let dt = grid.dt() / substeps as f64;
    let p_event = rate_dt / substeps as f64;
    let mass = epsilon / opts.refinement;
    let count = (mu0.total_mass() / mass).round();
    if count > opts.particle_cap as f64 {
        return Err(Error::Resource(format!(
            "{count} initial particles exceed the cap {}",
            opts.particle_cap
        )));
    }
    let mut rng = stream.aux_rng(SBM_CHANNEL);
    let mut xs = sample_positions(mu0, count as usize, opts.jitter, &mut rng)?;
    let sdt = dt.sqrt();
    let mut times = vec![grid.t(0)];
    let mut steps = vec![snapshot(&xs, mass)];
    for n in 0..grid.nt {
        for _ in 0..substeps {
            brownian_move(&mut xs, sdt, &mut rng);
            if !opts.branching {
                continue;
            }
            let mut next = Vec::with_capacity(xs.len() + xs.len() / 8 + 4);
            for &x in &xs {
                if rng.random::<f64>() < p_event {
                    if rng.random::<bool>() {
                        next.push(x);
                        next.push(x);
                    }
                } else {
                    next.push(x);
                }
            }
            xs = next;
            if xs.len() > opts.particle_cap {
                return Err(Error::Resource(format!(
                    "{} particles at step {} exceed the cap {}",
                    xs.len(),
                    n + 1,
                    opts.particle_cap
                )));
            }
        }
        if recorded(n + 1, grid.nt, opts.stride) {
            times.push(grid.t(n + 1));
            steps.push(snapshot(&xs, mass));
        }
    }
    MeasurePath::from_atoms(grid, times, steps, false)
}

/// Quadratic-variation bookkeeping of one Moran run for a test function.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct QvRecord {
    /// Sum of squared changes of `⟨μ, f⟩` caused by resampling.
    pub resampling_qv: f64,
    /// `∫ (⟨μ_s, f²⟩ − ⟨μ_s, f⟩²) ds` along the run (left Riemann sum).
    pub variance_integral: f64,
}

fn moran_population(epsilon: f64, refinement: f64) -> Result<usize> {
    if !(epsilon > 0.0) {
        return Err(Error::Validation(format!("epsilon must be positive, got {epsilon}")));
    }
    let n = (refinement / epsilon).round();
    if n < 10.0 || !n.is_finite() {
        return Err(Error::Validation(format!("population {n} is below 10")));
    }
    Ok(n as usize)
}

fn run_moran(
    mu0: &Measure,
    epsilon: f64,
    stream: &NoiseStream,
    grid: &Grid,
    opts: &MoranOptions,
    qv: Option<fn(f64) -> f64>,
) -> Result<(MeasurePath, QvRecord)> {
    let n_pop = moran_population(epsilon, opts.refinement)?;
    let mut rng = stream.aux_rng(MORAN_CHANNEL);
    let mut xs = sample_positions(mu0, n_pop, opts.jitter, &mut rng)?;
    let dt = grid.dt();
    let sdt = dt.sqrt();
    let nf = n_pop as f64;
    let mass = 1.0 / nf;
    let events = Poisson::new(nf * (nf - 1.0) * epsilon / 2.0 * dt)
        .map_err(|e| Error::Validation(format!("resampling rate: {e}")))?;
    let mut times = vec![grid.t(0)];
    let mut steps = vec![snapshot(&xs, mass)];
    let mut record = QvRecord::default();
    let mut qv_terms = Vec::new();
    let mut var_terms = Vec::new();
    for n in 0..grid.nt {
        if let Some(f) = qv {
            let fx: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
            let m1 = pairwise_sum(&fx) / nf;
            let m2 = pairwise_sum(&fx.iter().map(|v| v * v).collect::<Vec<_>>()) / nf;
            var_terms.push((m2 - m1 * m1) * dt);
        }
        brownian_move(&mut xs, sdt, &mut rng);
        if opts.resampling {
            let k = events.sample(&mut rng) as usize;
            let mut delta = 0.0;
            for _ in 0..k {
                let i = rng.random_range(0..n_pop);
                let mut j = rng.random_range(0..n_pop - 1);
                if j >= i {
                    j += 1;
                }
                if let Some(f) = qv {
                    delta += (f(xs[i]) - f(xs[j])) / nf;
                }
                xs[j] = xs[i];
            }
            qv_terms.push(delta * delta);
        }
        if recorded(n + 1, grid.nt, opts.stride) {
            times.push(grid.t(n + 1));
            steps.push(snapshot(&xs, mass));
        }
    }
    if qv.is_some() {
        record.resampling_qv = pairwise_sum(&qv_terms);
        record.variance_integral = pairwise_sum(&var_terms);
    }
    Ok((MeasurePath::from_atoms(grid, times, steps, true)?, record))
}

/// Moran model approximating Fleming–Viot with
/// `⟨N(f)⟩ = ε∫(⟨μ_s, f²⟩ − ⟨μ_s, f⟩²)ds`.
pub fn simulate_fv_moran(
    mu0: &Measure,
    epsilon: f64,
    stream: &NoiseStream,
    grid: &Grid,
    opts: &MoranOptions,
) -> Result<MeasurePath> {
    run_moran(mu0, epsilon, stream, grid, opts, None).map(|(p, _)| p)
}

/// Runs the Moran model and tracks the resampling part of the quadratic
/// variation of `⟨μ, f⟩`.
pub fn moran_qv(
    mu0: &Measure,
    epsilon: f64,
    stream: &NoiseStream,
    grid: &Grid,
    opts: &MoranOptions,
    f: fn(f64) -> f64,
) -> Result<QvRecord> {
    run_moran(mu0, epsilon, stream, grid, opts, Some(f)).map(|(_, q)| q)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Anchor {
    /// `u(y) = μ((0, y])` for `y ≥ 0` and `−μ((y, 0])` below.
    Zero,
    /// `u(y) = μ((−∞, y])`.
    MinusInfinity,
}

/// Anchored cumulative sums of the atoms evaluated at the grid points.
pub fn empirical_cdf_field(path: &MeasurePath, anchor: Anchor) -> Result<PathField> {
    path.validate()?;
    let ys = path.grid.ys();
    let mut slices = Vec::with_capacity(path.len());
    for (s, &t) in path.times.iter().enumerate() {
        let m = path.at(s);
        let mut order: Vec<usize> = (0..m.positions.len()).collect();
        order.sort_by(|&a, &b| m.positions[a].total_cmp(&m.positions[b]));
        let xs: Vec<f64> = order.iter().map(|&i| m.positions[i]).collect();
        let mut cum = Vec::with_capacity(xs.len() + 1);
        cum.push(0.0);
        for &i in &order {
            let last = *cum.last().expect("nonempty");
            cum.push(last + m.masses[i]);
        }
        let cdf = |y: f64| cum[xs.partition_point(|&x| x <= y)];
        let base = match anchor {
            Anchor::Zero => cdf(0.0),
            Anchor::MinusInfinity => 0.0,
        };
        slices.push(Field::new(t, ys.iter().map(|&y| cdf(y) - base).collect()));
    }
    Ok(PathField {
        grid: path.grid.clone(),
        slices,
        projection_l1: 0.0,
    })
}
