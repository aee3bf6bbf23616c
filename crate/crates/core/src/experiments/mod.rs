//! Monte Carlo campaigns around the small-noise limit: deviation scaling,
//! empirical exponents, the variational bracket, moment regressions and
//! particle cross-checks.
//!
//! Realizations run in parallel. Realization `r` always uses noise stream
//! `(root_seed, r)`, so the same noise drives every `ε` of a ladder and
//! results do not depend on the thread count.

pub mod config;
pub mod stats;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use config::{Deviation, ExperimentConfig, GridConfig, ModelChoice, ModelConfig, NoiseConfig, RunConfig};
use stats::{loglog_fit, wilson_interval, LinearFit};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::metrics::{metric_d, psi_map, test_function, weak_metric, xi_map, Measure, MetricParams, DICTIONARY_LEN};
use crate::models::{ModelKind, ModelSpec};
use crate::noise::{mix_seed, NoiseStream};
use crate::optimize::{minimize_rate, terminal_mean, OptimizeOptions, TerminalEvent};
use crate::particles::{simulate_fv_moran, simulate_sbm_particles, MoranOptions, SbmOptions};
use crate::solver::{deterministic_limit, run_scheme};

/// Realizations handled per parallel batch in the exponent scans.
const BATCH: usize = 1 << 16;

/// Measure associated with a field: Stieltjes measure for super-Brownian
/// motion, probability measure for Fleming–Viot.
pub fn measure_of(kind: &ModelKind, grid: &Grid, u: &[f64]) -> Result<Measure> {
    let f = Field::new(0.0, u.to_vec());
    match kind {
        ModelKind::Sbm => xi_map(grid, &f),
        ModelKind::Fvp => psi_map(grid, &f),
        ModelKind::Custom(c) => Err(Error::Input(format!("model `{}` has no associated measure", c.name))),
    }
}

/// The noiseless path and everything a deviation functional compares to.
pub struct Baseline {
    pub model: ModelSpec,
    pub grid: Grid,
    pub slices: Vec<Vec<f64>>,
    weights: Vec<f64>,
    measures: Option<Vec<Measure>>,
    deviation: Deviation,
    beta: f64,
    metric: MetricParams,
}

impl Baseline {
    pub fn new(model: &ModelSpec, grid: &Grid, deviation: Deviation, beta: f64, metric: MetricParams) -> Result<Self> {
        let u0 = deterministic_limit(&model.with_epsilon(0.0), grid)?;
        let slices: Vec<Vec<f64>> = u0.slices.into_iter().map(|f| f.values).collect();
        let measures = if deviation == Deviation::WeakMetric {
            Some(slices.iter().map(|u| measure_of(&model.kind, grid, u)).collect::<Result<_>>()?)
        } else {
            None
        };
        if deviation == Deviation::TerminalMeanShift && !model.kind.is_distribution() {
            return Err(Error::Input("terminal mean shift needs a distribution-valued model".into()));
        }
        Ok(Baseline {
            model: model.clone(),
            grid: grid.clone(),
            weights: grid.ys().iter().map(|y| (-beta * y.abs()).exp()).collect(),
            slices,
            measures,
            deviation,
            beta,
            metric,
        })
    }

    fn slice_deviation(&self, n: usize, u: &[f64]) -> Result<f64> {
        let u0 = &self.slices[n];
        Ok(match self.deviation {
            Deviation::WeightedSup => u
                .iter()
                .zip(u0)
                .zip(&self.weights)
                .map(|((a, b), w)| w * (a - b).abs())
                .fold(0.0, f64::max),
            Deviation::MetricD => metric_d(
                &self.grid,
                &Field::new(0.0, u.to_vec()),
                &Field::new(0.0, u0.clone()),
                &self.metric,
            )?,
            Deviation::WeakMetric => {
                let mu = measure_of(&self.model.kind, &self.grid, u)?;
                weak_metric(&mu, &self.measures.as_ref().expect("built for weak metric")[n], self.beta)
            }
            Deviation::TerminalMeanShift => {
                if n == self.grid.nt {
                    terminal_mean(&self.grid, u) - terminal_mean(&self.grid, u0)
                } else {
                    f64::NEG_INFINITY
                }
            }
        })
    }

    /// Deviation of one realization at noise level `ε` from the baseline.
    pub fn deviation(&self, epsilon: f64, stream: &NoiseStream) -> Result<f64> {
        let model = self.model.with_epsilon(epsilon);
        let mut dev = f64::NEG_INFINITY;
        run_scheme(&model, &self.grid, epsilon.sqrt(), None, Some(stream), |n, u| {
            dev = dev.max(self.slice_deviation(n, u)?);
            Ok(())
        })?;
        Ok(dev)
    }
}

fn baseline(cfg: &RunConfig, deviation: Deviation) -> Result<Baseline> {
    Baseline::new(
        &cfg.model_spec()?,
        &cfg.grid()?,
        deviation,
        cfg.experiment.beta,
        cfg.experiment.metric,
    )
}

fn deviations(base: &Baseline, epsilon: f64, root_seed: u64, range: std::ops::Range<u64>) -> Result<Vec<f64>> {
    range
        .into_par_iter()
        .map(|r| base.deviation(epsilon, &NoiseStream::new(root_seed, r)))
        .collect()
}

fn write_header<W: Write>(w: &mut W, hash: &str, seed: u64) -> std::io::Result<()> {
    writeln!(w, "# config_hash={hash}")?;
    writeln!(w, "# root_seed={seed}")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub epsilon: f64,
    pub realizations: usize,
    pub mean_dev_sq: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub config_hash: String,
    pub root_seed: u64,
    pub rows: Vec<ConvergenceRow>,
    /// `log E[dev²]` against `log ε` over the rows with `ε > 0`.
    pub fit: Option<LinearFit>,
}

impl ConvergenceTable {
    /// Columns `epsilon,realizations,mean_dev_sq,std_error`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write_header(&mut w, &self.config_hash, self.root_seed)?;
        writeln!(w, "epsilon,realizations,mean_dev_sq,std_error")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.epsilon, r.realizations, r.mean_dev_sq, r.std_error)?;
        }
        Ok(())
    }
}

/// Mean squared deviation from `u⁰` along the `ε` ladder.
pub fn run_convergence_scan(cfg: &RunConfig) -> Result<ConvergenceTable> {
    cfg.validate()?;
    let base = baseline(cfg, cfg.experiment.deviation)?;
    let reps = cfg.noise.realizations;
    let mut rows = Vec::new();
    for &eps in &cfg.experiment.epsilons {
        let sq: Vec<f64> = if eps == 0.0 {
            vec![0.0; reps]
        } else {
            deviations(&base, eps, cfg.noise.root_seed, 0..reps as u64)?
                .into_iter()
                .map(|d| d * d)
                .collect()
        };
        rows.push(ConvergenceRow {
            epsilon: eps,
            realizations: reps,
            mean_dev_sq: stats::mean(&sq),
            std_error: if reps > 1 { stats::std_error(&sq) } else { f64::NAN },
        });
    }
    let pos: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.epsilon > 0.0 && r.mean_dev_sq > 0.0).collect();
    let fit = if pos.len() >= 2 {
        let x: Vec<f64> = pos.iter().map(|r| r.epsilon).collect();
        let y: Vec<f64> = pos.iter().map(|r| r.mean_dev_sq).collect();
        Some(loglog_fit(&x, &y)?)
    } else {
        None
    };
    Ok(ConvergenceTable {
        config_hash: cfg.hash(),
        root_seed: cfg.noise.root_seed,
        rows,
        fit,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LdpRow {
    pub epsilon: f64,
    pub delta: f64,
    pub realizations: usize,
    pub hits: usize,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `−ε log P̂`, present only when there are enough hits.
    pub exponent: Option<f64>,
}

impl LdpRow {
    pub fn feasible(&self) -> bool {
        self.exponent.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stabilization {
    pub delta: f64,
    /// `(max − min)/mean` of the exponents at the three smallest `ε`;
    /// absent when any of those rows is infeasible.
    pub relative_spread: Option<f64>,
    pub stable: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LdpTable {
    pub config_hash: String,
    pub root_seed: u64,
    pub rows: Vec<LdpRow>,
    pub stabilization: Vec<Stabilization>,
}

impl LdpTable {
    /// Columns `epsilon,delta,realizations,hits,p_hat,ci_low,ci_high,exponent`;
    /// the exponent is empty for infeasible rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write_header(&mut w, &self.config_hash, self.root_seed)?;
        writeln!(w, "epsilon,delta,realizations,hits,p_hat,ci_low,ci_high,exponent")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.epsilon,
                r.delta,
                r.realizations,
                r.hits,
                r.p_hat,
                r.ci_low,
                r.ci_high,
                opt(r.exponent)
            )?;
        }
        Ok(())
    }

    pub fn row(&self, epsilon: f64, delta: f64) -> Option<&LdpRow> {
        self.rows.iter().find(|r| r.epsilon == epsilon && r.delta == delta)
    }
}

fn ldp_table(cfg: &RunConfig, base: &Baseline) -> Result<LdpTable> {
    let exp = &cfg.experiment;
    let reps = cfg.noise.realizations;
    let mut rows = Vec::new();
    for &eps in &exp.epsilons {
        let mut hits = vec![0usize; exp.deltas.len()];
        let mut start = 0usize;
        while start < reps {
            let end = (start + BATCH).min(reps);
            let devs = if eps == 0.0 {
                vec![base.deviation(0.0, &NoiseStream::new(cfg.noise.root_seed, 0))?; end - start]
            } else {
                deviations(base, eps, cfg.noise.root_seed, start as u64..end as u64)?
            };
            for (h, &d) in hits.iter_mut().zip(&exp.deltas) {
                *h += devs.iter().filter(|&&v| v >= d).count();
            }
            start = end;
        }
        for (&delta, &h) in exp.deltas.iter().zip(&hits) {
            let p = h as f64 / reps as f64;
            let (lo, hi) = wilson_interval(h, reps, 1.96);
            let exponent = (h >= exp.min_hits.max(1)).then(|| if h == reps { 0.0 } else { -eps * p.ln() });
            rows.push(LdpRow {
                epsilon: eps,
                delta,
                realizations: reps,
                hits: h,
                p_hat: p,
                ci_low: lo,
                ci_high: hi,
                exponent,
            });
        }
    }
    let mut ladder: Vec<f64> = exp.epsilons.iter().copied().filter(|e| *e > 0.0).collect();
    ladder.sort_by(|a, b| b.total_cmp(a));
    let stabilization = exp
        .deltas
        .iter()
        .map(|&delta| {
            let tail = &ladder[ladder.len().saturating_sub(3)..];
            let vals: Option<Vec<f64>> = if tail.len() == 3 {
                tail.iter()
                    .map(|&e| rows.iter().find(|r| r.epsilon == e && r.delta == delta).and_then(|r| r.exponent))
                    .collect()
            } else {
                None
            };
            let spread = vals.and_then(|v| {
                let m = stats::mean(&v);
                let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
                (m > 0.0).then(|| (hi - lo) / m)
            });
            Stabilization {
                delta,
                relative_spread: spread,
                stable: spread.map(|s| s <= exp.stabilization_tol),
            }
        })
        .collect();
    Ok(LdpTable {
        config_hash: cfg.hash(),
        root_seed: cfg.noise.root_seed,
        rows,
        stabilization,
    })
}

/// Crude Monte Carlo estimates of `P(deviation ≥ δ)` and `−ε log P̂` on the
/// `(ε, δ)` grid.
pub fn run_ldp_scan(cfg: &RunConfig) -> Result<LdpTable> {
    cfg.validate()?;
    let base = baseline(cfg, cfg.experiment.deviation)?;
    ldp_table(cfg, &base)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BracketReport {
    pub delta: f64,
    /// Smallest `ε` whose row is feasible.
    pub epsilon: Option<f64>,
    pub mc_exponent: Option<f64>,
    /// Energy of the optimized control.
    pub i_star: f64,
    pub residual_violation: f64,
    pub optimizer_converged: bool,
    /// `mc_exponent / i_star`.
    pub ratio: Option<f64>,
    /// Only the variational side is available.
    pub one_sided: bool,
    pub pass: bool,
}

/// Compares the Monte Carlo exponent of `{terminal mean shift ≥ δ}` with
/// the energy of the cheapest control reaching the same event, for every
/// `δ` of the config. The scan always uses the terminal-mean-shift
/// deviation.
pub fn variational_bracket(cfg: &RunConfig) -> Result<(LdpTable, Vec<BracketReport>)> {
    cfg.validate()?;
    let base = baseline(cfg, Deviation::TerminalMeanShift)?;
    let table = ldp_table(cfg, &base)?;
    let m0 = terminal_mean(&base.grid, &base.slices[base.grid.nt]);
    let model = base.model.clone();
    let opts = OptimizeOptions {
        penalty_weights: cfg.experiment.penalty_weights.clone(),
        max_iter: cfg.experiment.max_iter,
        floor: cfg.experiment.floor,
        ..OptimizeOptions::default()
    };
    let mut reports = Vec::new();
    for &delta in &cfg.experiment.deltas {
        let event = TerminalEvent::MeanAtLeast { target: m0 + delta };
        let res = minimize_rate(&model, &base.grid, &event, &opts, None)?;
        let i_star = res.objective.energy;
        let best = table
            .rows
            .iter()
            .filter(|r| r.delta == delta && r.epsilon > 0.0 && r.feasible())
            .min_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
        let (epsilon, mc) = match best {
            Some(r) => (Some(r.epsilon), r.exponent),
            None => (None, None),
        };
        let pass = match mc {
            Some(mc) => mc <= 1.25 * i_star && i_star <= 2.0 * mc + 0.05,
            None => false,
        };
        reports.push(BracketReport {
            delta,
            epsilon,
            mc_exponent: mc,
            i_star,
            residual_violation: res.objective.violation,
            optimizer_converged: res.converged,
            ratio: mc.map(|m| m / i_star),
            one_sided: mc.is_none(),
            pass,
        });
    }
    Ok((table, reports))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairRow {
    pub t1: f64,
    pub y1: f64,
    pub t2: f64,
    pub y2: f64,
    pub distance: f64,
    pub moment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KolmogorovReport {
    pub config_hash: String,
    pub root_seed: u64,
    pub order: u32,
    pub epsilon: f64,
    pub realizations: usize,
    pub pairs: Vec<PairRow>,
    pub fit: LinearFit,
    /// Fitted `2 + q`.
    pub exponent: f64,
    pub q_hat: f64,
    pub q_ci: (f64, f64),
    pub r2: f64,
}

impl KolmogorovReport {
    /// Columns `t1,y1,t2,y2,distance,moment`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write_header(&mut w, &self.config_hash, self.root_seed)?;
        writeln!(w, "t1,y1,t2,y2,distance,moment")?;
        for p in &self.pairs {
            writeln!(w, "{},{},{},{},{},{}", p.t1, p.y1, p.t2, p.y2, p.distance, p.moment)?;
        }
        Ok(())
    }
}

/// Grid index pairs `((n₁, i₁), (n₂, i₂))`: base points with
/// `t ∈ [T/4, 3T/4]`, `y ∈ [0, 1]`, log-uniform distances in
/// `[2·dt, T/2]` split at random between time and space.
fn sample_pairs(grid: &Grid, count: usize, seed: u64) -> Vec<((usize, usize), (usize, usize))> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dt, dx) = (grid.dt(), grid.dx());
    let i_of = |y: f64| ((y + grid.half_width) / dx).round() as i64;
    let (r_lo, r_hi) = ((2.0 * dt).ln(), (0.5 * grid.horizon).ln());
    let mut out = Vec::with_capacity(count);
    let mut guard = 0;
    while out.len() < count && guard < 100 * count {
        guard += 1;
        let n1 = ((0.25 + 0.5 * rng.random::<f64>()) * grid.horizon / dt).round() as i64;
        let i1 = i_of(rng.random::<f64>());
        let r = (r_lo + (r_hi - r_lo) * rng.random::<f64>()).exp();
        let share: f64 = rng.random();
        let sign = if rng.random::<bool>() { 1 } else { -1 };
        let di = sign * (share * r / dx).round() as i64;
        let dn = ((1.0 - share) * r / dt).round() as i64;
        let (n2, i2) = (n1 + dn, i1 + di);
        if (dn == 0 && di == 0) || n2 > grid.nt as i64 || i2 < 0 || i2 >= grid.ny as i64 || i1 < 0 || i1 >= grid.ny as i64 {
            continue;
        }
        out.push(((n1 as usize, i1 as usize), (n2 as usize, i2 as usize)));
    }
    out
}

/// Regresses weighted `n`-th moments of increments on the parabolic-free
/// distance `|Δy| + |Δt|`.
pub fn kolmogorov_fit(cfg: &RunConfig) -> Result<KolmogorovReport> {
    cfg.validate()?;
    let model = cfg.model_spec()?;
    let grid = cfg.grid()?;
    let exp = &cfg.experiment;
    let order = exp.moment_order;
    let pairs = sample_pairs(&grid, exp.pair_count, mix_seed(cfg.noise.root_seed, u64::MAX));
    if pairs.len() < 3 {
        return Err(Error::Input("could not place enough point pairs on the grid".into()));
    }
    let mut wanted: Vec<usize> = pairs.iter().flat_map(|(a, b)| [a.0, b.0]).collect();
    wanted.sort_unstable();
    wanted.dedup();
    let theta = model.epsilon.sqrt();
    let reps = cfg.noise.realizations;
    let powers: Vec<Vec<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let stream = NoiseStream::new(cfg.noise.root_seed, r);
            let mut kept: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            run_scheme(&model, &grid, theta, None, Some(&stream), |n, u| {
                if wanted.binary_search(&n).is_ok() {
                    kept.insert(n, u.to_vec());
                }
                Ok(())
            })?;
            Ok(pairs
                .iter()
                .map(|&((n1, i1), (n2, i2))| (kept[&n1][i1] - kept[&n2][i2]).abs().powi(order as i32))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(pairs.len());
    for (k, &((n1, i1), (n2, i2))) in pairs.iter().enumerate() {
        let col: Vec<f64> = powers.iter().map(|p| p[k]).collect();
        let (y1, y2) = (grid.y(i1), grid.y(i2));
        let (t1, t2) = (grid.t(n1), grid.t(n2));
        rows.push(PairRow {
            t1,
            y1,
            t2,
            y2,
            distance: (y1 - y2).abs() + (t1 - t2).abs(),
            moment: stats::mean(&col),
        });
    }
    // pairs with a vanishing moment (possible only without noise) carry no
    // scaling information and are left out of the fit
    let used: Vec<&PairRow> = rows.iter().filter(|p| p.moment > 0.0).collect();
    if used.len() < 3 {
        return Err(Error::Input("fewer than three pairs have a positive moment".into()));
    }
    let x: Vec<f64> = used.iter().map(|p| p.distance).collect();
    let y: Vec<f64> = used
        .iter()
        .map(|p| p.moment * (-(order as f64) * exp.metric.beta1 * p.y1.abs().max(p.y2.abs())).exp())
        .collect();
    if x.iter().all(|d| (d - x[0]).abs() <= 1e-12 * x[0]) {
        return Err(Error::Input("all sampled pairs are at the same distance".into()));
    }
    let fit = loglog_fit(&x, &y)?;
    let (lo, hi) = fit.slope_ci();
    Ok(KolmogorovReport {
        config_hash: cfg.hash(),
        root_seed: cfg.noise.root_seed,
        order,
        epsilon: model.epsilon,
        realizations: reps,
        pairs: rows,
        exponent: fit.slope,
        q_hat: fit.slope - 2.0,
        q_ci: (lo - 2.0, hi - 2.0),
        r2: fit.r2,
        fit,
    })
}

/// `⟨μ_t, f_k⟩` per comparison time, dictionary function and realization.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSamples {
    pub times: Vec<f64>,
    /// Indexed `[time][function][realization]`.
    pub values: Vec<Vec<Vec<f64>>>,
}

fn comparison_steps(grid: &Grid, times: &[f64]) -> Result<Vec<usize>> {
    times
        .iter()
        .map(|&t| {
            let n = (t / grid.dt()).round();
            if !(0.0..=grid.nt as f64).contains(&n) || (n * grid.dt() - t).abs() > 1e-9 * grid.horizon.max(1.0) {
                Err(Error::Input(format!("comparison time {t} is not a grid time")))
            } else {
                Ok(n as usize)
            }
        })
        .collect()
}

fn dictionary_values(mu: &Measure) -> Vec<f64> {
    (0..DICTIONARY_LEN).map(|k| mu.integrate(|x| test_function(k, x))).collect()
}

fn regroup(per_rep: Vec<Vec<Vec<f64>>>, times: Vec<f64>) -> MomentSamples {
    let values = (0..times.len())
        .map(|s| (0..DICTIONARY_LEN).map(|k| per_rep.iter().map(|r| r[s][k]).collect()).collect())
        .collect();
    MomentSamples { times, values }
}

/// Dictionary integrals of the measures attached to SPDE realizations.
pub fn spde_moment_samples(cfg: &RunConfig) -> Result<MomentSamples> {
    let model = cfg.model_spec()?;
    let grid = cfg.grid()?;
    let steps = comparison_steps(&grid, &cfg.experiment.times)?;
    let theta = model.epsilon.sqrt();
    let per_rep: Vec<Vec<Vec<f64>>> = (0..cfg.noise.realizations as u64)
        .into_par_iter()
        .map(|r| {
            let stream = NoiseStream::new(cfg.noise.root_seed, r);
            let mut out = vec![Vec::new(); steps.len()];
            run_scheme(&model, &grid, theta, None, Some(&stream), |n, u| {
                for (o, _) in out.iter_mut().zip(&steps).filter(|(_, &s)| s == n) {
                    *o = dictionary_values(&measure_of(&model.kind, &grid, u)?);
                }
                Ok(())
            })?;
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(regroup(per_rep, cfg.experiment.times.clone()))
}

/// Dictionary integrals of the matching particle system, started from
/// (jittered) samples of the measure attached to `F`.
pub fn particle_moment_samples(cfg: &RunConfig) -> Result<MomentSamples> {
    let model = cfg.model_spec()?;
    let grid = cfg.grid()?;
    let steps = comparison_steps(&grid, &cfg.experiment.times)?;
    let u0 = crate::models::initial_field(&model, &grid)?;
    let mu0 = measure_of(&model.kind, &grid, &u0.values)?;
    let eps = model.epsilon;
    let exp = &cfg.experiment;
    let per_rep: Vec<Vec<Vec<f64>>> = (0..cfg.noise.realizations as u64)
        .into_par_iter()
        .map(|r| {
            let stream = NoiseStream::new(cfg.noise.root_seed, r);
            let path = match model.kind {
                ModelKind::Sbm => simulate_sbm_particles(
                    &mu0,
                    eps,
                    &stream,
                    &grid,
                    &SbmOptions {
                        refinement: exp.refinement,
                        rate_factor: exp.rate_factor,
                        jitter: grid.dx(),
                        ..SbmOptions::default()
                    },
                )?,
                ModelKind::Fvp => simulate_fv_moran(
                    &mu0,
                    eps,
                    &stream,
                    &grid,
                    &MoranOptions {
                        refinement: exp.refinement,
                        jitter: grid.dx(),
                        ..MoranOptions::default()
                    },
                )?,
                ModelKind::Custom(ref c) => {
                    return Err(Error::Input(format!("model `{}` has no particle system", c.name)))
                }
            };
            Ok(steps.iter().map(|&s| dictionary_values(&path.at(s))).collect())
        })
        .collect::<Result<_>>()?;
    Ok(regroup(per_rep, cfg.experiment.times.clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZRow {
    pub time: f64,
    pub function: usize,
    /// `"mean"` or `"variance"`.
    pub statistic: &'static str,
    pub first: f64,
    pub second: f64,
    pub combined_se: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub config_hash: String,
    pub root_seed: u64,
    pub epsilon: f64,
    pub rows: Vec<ZRow>,
    pub max_abs_z: f64,
    pub z_max: f64,
    pub pass: bool,
}

impl ComparisonReport {
    /// Columns `time,function,statistic,first,second,combined_se,z`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write_header(&mut w, &self.config_hash, self.root_seed)?;
        writeln!(w, "time,function,statistic,first,second,combined_se,z")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.time, r.function, r.statistic, r.first, r.second, r.combined_se, r.z
            )?;
        }
        Ok(())
    }
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Two-sample z-scores of means and variances for every time and function.
pub fn compare_samples(a: &MomentSamples, b: &MomentSamples, z_max: f64) -> Result<Vec<ZRow>> {
    if a.times != b.times {
        return Err(Error::Input("sample sets use different times".into()));
    }
    let mut rows = Vec::new();
    for (s, &t) in a.times.iter().enumerate() {
        for k in 0..DICTIONARY_LEN {
            let (xa, xb) = (&a.values[s][k], &b.values[s][k]);
            let (ma, mb) = (stats::mean(xa), stats::mean(xb));
            // quantities conserved by both systems (the mass of a probability
            // measure) carry only roundoff, which says nothing statistically
            let tiny = 1e-10 * (1.0 + ma.abs().max(mb.abs()));
            if stats::variance(xa).sqrt() <= tiny && stats::variance(xb).sqrt() <= tiny {
                let z = if (ma - mb).abs() <= tiny { 0.0 } else { (ma - mb).signum() * f64::INFINITY };
                for (statistic, first, second, z) in [("mean", ma, mb, z), ("variance", 0.0, 0.0, 0.0)] {
                    rows.push(ZRow {
                        time: t,
                        function: k,
                        statistic,
                        first,
                        second,
                        combined_se: 0.0,
                        z,
                    });
                }
                continue;
            }
            let se = (stats::std_error(xa).powi(2) + stats::std_error(xb).powi(2)).sqrt();
            rows.push(ZRow {
                time: t,
                function: k,
                statistic: "mean",
                first: ma,
                second: mb,
                combined_se: se,
                z: z_score(ma - mb, se),
            });
            let (va, vb) = (stats::variance(xa), stats::variance(xb));
            let se = (stats::variance_std_error(xa).powi(2) + stats::variance_std_error(xb).powi(2)).sqrt();
            rows.push(ZRow {
                time: t,
                function: k,
                statistic: "variance",
                first: va,
                second: vb,
                combined_se: se,
                z: z_score(va - vb, se),
            });
        }
    }
    let _ = z_max;
    Ok(rows)
}

fn report(cfg: &RunConfig, rows: Vec<ZRow>) -> ComparisonReport {
    let max_abs_z = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    let z_max = cfg.experiment.z_max;
    ComparisonReport {
        config_hash: cfg.hash(),
        root_seed: cfg.noise.root_seed,
        epsilon: cfg.model.epsilon,
        rows,
        max_abs_z,
        z_max,
        pass: max_abs_z <= z_max,
    }
}

/// Particle system against SPDE realizations for the configured model,
/// noise level and times.
pub fn compare_particles_spde(cfg: &RunConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    let spde = spde_moment_samples(cfg)?;
    let part = particle_moment_samples(cfg)?;
    Ok(report(cfg, compare_samples(&part, &spde, cfg.experiment.z_max)?))
}

/// SPDE against itself under the same seeds; every score is zero.
pub fn compare_spde_spde(cfg: &RunConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    let a = spde_moment_samples(cfg)?;
    let b = spde_moment_samples(cfg)?;
    Ok(report(cfg, compare_samples(&a, &b, cfg.experiment.z_max)?))
}

/// Machine-readable record of one run.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub command: String,
    pub root_seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    /// Output file name to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub results: serde_json::Value,
}

impl RunSummary {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        RunSummary {
            command: command.to_string(),
            root_seed: cfg.noise.root_seed,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            outputs: BTreeMap::new(),
            wall_time_s: 0.0,
            results: serde_json::Value::Null,
        }
    }

    /// Writes `bytes` to `dir/name` and records its hash.
    pub fn add_output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), bytes)?;
        self.outputs.insert(name.to_string(), config::hex_digest(bytes));
        Ok(())
    }

    /// Writes `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Input(e.to_string()))?;
        std::fs::write(dir.join("summary.json"), text)?;
        Ok(())
    }
}
