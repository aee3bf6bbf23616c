//! Density form of the rate functional and Cameron–Martin diagnostics.
//!
//! For a path of densities `w_t(y)` the drift relative to the heat flow is
//! `ẇ − ½w″`, and its Radon–Nikodym derivative against `w` is `ψ`. The rate is
//! `½ ∫∫ ψ² w dy dt`. Where `w` falls below a floor, the floor is used in both
//! the quotient and the weight, and the share of such cells is reported.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{pairwise_sum, BoundaryCondition};
use crate::metrics::{test_function, weak_metric, Measure, MeasurePath, MeasureRepr, DICTIONARY_LEN};

pub const DEFAULT_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Default, Serialize)]
pub struct RateReport {
    /// `½∬|h|²` of the control that produced the path, when known.
    pub i_energy: Option<f64>,
    pub i_density: f64,
    /// `ψ[step][i]` at the density points.
    pub psi_field: Vec<Vec<f64>>,
    pub cm_flags: Option<CmDiagnostics>,
    /// Fraction of (t, y) cells where the floor was active.
    pub floor_mass: f64,
    /// `⟨μ_t, ψ_t⟩` per step; filled for probability paths only.
    pub centering_residual: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CmDiagnostics {
    /// Weak distance between `μ_0` and the reference `ν`.
    pub initial_distance: f64,
    pub initial_matches: bool,
    /// Discrete total variation of `t ↦ ⟨μ_t, f⟩` for each dictionary function.
    pub total_variation: Vec<f64>,
    /// Steps `n` whose increment `n → n+1` looks like a jump.
    pub jump_steps: Vec<usize>,
    /// `(step, point)` where `w` is at the floor but `ẇ − ½w″` is not small.
    pub degenerate_points: Vec<(usize, usize)>,
    /// `∫∫ ψ² w dy dt`.
    pub psi_norm_sq: f64,
    pub psi_norm_finite: bool,
}

impl CmDiagnostics {
    pub fn all_pass(&self) -> bool {
        self.initial_matches && self.jump_steps.is_empty() && self.degenerate_points.is_empty() && self.psi_norm_finite
    }
}

struct Drift {
    /// `ẇ − ½w″` at every (step, point).
    r: Vec<Vec<f64>>,
    dx: f64,
}

fn density_rows(path: &MeasurePath) -> Result<(&[f64], f64, &[Vec<f64>])> {
    match &path.repr {
        MeasureRepr::Density { ys, dx, w } => Ok((ys, *dx, w)),
        MeasureRepr::Atoms(_) => Err(Error::Input("density form needs a density path".into())),
    }
}

fn drift(path: &MeasurePath) -> Result<Drift> {
    path.validate()?;
    let (_, dx, w) = density_rows(path)?;
    let ns = w.len();
    if ns < 2 {
        return Err(Error::Input("need at least two time slices".into()));
    }
    let times = &path.times;
    // ghost densities of the scheme: a reflected `u` (zero flux) makes `w`
    // odd across the wall, a pinned `u` makes it even
    let sign = if path.grid.bc == BoundaryCondition::DirichletPinned { 1.0 } else { -1.0 };
    let mut r = Vec::with_capacity(ns);
    for n in 0..ns {
        let (a, b) = if n == 0 {
            (0, 1)
        } else if n == ns - 1 {
            (ns - 2, ns - 1)
        } else {
            (n - 1, n + 1)
        };
        let span = times[b] - times[a];
        let row = &w[n];
        let m = row.len();
        let ghost = |i: isize| -> f64 {
            if i < 0 {
                sign * row[0]
            } else if i as usize >= m {
                sign * row[m - 1]
            } else {
                row[i as usize]
            }
        };
        r.push(
            (0..m)
                .map(|i| {
                    let wt = (w[b][i] - w[a][i]) / span;
                    let lap = (ghost(i as isize - 1) - 2.0 * row[i] + ghost(i as isize + 1)) / (dx * dx);
                    wt - 0.5 * lap
                })
                .collect(),
        );
    }
    Ok(Drift { r, dx })
}

fn time_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    (0..n)
        .map(|i| {
            let left = if i > 0 { times[i] - times[i - 1] } else { 0.0 };
            let right = if i + 1 < n { times[i + 1] - times[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// Density-form rate `½ ∫∫ ψ² w dy dt` with `ψ = (ẇ − ½w″)/max(w, floor)`.
pub fn rate_density(path: &MeasurePath, floor: f64) -> Result<RateReport> {
    if !(floor > 0.0) {
        return Err(Error::Input(format!("density floor must be positive, got {floor}")));
    }
    let d = drift(path)?;
    let (_, _, w) = density_rows(path)?;
    let tw = time_weights(&path.times);
    let mut floored = 0usize;
    let mut cells = 0usize;
    let mut psi_field = Vec::with_capacity(w.len());
    let mut per_step = Vec::with_capacity(w.len());
    let mut centering = Vec::new();
    for (n, (row, rrow)) in w.iter().zip(&d.r).enumerate() {
        let mut psi = Vec::with_capacity(row.len());
        let mut terms = Vec::with_capacity(row.len());
        let mut pair = Vec::with_capacity(row.len());
        for (&wi, &ri) in row.iter().zip(rrow) {
            cells += 1;
            let wf = if wi < floor {
                floored += 1;
                floor
            } else {
                wi
            };
            let p = ri / wf;
            psi.push(p);
            terms.push(p * p * wf);
            pair.push(p * wi);
        }
        per_step.push(pairwise_sum(&terms) * d.dx * tw[n]);
        if path.probability {
            centering.push(pairwise_sum(&pair) * d.dx);
        }
        psi_field.push(psi);
    }
    Ok(RateReport {
        i_energy: None,
        i_density: 0.5 * pairwise_sum(&per_step),
        psi_field,
        cm_flags: None,
        floor_mass: floored as f64 / cells as f64,
        centering_residual: centering,
    })
}

/// Thresholds for [`cameron_martin_check`].
#[derive(Clone, Copy, Debug)]
pub struct CmOptions {
    pub floor: f64,
    /// Weak distance below which `μ_0 = ν` is accepted.
    pub initial_tol: f64,
    /// An increment is a jump when it exceeds this multiple of the median
    /// increment of the same test function.
    pub jump_ratio: f64,
    /// Jumps must also exceed this fraction of `max_t |⟨μ_t, f⟩|`.
    pub jump_rel: f64,
    /// `|ẇ − ½w″|` above this where `w` is floored is a degeneracy witness.
    pub degenerate_tol: f64,
    pub beta: f64,
}

impl Default for CmOptions {
    fn default() -> Self {
        CmOptions {
            floor: DEFAULT_FLOOR,
            initial_tol: 1e-6,
            jump_ratio: 50.0,
            jump_rel: 1e-6,
            degenerate_tol: 1e-4,
            beta: 1.0,
        }
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Diagnostics for the four Cameron–Martin conditions. Condition 2 is
/// checked through a total-variation and jump proxy only.
pub fn cameron_martin_check(path: &MeasurePath, nu: &Measure, opts: &CmOptions) -> Result<CmDiagnostics> {
    let d = drift(path)?;
    let (_, _, w) = density_rows(path)?;
    let steps: Vec<Measure> = (0..path.len()).map(|s| path.at(s)).collect();

    let initial_distance = weak_metric(&steps[0], nu, opts.beta);

    let mut total_variation = Vec::with_capacity(DICTIONARY_LEN);
    let mut jump_steps = Vec::new();
    for k in 0..DICTIONARY_LEN {
        let series: Vec<f64> = steps.iter().map(|m| m.integrate(|x| test_function(k, x))).collect();
        let inc: Vec<f64> = series.windows(2).map(|p| (p[1] - p[0]).abs()).collect();
        total_variation.push(pairwise_sum(&inc));
        let med = median(&inc);
        let scale = series.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (n, &v) in inc.iter().enumerate() {
            if v > opts.jump_rel * scale && v > opts.jump_ratio * med {
                jump_steps.push(n);
            }
        }
    }
    jump_steps.sort_unstable();
    jump_steps.dedup();

    let mut degenerate_points = Vec::new();
    for (n, (row, rrow)) in w.iter().zip(&d.r).enumerate() {
        for (i, (&wi, &ri)) in row.iter().zip(rrow).enumerate() {
            if wi < opts.floor && ri.abs() > opts.degenerate_tol {
                degenerate_points.push((n, i));
            }
        }
    }
    let rate = rate_density(path, opts.floor)?;
    let psi_norm_sq = 2.0 * rate.i_density;
    Ok(CmDiagnostics {
        initial_distance,
        initial_matches: initial_distance <= opts.initial_tol,
        total_variation,
        jump_steps,
        degenerate_points,
        psi_norm_sq,
        psi_norm_finite: psi_norm_sq.is_finite(),
    })
}
