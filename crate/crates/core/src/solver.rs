//! Lie-splitting scheme for
//! `du = ½Δu dt + θ ∫ G(a,y,u) W(dt da) + ∫ G(a,y,u) h_t(a) da dt`.
//!
//! Each step adds the explicit noise and control increments, then applies
//! one implicit heat step. For the distribution-function models every slice
//! is passed through the isotonic projection.

use crate::control::Control;
use crate::error::{Error, Result};
use crate::grid::{Field, Grid, HeatSolver, PathField};
use crate::models::{initial_field, CellResponse, ModelKind, ModelSpec};
use crate::noise::NoiseStream;

/// Pool-adjacent-violators: replaces `values` by its L²-nearest
/// nondecreasing sequence. Pooled ranges (length > 1) are appended to `pools`.
pub fn pava(values: &mut [f64], mut pools: Option<&mut Vec<(usize, usize)>>) {
    // (start, len, sum)
    let mut blocks: Vec<(usize, usize, f64)> = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        blocks.push((i, 1, v));
        while blocks.len() > 1 {
            let (_, l1, s1) = blocks[blocks.len() - 1];
            let (_, l0, s0) = blocks[blocks.len() - 2];
            if s0 / l0 as f64 > s1 / l1 as f64 {
                blocks.pop();
                let last = blocks.last_mut().expect("two blocks present");
                last.1 += l1;
                last.2 += s1;
            } else {
                break;
            }
        }
    }
    for &(start, len, sum) in &blocks {
        if len > 1 {
            let mean = sum / len as f64;
            for v in &mut values[start..start + len] {
                *v = mean;
            }
            if let Some(p) = pools.as_deref_mut() {
                p.push((start, start + len));
            }
        }
    }
}

/// Local linearization of one projection, used by the adjoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProjectionTrace {
    pub pools: Vec<(usize, usize)>,
    pub clamped: Vec<usize>,
    pub pinned: bool,
}

impl ProjectionTrace {
    /// Applies the transpose of the projection's Jacobian to `g` in place.
    pub fn pull_back(&self, g: &mut [f64]) {
        let n = g.len();
        if self.pinned {
            g[0] = 0.0;
            g[n - 1] = 0.0;
        }
        for &i in &self.clamped {
            g[i] = 0.0;
        }
        for &(lo, hi) in &self.pools {
            let mean = g[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            for v in &mut g[lo..hi] {
                *v = mean;
            }
        }
    }
}

fn project_in_place(
    values: &mut [f64],
    kind: &ModelKind,
    dx: f64,
    trace: Option<&mut ProjectionTrace>,
) -> f64 {
    if !kind.is_distribution() {
        return 0.0;
    }
    let before = values.to_vec();
    let mut local = ProjectionTrace::default();
    pava(values, Some(&mut local.pools));
    if matches!(kind, ModelKind::Fvp) {
        for (i, v) in values.iter_mut().enumerate() {
            if *v < 0.0 || *v > 1.0 {
                *v = v.clamp(0.0, 1.0);
                local.clamped.push(i);
            }
        }
        let n = values.len();
        values[0] = 0.0;
        values[n - 1] = 1.0;
        local.pinned = true;
    }
    if let Some(t) = trace {
        *t = local;
    }
    before
        .iter()
        .zip(values.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        * dx
}

/// Isotonic projection (plus clamping and pinning for Fleming-Viot).
/// Returns the projected field and the discrete L1 size of the correction.
pub fn monotone_project(u: &Field, kind: &ModelKind, dx: f64) -> (Field, f64) {
    let mut values = u.values.clone();
    let moved = project_in_place(&mut values, kind, dx, None);
    (Field::new(u.t, values), moved)
}

/// Reusable stepping machinery for one (model, grid) pair.
pub struct Scheme<'a> {
    pub model: &'a ModelSpec,
    pub grid: &'a Grid,
    heat: HeatSolver,
    ys: Vec<f64>,
    rhs: Vec<f64>,
    xi: Vec<f64>,
}

impl<'a> Scheme<'a> {
    pub fn new(model: &'a ModelSpec, grid: &'a Grid) -> Result<Self> {
        grid.validate()?;
        if matches!(model.kind, ModelKind::Fvp) && (grid.a_min != 0.0 || grid.a_max != 1.0) {
            return Err(Error::Grid(format!(
                "fvp requires the noise window [0,1], got [{}, {}]",
                grid.a_min, grid.a_max
            )));
        }
        Ok(Scheme {
            model,
            grid,
            heat: HeatSolver::new(grid, grid.dt())?,
            ys: grid.ys(),
            rhs: vec![0.0; grid.ny],
            xi: vec![0.0; grid.na],
        })
    }

    pub fn heat(&self) -> &HeatSolver {
        &self.heat
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    fn check_window(&self, step: usize, u: &[f64]) -> Result<()> {
        if !matches!(self.model.kind, ModelKind::Sbm) {
            return Ok(());
        }
        let (lo, hi) = (self.grid.a_min, self.grid.a_max);
        for &v in u {
            if v < lo || v > hi {
                return Err(Error::WindowExceeded {
                    step,
                    value: v,
                    a_min: lo,
                    a_max: hi,
                });
            }
        }
        if lo > 0.0 || hi < 0.0 {
            return Err(Error::WindowExceeded {
                step,
                value: 0.0,
                a_min: lo,
                a_max: hi,
            });
        }
        Ok(())
    }

    /// Advances `u` from step `n` to `n + 1`; returns the projection's L1 size.
    pub fn step(
        &mut self,
        n: usize,
        u: &mut [f64],
        theta: f64,
        stream: Option<&NoiseStream>,
        control: Option<&[f64]>,
        trace: Option<&mut ProjectionTrace>,
    ) -> Result<f64> {
        self.check_window(n, u)?;
        let dt = self.grid.dt();
        self.rhs.copy_from_slice(u);
        if theta != 0.0 {
            let stream = stream.ok_or_else(|| Error::Input("noise stream required for theta > 0".into()))?;
            stream.fill_step_noise(n, &mut self.xi);
            let scale = theta * (dt / self.grid.da()).sqrt();
            let resp = CellResponse::new(self.model, self.grid, &self.xi);
            for ((r, &ui), &y) in self.rhs.iter_mut().zip(u.iter()).zip(&self.ys) {
                *r += scale * resp.value(y, ui);
            }
        }
        if let Some(h) = control {
            let resp = CellResponse::new(self.model, self.grid, h);
            for ((r, &ui), &y) in self.rhs.iter_mut().zip(u.iter()).zip(&self.ys) {
                *r += dt * resp.value(y, ui);
            }
        }
        self.heat.step_in_place(&mut self.rhs);
        u.copy_from_slice(&self.rhs);
        let moved = project_in_place(u, &self.model.kind, self.grid.dx(), trace);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: n + 1 });
        }
        Ok(moved)
    }
}

/// Runs the scheme, handing every slice (including the initial one) to
/// `observe(step, values)`. Returns the accumulated projection size.
pub fn run_scheme(
    model: &ModelSpec,
    grid: &Grid,
    theta: f64,
    control: Option<&Control>,
    stream: Option<&NoiseStream>,
    mut observe: impl FnMut(usize, &[f64]) -> Result<()>,
) -> Result<f64> {
    if !(theta >= 0.0) {
        return Err(Error::Input(format!("theta must be >= 0, got {theta}")));
    }
    if let Some(h) = control {
        h.check_grid(grid)?;
    }
    let mut scheme = Scheme::new(model, grid)?;
    let mut u = initial_field(model, grid)?.values;
    observe(0, &u)?;
    let mut moved = 0.0;
    for n in 0..grid.nt {
        moved += scheme.step(n, &mut u, theta, stream, control.map(|h| h.step(n)), None)?;
        observe(n + 1, &u)?;
    }
    Ok(moved)
}

/// Full path of the scheme with noise intensity `theta` and optional control.
pub fn solve_spde(
    model: &ModelSpec,
    theta: f64,
    control: Option<&Control>,
    stream: Option<&NoiseStream>,
    grid: &Grid,
) -> Result<PathField> {
    let mut slices = Vec::with_capacity(grid.nt + 1);
    let projection_l1 = run_scheme(model, grid, theta, control, stream, |n, u| {
        slices.push(Field::new(grid.t(n), u.to_vec()));
        Ok(())
    })?;
    Ok(PathField {
        grid: grid.clone(),
        slices,
        projection_l1,
    })
}

/// `u⁰`: the noiseless, uncontrolled heat flow of the initial datum.
pub fn deterministic_limit(model: &ModelSpec, grid: &Grid) -> Result<PathField> {
    solve_spde(model, 0.0, None, None, grid)
}
