//! Minimization of the control energy subject to a terminal event, by
//! penalized gradient descent with the discrete adjoint of the scheme.

use serde::{Deserialize, Serialize};

use crate::control::{control_energy, solve_controlled, Control};
use crate::error::{Error, Result};
use crate::grid::{pairwise_sum, Grid};
use crate::metrics::MeasurePath;
use crate::models::{accumulate_cell_sensitivity, initial_field, CellResponse, ModelKind, ModelSpec};
use crate::rate::{rate_density, RateReport, DEFAULT_FLOOR};
use crate::solver::{ProjectionTrace, Scheme};

/// Terminal events `{u : u_T ∈ E}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum TerminalEvent {
    /// `⟨ξ(u_T), id⟩ ≥ target`.
    MeanAtLeast { target: f64 },
    /// `⟨ξ(u_T), id⟩ ≤ target`.
    MeanAtMost { target: f64 },
    /// `u_T = target`, enforced through `∫ (u_T − target)² dy`.
    Field { target: Vec<f64> },
}

/// `⟨ξ(u), id⟩ = Σ_i mid_i (u_{i+1} − u_i)`.
pub fn terminal_mean(grid: &Grid, u: &[f64]) -> f64 {
    let mids = grid.midpoints();
    pairwise_sum(&u.windows(2).zip(&mids).map(|(w, m)| m * (w[1] - w[0])).collect::<Vec<_>>())
}

fn mean_gradient(grid: &Grid, out: &mut [f64], scale: f64) {
    let mids = grid.midpoints();
    let n = out.len();
    for (j, o) in out.iter_mut().enumerate() {
        let left = if j >= 1 { mids[j - 1] } else { 0.0 };
        let right = if j + 1 < n { mids[j] } else { 0.0 };
        *o += scale * (left - right);
    }
}

impl TerminalEvent {
    /// Squared shortfall; zero exactly when the event holds.
    pub fn violation(&self, grid: &Grid, u: &[f64]) -> f64 {
        match self {
            TerminalEvent::MeanAtLeast { target } => (target - terminal_mean(grid, u)).max(0.0).powi(2),
            TerminalEvent::MeanAtMost { target } => (terminal_mean(grid, u) - target).max(0.0).powi(2),
            TerminalEvent::Field { target } => {
                let sq: Vec<f64> = u.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).collect();
                grid.integrate(&sq)
            }
        }
    }

    fn add_violation_gradient(&self, grid: &Grid, u: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            TerminalEvent::MeanAtLeast { target } => {
                let short = (target - terminal_mean(grid, u)).max(0.0);
                mean_gradient(grid, out, -2.0 * short * scale);
            }
            TerminalEvent::MeanAtMost { target } => {
                let over = (terminal_mean(grid, u) - target).max(0.0);
                mean_gradient(grid, out, 2.0 * over * scale);
            }
            TerminalEvent::Field { target } => {
                for ((o, w), (a, b)) in out.iter_mut().zip(grid.trapezoid_weights()).zip(u.iter().zip(target)) {
                    *o += scale * 2.0 * w * (a - b);
                }
            }
        }
    }

    fn check(&self, grid: &Grid) -> Result<()> {
        if let TerminalEvent::Field { target } = self {
            grid.check_len("terminal target", target.len())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub energy: f64,
    pub violation: f64,
}

fn forward(
    model: &ModelSpec,
    grid: &Grid,
    h: &Control,
    mut keep: Option<(&mut Vec<Vec<f64>>, &mut Vec<ProjectionTrace>)>,
) -> Result<Vec<f64>> {
    h.check_grid(grid)?;
    let mut scheme = Scheme::new(model, grid)?;
    let mut u = initial_field(model, grid)?.values;
    for n in 0..grid.nt {
        let mut trace = ProjectionTrace::default();
        if let Some((states, _)) = keep.as_mut() {
            states.push(u.clone());
        }
        scheme.step(n, &mut u, 0.0, None, Some(h.step(n)), Some(&mut trace))?;
        if let Some((_, traces)) = keep.as_mut() {
            traces.push(trace);
        }
    }
    Ok(u)
}

/// `½∬h² + weight · violation(γ(F, h))`.
pub fn objective(model: &ModelSpec, grid: &Grid, h: &Control, event: &TerminalEvent, weight: f64) -> Result<Objective> {
    event.check(grid)?;
    let u = forward(model, grid, h, None)?;
    let energy = control_energy(h, grid);
    let violation = event.violation(grid, &u);
    Ok(Objective {
        value: energy + weight * violation,
        energy,
        violation,
    })
}

/// Objective and its exact gradient with respect to the control values,
/// laid out like [`Control::values`].
pub fn objective_gradient(
    model: &ModelSpec,
    grid: &Grid,
    h: &Control,
    event: &TerminalEvent,
    weight: f64,
) -> Result<(Objective, Vec<f64>)> {
    event.check(grid)?;
    let mut states = Vec::with_capacity(grid.nt);
    let mut traces = Vec::with_capacity(grid.nt);
    let u_final = forward(model, grid, h, Some((&mut states, &mut traces)))?;
    let energy = control_energy(h, grid);
    let violation = event.violation(grid, &u_final);

    let (dt, da) = (grid.dt(), grid.da());
    let ys = grid.ys();
    let heat = crate::grid::HeatSolver::new(grid, dt)?;
    let mut grad: Vec<f64> = h.values().iter().map(|v| v * dt * da).collect();
    let mut lam = vec![0.0; grid.ny];
    event.add_violation_gradient(grid, &u_final, weight, &mut lam);
    for n in (0..grid.nt).rev() {
        traces[n].pull_back(&mut lam);
        heat.adjoint_in_place(&mut lam);
        let un = &states[n];
        accumulate_cell_sensitivity(model, grid, &ys, un, &lam, dt, &mut grad[n * grid.na..(n + 1) * grid.na]);
        let resp = CellResponse::new(model, grid, h.step(n));
        for ((l, &y), &ui) in lam.iter_mut().zip(&ys).zip(un) {
            *l += dt * *l * resp.du(y, ui);
        }
    }
    Ok((
        Objective {
            value: energy + weight * violation,
            energy,
            violation,
        },
        grad,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOptions {
    /// Penalty weights, used in turn with warm starts.
    pub penalty_weights: Vec<f64>,
    /// Iteration cap per weight.
    pub max_iter: usize,
    /// Stop when the L² norm of the Riesz gradient falls below this.
    pub grad_tol: f64,
    /// Or when an accepted step changes the objective by less than this
    /// fraction.
    pub rel_tol: f64,
    pub floor: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            penalty_weights: vec![1e1, 1e2, 1e3, 1e4, 1e5],
            max_iter: 200,
            grad_tol: 1e-7,
            rel_tol: 1e-12,
            floor: DEFAULT_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub weight: f64,
    pub objective: f64,
    pub energy: f64,
    pub violation: f64,
}

#[derive(Clone, Debug)]
pub struct OptimizeResult {
    pub control: Control,
    pub report: RateReport,
    pub objective: Objective,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

impl OptimizeResult {
    /// CSV with columns `iteration,weight,objective,energy,violation`.
    pub fn write_trace_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,weight,objective,energy,violation")?;
        for r in &self.trace {
            writeln!(w, "{},{},{},{},{}", r.iteration, r.weight, r.objective, r.energy, r.violation)?;
        }
        Ok(())
    }
}

fn riesz_norm_sq(g: &[f64], scale: f64) -> f64 {
    pairwise_sum(&g.iter().map(|v| v * v).collect::<Vec<_>>()) / scale
}

/// Gradient descent on one penalty weight. Steps follow the Riesz gradient
/// `g / (dt·da)` with Barzilai–Borwein step lengths and Armijo backtracking.
fn descend(
    model: &ModelSpec,
    grid: &Grid,
    event: &TerminalEvent,
    weight: f64,
    opts: &OptimizeOptions,
    h: &mut Control,
    trace: &mut Vec<TraceRow>,
) -> Result<(Objective, bool)> {
    let scale = grid.dt() * grid.da();
    let (mut obj, mut g) = objective_gradient(model, grid, h, event, weight)?;
    let mut step = 1.0;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let start = trace.len();
    trace.push(TraceRow {
        iteration: start,
        weight,
        objective: obj.value,
        energy: obj.energy,
        violation: obj.violation,
    });
    for _ in 0..opts.max_iter {
        let gnorm_sq = riesz_norm_sq(&g, scale);
        if gnorm_sq.sqrt() <= opts.grad_tol {
            return Ok((obj, true));
        }
        if let Some((dh, dg)) = prev.take() {
            let num: f64 = dh.iter().map(|v| v * v).sum::<f64>();
            let den: f64 = dh.iter().zip(&dg).map(|(a, b)| a * b).sum::<f64>() / scale;
            let bb = num / den;
            if bb.is_finite() && bb > 0.0 {
                step = bb;
            }
        }
        let dir: Vec<f64> = g.iter().map(|v| -v / scale).collect();
        let slope = -gnorm_sq;
        let mut accepted = None;
        for _ in 0..60 {
            let vals: Vec<f64> = h.values().iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let trial = Control::from_values(grid, vals)?;
            match objective(model, grid, &trial, event, weight) {
                Ok(t) if t.value <= obj.value + 1e-4 * step * slope => {
                    accepted = Some((trial, t));
                    break;
                }
                Ok(_) | Err(Error::WindowExceeded { .. }) | Err(Error::BlowUp { .. }) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some((trial, _)) = accepted else {
            // no descent possible at machine precision
            return Ok((obj, true));
        };
        let (new_obj, new_g) = objective_gradient(model, grid, &trial, event, weight)?;
        let dh: Vec<f64> = trial.values().iter().zip(h.values()).map(|(a, b)| a - b).collect();
        let dg: Vec<f64> = new_g.iter().zip(&g).map(|(a, b)| (a - b) / scale).collect();
        prev = Some((dh, dg));
        let change = (obj.value - new_obj.value).abs();
        *h = trial;
        obj = new_obj;
        g = new_g;
        trace.push(TraceRow {
            iteration: trace.len(),
            weight,
            objective: obj.value,
            energy: obj.energy,
            violation: obj.violation,
        });
        if change <= opts.rel_tol * obj.value.abs().max(1e-300) {
            return Ok((obj, true));
        }
    }
    Ok((obj, false))
}

/// Approximate minimizer of `½∬h²` over controls whose path ends in the
/// event. The returned energy is an upper bound for the discrete infimum up
/// to the residual violation.
pub fn minimize_rate(
    model: &ModelSpec,
    grid: &Grid,
    event: &TerminalEvent,
    opts: &OptimizeOptions,
    initial: Option<Control>,
) -> Result<OptimizeResult> {
    if opts.penalty_weights.is_empty() || opts.penalty_weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::Input("penalty weights must be positive and non-empty".into()));
    }
    let mut h = initial.unwrap_or_else(|| Control::zeros(grid));
    let mut trace = Vec::new();
    let mut converged = true;
    let mut obj = objective(model, grid, &h, event, opts.penalty_weights[0])?;
    for &w in &opts.penalty_weights {
        let (o, ok) = descend(model, grid, event, w, opts, &mut h, &mut trace)?;
        obj = o;
        converged &= ok;
    }
    let mut report = if model.kind.is_distribution() {
        let path = solve_controlled(model, &h, grid)?;
        rate_density(&MeasurePath::density_of(&path, matches!(model.kind, ModelKind::Fvp))?, opts.floor)?
    } else {
        RateReport::default()
    };
    report.i_energy = Some(obj.energy);
    Ok(OptimizeResult {
        control: h,
        report,
        objective: obj,
        converged,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoundaryCondition;
    use crate::models::InitialDatum;
    use crate::solver::deterministic_limit;

    fn fvp_setup() -> (ModelSpec, Grid) {
        let g = Grid::new(4.0, 33, 1.0, 16, 0.0, 1.0, 8, BoundaryCondition::DirichletPinned).unwrap();
        let m = ModelSpec::fvp(InitialDatum::UniformCdf { a: 0.0, b: 1.0 }, 0.1).unwrap();
        (m, g)
    }

    #[test]
    fn terminal_mean_of_uniform() {
        let (m, g) = fvp_setup();
        let u = initial_field(&m, &g).unwrap();
        assert!((terminal_mean(&g, &u.values) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn satisfied_event_gives_zero_control() {
        let (m, g) = fvp_setup();
        let ev = TerminalEvent::MeanAtLeast { target: 0.4 };
        let r = minimize_rate(&m, &g, &ev, &OptimizeOptions::default(), None).unwrap();
        assert!(r.converged);
        assert!(r.objective.energy <= 1e-6);
        assert!(r.control.values().iter().all(|&v| v == 0.0));
        assert_eq!(r.report.i_energy, Some(0.0));
    }

    #[test]
    fn mean_shift_is_reached() {
        let (m, g) = fvp_setup();
        let ev = TerminalEvent::MeanAtLeast { target: 0.6 };
        let r = minimize_rate(&m, &g, &ev, &OptimizeOptions::default(), None).unwrap();
        let path = solve_controlled(&m, &r.control, &g).unwrap();
        let mean = terminal_mean(&g, &path.terminal().values);
        assert!(mean > 0.599, "{mean}");
        assert!(r.objective.energy > 0.0);
        let mut csv = Vec::new();
        r.write_trace_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("iteration,weight,objective,energy,violation"));
    }

    #[test]
    fn field_event_matches_deterministic_path() {
        let (m, g) = fvp_setup();
        let det = deterministic_limit(&m, &g).unwrap();
        let ev = TerminalEvent::Field { target: det.terminal().values.clone() };
        let o = objective(&m, &g, &Control::zeros(&g), &ev, 1.0).unwrap();
        assert_eq!(o.violation, 0.0);
        assert!(objective(&m, &g, &Control::zeros(&g), &TerminalEvent::Field { target: vec![0.0; 3] }, 1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (m, g) = fvp_setup();
        let ev = TerminalEvent::MeanAtLeast { target: 0.7 };
        let h = Control::from_fn(&g, |t, a| 0.3 + (3.0 * a + t).sin()).unwrap();
        let (_, grad) = objective_gradient(&m, &g, &h, &ev, 5.0).unwrap();
        let eps = 1e-6;
        for idx in [0, 7, 40, 77, 127] {
            let mut p = h.clone();
            p.values_mut()[idx] += eps;
            let mut q = h.clone();
            q.values_mut()[idx] -= eps;
            let fd = (objective(&m, &g, &p, &ev, 5.0).unwrap().value - objective(&m, &g, &q, &ev, 5.0).unwrap().value)
                / (2.0 * eps);
            assert!((fd - grad[idx]).abs() <= 1e-6 * fd.abs().max(1e-3), "{idx}: {fd} vs {}", grad[idx]);
        }
    }
}
