use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spdelab::control::{center_control_fv, control_energy, solve_controlled, Control};
use spdelab::grid::{heat_step, BoundaryCondition, Field, Grid};
use spdelab::metrics::{xi_map, MeasurePath};
use spdelab::models::{initial_field, InitialDatum, ModelSpec};
use spdelab::optimize::{minimize_rate, OptimizeOptions, TerminalEvent};
use spdelab::rate::{cameron_martin_check, rate_density, CmOptions, DEFAULT_FLOOR};
use spdelab::solver::{deterministic_limit, solve_spde};

fn fvp_grid(dx: f64, dt: f64, na: usize) -> Grid {
    Grid::with_spacing(5.0, dx, 1.0, dt, 0.0, 1.0, na, BoundaryCondition::DirichletPinned).unwrap()
}

fn random_control(grid: &Grid, seed: u64) -> Control {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..grid.nt * grid.na).map(|_| rng.random_range(-2.0..2.0)).collect();
    Control::from_values(grid, v).unwrap()
}

/// Smooth control vanishing outside `|a| < 0.4` with zero net drift at the
/// support edges, so the range of an SBM datum of unit mass stays put.
fn range_preserving(t: f64, a: f64) -> f64 {
    if a.abs() < 0.4 {
        (1.0 + t) * (5.0 * std::f64::consts::PI * a).sin().powi(3)
    } else {
        0.0
    }
}

fn sbm_identity_error(dx: f64, dt: f64, na: usize) -> f64 {
    let model = ModelSpec::sbm(InitialDatum::GaussianCdf { m: 0.0, s: 1.0 }, 0.0).unwrap();
    let grid = Grid::with_spacing(6.0, dx, 1.0, dt, -1.0, 1.0, na, BoundaryCondition::Neumann).unwrap();
    let h = Control::from_fn(&grid, range_preserving).unwrap();
    let path = solve_controlled(&model, &h, &grid).unwrap();
    let rep = rate_density(&MeasurePath::density_of(&path, false).unwrap(), DEFAULT_FLOOR).unwrap();
    let e = control_energy(&h, &grid);
    (rep.i_density - e).abs() / e
}

#[test]
fn zero_control_is_the_deterministic_limit() {
    let model = ModelSpec::fvp(InitialDatum::GaussianCdf { m: 0.0, s: 1.0 }, 0.1).unwrap();
    let grid = fvp_grid(0.1, 0.01, 8);
    let a = solve_controlled(&model, &Control::zeros(&grid), &grid).unwrap();
    assert_eq!(a.slices, deterministic_limit(&model, &grid).unwrap().slices);
}

#[test]
fn controlled_solve_is_the_noiseless_scheme() {
    let model = ModelSpec::sbm(InitialDatum::GaussianCdf { m: 0.0, s: 1.0 }, 0.1).unwrap();
    let grid = Grid::with_spacing(6.0, 0.1, 1.0, 0.01, -2.0, 2.0, 16, BoundaryCondition::Neumann).unwrap();
    let h = Control::from_fn(&grid, |t, a| (2.0 * a + t).cos()).unwrap();
    let a = solve_controlled(&model, &h, &grid).unwrap();
    let b = solve_spde(&model, 0.0, Some(&h), None, &grid).unwrap();
    assert_eq!(a.slices, b.slices);
}

#[test]
fn constant_in_a_controls_do_nothing_for_fvp() {
    let model = ModelSpec::fvp(InitialDatum::GaussianCdf { m: 0.0, s: 1.0 }, 0.1).unwrap();
    let grid = fvp_grid(0.1, 0.01, 8);
    let h = Control::from_fn(&grid, |t, _| 3.0 * (1.0 + t)).unwrap();
    let a = solve_controlled(&model, &h, &grid).unwrap();
    let b = deterministic_limit(&model, &grid).unwrap();
    for (x, y) in a.slices.iter().zip(&b.slices) {
        assert!(x.max_abs_diff(y) <= 1e-12);
    }
}

#[test]
fn sbm_indicator_control_adds_the_overlap_drift() {
    // h = c on 0 < a < A gives the drift c·clamp(u, 0, A)
    let (c, cap) = (1.5, 0.25);
    let model = ModelSpec::sbm(InitialDatum::GaussianCdf { m: 0.0, s: 1.0 }, 0.0).unwrap();
    let grid = Grid::with_spacing(6.0, 0.05, 1.0, 0.01, -1.0, 1.0, 16, BoundaryCondition::Neumann).unwrap();
    let h = Control::from_fn(&grid, |_, a| if a > 0.0 && a < cap { c } else { 0.0 }).unwrap();
    let path = solve_controlled(&model, &h, &grid).unwrap();
    let mut u = initial_field(&model, &grid).unwrap();
    for n in 0..grid.nt {
        let pushed = Field::new(u.t, u.values.iter().map(|&v| v + grid.dt() * c * v.clamp(0.0, cap)).collect());
        u = heat_step(&grid, &pushed, grid.dt()).unwrap();
        assert!(path.slices[n + 1].max_abs_diff(&u) <= 1e-10, "step {n}");
    }
}

#[test]
fn sbm_rate_identity_improves_under_refinement() {
    let coarse = sbm_identity_error(0.04, 1e-3, 64);
    let fine = sbm_identity_error(0.02, 5e-4, 128);
    assert!(fine <= 0.10, "{fine}");
    assert!(coarse / fine >= 1.5, "{coarse} -> {fine}");
}

#[test]
fn centering_leaves_fvp_paths_unchanged() {
    let model = ModelSpec::fvp(InitialDatum::GaussianCdf { m: 0.0, s: 1.0 }, 0.1).unwrap();
    let grid = fvp_grid(0.1, 0.01, 16);
    let h = random_control(&grid, 1);
    let hc = center_control_fv(&h, &grid).unwrap();
    assert!(control_energy(&hc, &grid) <= control_energy(&h, &grid));
    assert_eq!(center_control_fv(&hc, &grid).unwrap().values().len(), hc.values().len());
    let a = solve_controlled(&model, &h, &grid).unwrap();
    let b = solve_controlled(&model, &hc, &grid).unwrap();
    for (x, y) in a.slices.iter().zip(&b.slices) {
        assert!(x.max_abs_diff(y) <= 1e-10);
    }
}

#[test]
fn centered_fvp_control_has_small_centering_residual() {
    let model = ModelSpec::fvp(InitialDatum::GaussianCdf { m: 0.0, s: 1.0 }, 0.0).unwrap();
    let grid = fvp_grid(0.02, 5e-4, 64);
    let h = center_control_fv(&Control::from_fn(&grid, |t, a| (1.0 + t) * (2.0 * std::f64::consts::PI * a).sin()).unwrap(), &grid).unwrap();
    let path = solve_controlled(&model, &h, &grid).unwrap();
    let rep = rate_density(&MeasurePath::density_of(&path, true).unwrap(), DEFAULT_FLOOR).unwrap();
    let worst = rep.centering_residual.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    assert!(worst <= 1e-3, "{worst}");
}

#[test]
fn controlled_path_meets_cameron_martin_conditions() {
    let model = ModelSpec::sbm(InitialDatum::GaussianCdf { m: 0.0, s: 1.0 }, 0.0).unwrap();
    let grid = Grid::with_spacing(6.0, 0.02, 1.0, 5e-4, -1.0, 1.0, 128, BoundaryCondition::Neumann).unwrap();
    let h = Control::from_fn(&grid, range_preserving).unwrap();
    let path = solve_controlled(&model, &h, &grid).unwrap();
    let nu = xi_map(&grid, path.initial()).unwrap();
    let cm = cameron_martin_check(&MeasurePath::density_of(&path, false).unwrap(), &nu, &CmOptions::default()).unwrap();
    assert!(cm.initial_matches && cm.jump_steps.is_empty() && cm.psi_norm_finite, "{cm:?}");
    let e = control_energy(&h, &grid);
    assert!(cm.psi_norm_sq <= 2.0 * e * 1.05, "{} vs {}", cm.psi_norm_sq, 2.0 * e);
}

#[test]
fn penalized_energy_is_nondecreasing_in_the_weight() {
    let model = ModelSpec::fvp(InitialDatum::UniformCdf { a: 0.0, b: 1.0 }, 0.0).unwrap();
    let grid = Grid::new(4.0, 33, 1.0, 16, 0.0, 1.0, 8, BoundaryCondition::DirichletPinned).unwrap();
    let event = TerminalEvent::MeanAtLeast { target: 0.8 };
    let energies: Vec<f64> = [10.0, 20.0, 40.0, 80.0, 160.0]
        .iter()
        .map(|&w| {
            let opts = OptimizeOptions { penalty_weights: vec![w], max_iter: 2000, ..OptimizeOptions::default() };
            minimize_rate(&model, &grid, &event, &opts, None).unwrap().objective.energy
        })
        .collect();
    assert!(energies.windows(2).all(|p| p[1] >= p[0] * (1.0 - 1e-6)), "{energies:?}");
}
