//! Acceptance suite: one PASS/FAIL line per criterion, tolerances as
//! documented in the README. Runs without the libtest harness so the lines
//! are always printed; exits non-zero if a criterion outside
//! `KNOWN_FAILURES` fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use spdelab::control::{center_control_fv, control_energy, solve_controlled, Control};
use spdelab::experiments::config::hex_digest;
use spdelab::experiments::stats::variance;
use spdelab::experiments::*;
use spdelab::grid::{heat_step, BoundaryCondition, Field, Grid};
use spdelab::metrics::{holder_norm, metric_d, sandwich_constants, Measure, MeasurePath, MetricParams};
use spdelab::models::{InitialDatum, ModelSpec};
use spdelab::noise::NoiseStream;
use spdelab::optimize::{objective, objective_gradient, TerminalEvent};
use spdelab::particles::{moran_qv, simulate_sbm_particles, MoranOptions, SbmOptions};
use spdelab::rate::{rate_density, DEFAULT_FLOOR};

/// Criteria that fail at desk scale for reasons analysed in the README.
const KNOWN_FAILURES: &[&str] = &["6", "9", "ldp-stabilization"];

struct Outcome {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: &'static str, name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, name, pass, detail }
}

fn heat_flow() -> Outcome {
    let grid = Grid::with_spacing(8.0, 0.05, 1.0, 1e-3, 0.0, 1.0, 1, BoundaryCondition::Neumann).unwrap();
    let density = |var: f64, y: f64| (-y * y / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
    let mut u = Field::from_fn(&grid, 0.0, |y| density(1.0, y));
    for _ in 0..grid.nt {
        u = heat_step(&grid, &u, grid.dt()).unwrap();
    }
    let err = u.max_abs_diff(&Field::from_fn(&grid, 1.0, |y| density(2.0, y)));
    outcome("1", "heat-flow accuracy", err <= 2e-3, format!("max abs error {err:.3e} (tol 2e-3)"))
}

fn range_preserving(t: f64, a: f64) -> f64 {
    if a.abs() < 0.4 {
        (1.0 + t) * (5.0 * std::f64::consts::PI * a).sin().powi(3)
    } else {
        0.0
    }
}

fn rate_identity() -> Outcome {
    let model = ModelSpec::sbm(InitialDatum::GaussianCdf { m: 0.0, s: 1.0 }, 0.0).unwrap();
    let err = |dx: f64, dt: f64, na: usize| {
        let grid = Grid::with_spacing(6.0, dx, 1.0, dt, -1.0, 1.0, na, BoundaryCondition::Neumann).unwrap();
        let h = Control::from_fn(&grid, range_preserving).unwrap();
        let path = solve_controlled(&model, &h, &grid).unwrap();
        let rep = rate_density(&MeasurePath::density_of(&path, false).unwrap(), DEFAULT_FLOOR).unwrap();
        let e = control_energy(&h, &grid);
        (rep.i_density - e).abs() / e
    };
    let coarse = err(0.02, 5e-4, 128);
    let fine = err(0.01, 2.5e-4, 256);
    let ratio = coarse / fine;
    outcome(
        "2",
        "rate identity (branching)",
        coarse <= 0.10 && ratio >= 1.5,
        format!("rel error {coarse:.3e} at dx=0.02 (tol 0.10), {fine:.3e} at dx=0.01, ratio {ratio:.2} (min 1.5)"),
    )
}

fn fvp_centering() -> Outcome {
    let model = ModelSpec::fvp(InitialDatum::GaussianCdf { m: 0.0, s: 1.0 }, 0.0).unwrap();
    let grid = Grid::with_spacing(8.0, 0.05, 1.0, 1e-3, 0.0, 1.0, 64, BoundaryCondition::DirichletPinned).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = Control::from_values(&grid, (0..grid.nt * grid.na).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let shifted = Control::from_values(
        &grid,
        h.values().iter().enumerate().map(|(i, v)| v + (i / grid.na) as f64 * 1e-2 - 3.0).collect(),
    )
    .unwrap();
    let centered = center_control_fv(&h, &grid).unwrap();
    let a = solve_controlled(&model, &h, &grid).unwrap();
    let gap = |other: &Control| {
        let b = solve_controlled(&model, other, &grid).unwrap();
        a.slices.iter().zip(&b.slices).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
    };
    let (g1, g2) = (gap(&shifted), gap(&centered));
    let (e, ec) = (control_energy(&h, &grid), control_energy(&centered, &grid));
    outcome(
        "3",
        "Fleming-Viot centering",
        g1 <= 1e-10 && g2 <= 1e-10 && ec <= e,
        format!("path gap {g1:.1e} (shift), {g2:.1e} (centered), tol 1e-10; energy {ec:.4} <= {e:.4}"),
    )
}

fn small_noise_scaling() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.noise.realizations = 200;
    let t = run_convergence_scan(&cfg).unwrap();
    let fit = t.fit.unwrap();
    let (lo, hi) = fit.slope_ci();
    outcome(
        "4",
        "small-noise scaling",
        (fit.slope - 1.0).abs() <= 0.2,
        format!("slope {:.4} (95% ci {lo:.3}..{hi:.3}), target 1.0 ± 0.2", fit.slope),
    )
}

fn qv_calibrations() -> Outcome {
    let reps = 500u64;
    let seed = NoiseConfig::default().root_seed;
    let eps = 0.01;
    let grid = Grid::with_spacing(6.0, 0.1, 1.0, 0.01, -1.0, 1.0, 8, BoundaryCondition::Neumann).unwrap();
    let opts = SbmOptions { stride: usize::MAX, ..SbmOptions::default() };
    let masses: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let p = simulate_sbm_particles(&Measure::dirac(0.0), eps, &NoiseStream::new(seed, r), &grid, &opts).unwrap();
            p.at(p.len() - 1).total_mass()
        })
        .collect();
    // Var⟨μ_1, 1⟩ = ε ∫₀¹ E⟨μ_s, 1⟩ ds = ε
    let sbm_ratio = variance(&masses) / eps;
    let xs: Vec<f64> = (0..=800).map(|i| -4.0 + 0.01 * i as f64).collect();
    let ws: Vec<f64> = xs.iter().map(|x| (-0.5 * x * x).exp()).collect();
    let total: f64 = ws.iter().sum();
    let mu0 = Measure::new(xs, ws.iter().map(|w| w / total).collect()).unwrap();
    let recs: Vec<_> = (0..reps)
        .into_par_iter()
        .map(|r| moran_qv(&mu0, eps, &NoiseStream::new(seed, r), &grid, &MoranOptions::default(), f64::tanh).unwrap())
        .collect();
    let fv_ratio = recs.iter().map(|r| r.resampling_qv).sum::<f64>() / (eps * recs.iter().map(|r| r.variance_integral).sum::<f64>());
    outcome(
        "5",
        "quadratic-variation calibrations",
        (sbm_ratio - 1.0).abs() <= 0.15 && (fv_ratio - 1.0).abs() <= 0.15,
        format!("branching Var/ε·m₀·t = {sbm_ratio:.3}, Moran QV ratio = {fv_ratio:.3} (tol ±15%)"),
    )
}

fn comparison_config(kind: ModelChoice, eps: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.kind = kind;
    cfg.model.epsilon = eps;
    cfg.grid = GridConfig { half_width: 6.0, dx: 0.1, horizon: 1.0, dt: 0.005, na: 2048, window_margin: 2.0, ..GridConfig::default() };
    cfg.noise.realizations = 500;
    cfg.experiment.refinement = 200.0;
    cfg
}

fn particles_vs_spde() -> Outcome {
    let mut parts = Vec::new();
    let mut all = true;
    for kind in [ModelChoice::Sbm, ModelChoice::Fvp] {
        for eps in [0.1, 0.05] {
            let r = compare_particles_spde(&comparison_config(kind, eps)).unwrap();
            all &= r.pass;
            let worst = r.rows.iter().max_by(|a, b| a.z.abs().total_cmp(&b.z.abs())).unwrap();
            parts.push(format!(
                "{kind:?} ε={eps}: max|z| {:.2} ({} of f{} at t={})",
                r.max_abs_z, worst.statistic, worst.function, worst.time
            ));
        }
    }
    let mut control = comparison_config(ModelChoice::Sbm, 0.1);
    control.experiment.rate_factor = 2.0;
    let c = compare_particles_spde(&control).unwrap();
    parts.push(format!("rate ×2 control: max|z| {:.2} (must exceed 3)", c.max_abs_z));
    outcome("6", "particles vs SPDE", all && !c.pass && c.max_abs_z > 3.0, parts.join("; "))
}

fn bracket_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.grid = GridConfig { half_width: 5.0, dx: 1.0, horizon: 1.0, dt: 0.25, na: 4, ..GridConfig::default() };
    cfg.experiment.deviation = Deviation::TerminalMeanShift;
    cfg
}

fn variational_bracket_toy() -> Outcome {
    let mut cfg = bracket_config();
    cfg.experiment.epsilons = vec![0.00235];
    cfg.experiment.deltas = vec![0.25];
    cfg.noise.realizations = 20_000_000;
    let (table, reports) = variational_bracket(&cfg).unwrap();
    let r = &reports[0];
    let row = table.row(0.00235, 0.25).unwrap();
    outcome(
        "7",
        "variational bracket",
        r.pass,
        format!(
            "ε={} hits {} of {}, MC exponent {:.5}, I* {:.5}, ratio {:.3} (need MC <= 1.25 I* and I* <= 2 MC + 0.05)",
            row.epsilon,
            row.hits,
            row.realizations,
            r.mc_exponent.unwrap_or(f64::NAN),
            r.i_star,
            r.ratio.unwrap_or(f64::NAN)
        ),
    )
}

fn adjoint_gradient() -> Outcome {
    let mut worst = 0.0f64;
    let setups = [
        (
            // narrow enough that the datum is 0 and 1 at y = ∓4 to 1e-6
            ModelSpec::fvp(InitialDatum::GaussianCdf { m: 0.0, s: 0.5 }, 0.0).unwrap(),
            Grid::new(4.0, 16, 1.0, 16, 0.0, 1.0, 8, BoundaryCondition::DirichletPinned).unwrap(),
            TerminalEvent::MeanAtLeast { target: 0.4 },
        ),
        (
            ModelSpec::sbm(InitialDatum::GaussianCdf { m: 0.0, s: 1.0 }, 0.0).unwrap(),
            Grid::new(4.0, 16, 1.0, 16, -2.0, 2.0, 8, BoundaryCondition::Neumann).unwrap(),
            TerminalEvent::MeanAtLeast { target: 0.4 },
        ),
    ];
    for (model, grid, event) in &setups {
        let h = Control::from_fn(grid, |t, a| 0.3 + (3.0 * a + t).sin()).unwrap();
        let (_, grad) = objective_gradient(model, grid, &h, event, 5.0).unwrap();
        let step = 1e-6;
        for idx in 0..grad.len() {
            let mut p = h.clone();
            p.values_mut()[idx] += step;
            let mut q = h.clone();
            q.values_mut()[idx] -= step;
            let fd = (objective(model, grid, &p, event, 5.0).unwrap().value - objective(model, grid, &q, event, 5.0).unwrap().value)
                / (2.0 * step);
            worst = worst.max((fd - grad[idx]).abs() / fd.abs().max(1e-8));
        }
    }
    outcome(
        "8",
        "adjoint gradient",
        worst <= 1e-4,
        format!("max relative error {worst:.2e} over all 128 components, two models (tol 1e-4)"),
    )
}

fn kolmogorov() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.model.epsilon = 1.0;
    cfg.noise.realizations = 200;
    let r = kolmogorov_fit(&cfg).unwrap();
    outcome(
        "9",
        "Kolmogorov regression",
        r.q_hat > 0.0 && r.r2 >= 0.9,
        format!("q̂ {:.3} (95% ci {:.3}..{:.3}), R² {:.3}; need q̂ > 0 and R² >= 0.9", r.q_hat, r.q_ci.0, r.q_ci.1, r.r2),
    )
}

fn metric_suite() -> Outcome {
    let grid = Grid::new(6.0, 49, 1.0, 4, 0.0, 1.0, 4, BoundaryCondition::Neumann).unwrap();
    let params = MetricParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut field = |scale: f64| Field::new(0.0, (0..grid.ny).map(|_| rng.random_range(-scale..scale)).collect());
    let (mut symmetric, mut triangle, mut capped, mut seminorm) = (true, true, true, true);
    for k in 0..1000 {
        let scale = [0.01, 0.1, 1.0, 10.0][k % 4];
        let (u, v, w) = (field(scale), field(scale), field(scale));
        let uv = metric_d(&grid, &u, &v, &params).unwrap();
        symmetric &= uv == metric_d(&grid, &v, &u, &params).unwrap();
        capped &= (0.0..=1.0).contains(&uv);
        triangle &= metric_d(&grid, &u, &w, &params).unwrap() <= uv + metric_d(&grid, &v, &w, &params).unwrap() + 1e-12;
        if k < 200 {
            let m = 1 + k % 6;
            let sum = Field::new(0.0, u.values.iter().zip(&v.values).map(|(a, b)| a + b).collect());
            let nu = holder_norm(&grid, &u, m, &params).unwrap();
            let nv = holder_norm(&grid, &v, m, &params).unwrap();
            seminorm &= holder_norm(&grid, &sum, m, &params).unwrap() <= nu + nv + 1e-12;
            let c = -2.5;
            let scaled = Field::new(0.0, u.values.iter().map(|a| c * a).collect());
            seminorm &= (holder_norm(&grid, &scaled, m, &params).unwrap() - 2.5 * nu).abs() <= 1e-12 * (1.0 + nu);
        }
    }
    let mut sandwich = true;
    let mut ratios = Vec::new();
    for beta in [0.5, 1.0, 2.0] {
        let (c0, big_c0) = sandwich_constants(beta);
        sandwich &= 0.0 < c0 && c0 <= big_c0 && big_c0.is_finite() && big_c0 / c0 <= (2.0 * beta).exp();
        ratios.push(format!("β={beta}: C₀/c₀ {:.3} <= {:.3}", big_c0 / c0, (2.0 * beta).exp()));
    }
    outcome(
        "10",
        "metric suite",
        symmetric && triangle && capped && seminorm && sandwich,
        format!(
            "symmetry {symmetric}, triangle {triangle}, cap {capped} (1000 triples), seminorm {seminorm}; {}",
            ratios.join(", ")
        ),
    )
}

fn csv_digests(cfg: &RunConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut buf = Vec::new();
    run_convergence_scan(cfg).unwrap().write_csv(&mut buf).unwrap();
    out.push(hex_digest(&buf));
    buf.clear();
    run_ldp_scan(cfg).unwrap().write_csv(&mut buf).unwrap();
    out.push(hex_digest(&buf));
    buf.clear();
    variational_bracket(cfg).unwrap().0.write_csv(&mut buf).unwrap();
    out.push(hex_digest(&buf));
    buf.clear();
    let mut k = cfg.clone();
    k.model.epsilon = 1.0;
    kolmogorov_fit(&k).unwrap().write_csv(&mut buf).unwrap();
    out.push(hex_digest(&buf));
    buf.clear();
    let mut c = cfg.clone();
    c.model.epsilon = 0.1;
    c.experiment.refinement = 20.0;
    compare_particles_spde(&c).unwrap().write_csv(&mut buf).unwrap();
    out.push(hex_digest(&buf));
    out
}

fn reproducibility() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.grid = GridConfig { half_width: 5.0, dx: 0.25, horizon: 1.0, dt: 0.05, na: 16, ..GridConfig::default() };
    cfg.experiment.epsilons = vec![0.1, 0.03, 0.01];
    cfg.experiment.deltas = vec![0.05, 0.1];
    cfg.noise.realizations = 300;
    let a = csv_digests(&cfg);
    let b = csv_digests(&cfg);
    outcome(
        "11",
        "reproducibility",
        a == b,
        format!("{} tables, digests {}", a.len(), if a == b { "identical" } else { "differ" }),
    )
}

fn ldp_stabilization() -> Outcome {
    let mut cfg = bracket_config();
    cfg.experiment.epsilons = vec![0.1, 0.05, 0.025];
    cfg.experiment.deltas = vec![0.1];
    cfg.noise.realizations = 200_000;
    let t = run_ldp_scan(&cfg).unwrap();
    let s = &t.stabilization[0];
    let ex: Vec<String> = cfg
        .experiment
        .epsilons
        .iter()
        .map(|&e| format!("{:.4}", t.row(e, 0.1).unwrap().exponent.unwrap_or(f64::NAN)))
        .collect();
    outcome(
        "ldp-stabilization",
        "exponent stabilization (toy, δ=0.1)",
        s.stable == Some(true),
        format!(
            "exponents {} at ε 0.1/0.05/0.025, relative spread {:.3} (tol 0.30)",
            ex.join("/"),
            s.relative_spread.unwrap_or(f64::NAN)
        ),
    )
}

fn main() -> ExitCode {
    let criteria: Vec<fn() -> Outcome> = vec![
        heat_flow,
        rate_identity,
        fvp_centering,
        small_noise_scaling,
        qv_calibrations,
        particles_vs_spde,
        variational_bracket_toy,
        adjoint_gradient,
        kolmogorov,
        metric_suite,
        reproducibility,
        ldp_stabilization,
    ];
    // optional first argument: index of the first criterion to run
    let skip = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let mut unexpected = Vec::new();
    for c in criteria.into_iter().skip(skip) {
        let start = Instant::now();
        let o = c();
        let known = KNOWN_FAILURES.contains(&o.id);
        let tag = match (o.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("{tag} [{}] {}: {} [{:.1}s]", o.id, o.name, o.detail, start.elapsed().as_secs_f64());
        if !o.pass && !known {
            unexpected.push(o.id);
        }
    }
    if unexpected.is_empty() {
        println!("acceptance: no unexpected failures");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: unexpected failures {unexpected:?}");
        ExitCode::FAILURE
    }
}
