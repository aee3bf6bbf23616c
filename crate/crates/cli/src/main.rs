use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use spdelab::control::{control_energy, solve_controlled, Control};
use spdelab::experiments::*;
use spdelab::grid::Grid;
use spdelab::metrics::{membership_constants, metric_d, xi_map, MeasurePath};
use spdelab::models::{initial_field, ModelKind};
use spdelab::noise::NoiseStream;
use spdelab::optimize::{minimize_rate, terminal_mean, OptimizeOptions, TerminalEvent};
use spdelab::particles::{simulate_fv_moran, simulate_sbm_particles, MoranOptions, SbmOptions};
use spdelab::rate::{cameron_martin_check, rate_density, CmOptions};
use spdelab::solver::{deterministic_limit, solve_spde};

#[derive(Parser)]
#[command(name = "spdelab", version, about = "Small-noise SPDE laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.epsilon=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed; same as `--set noise.root_seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// One realization of the scheme and its noiseless limit.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Realization index within the root seed.
        #[arg(long, default_value_t = 0)]
        realization: u64,
        /// Write every n-th time slice.
        #[arg(long, default_value_t = 10)]
        stride: usize,
    },
    /// Rate density of the path driven by a control (zero if none given).
    Rate {
        #[command(flatten)]
        common: Common,
        /// Control CSV with columns `t,a,h`, as written by `minimize`.
        #[arg(long)]
        control: Option<PathBuf>,
    },
    /// Cheapest control moving the terminal mean up by the first delta.
    Minimize {
        #[command(flatten)]
        common: Common,
    },
    /// Crude Monte Carlo exponents over the epsilon × delta grid.
    LdpScan {
        #[command(flatten)]
        common: Common,
        /// Also run the optimizer and report the variational bracket.
        #[arg(long)]
        bracket: bool,
    },
    /// Mean squared deviation from the limit along the epsilon ladder.
    Convergence {
        #[command(flatten)]
        common: Common,
    },
    /// One particle path (branching or Moran, following the model).
    Particles {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        realization: u64,
        #[arg(long, default_value_t = 10)]
        stride: usize,
    },
    /// Log-log fit of time-increment moments.
    Kolmogorov {
        #[command(flatten)]
        common: Common,
    },
    /// Moment z-scores of particles against the scheme.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Compare the scheme against itself instead.
        #[arg(long)]
        self_check: bool,
    },
    /// Hölder membership constants and metric distance to the limit.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        realization: u64,
    },
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("noise.root_seed={seed}"));
        }
        let cfg = match &self.config {
            Some(p) => RunConfig::from_path(p, &overrides),
            None => RunConfig::from_toml_str("", &overrides),
        };
        cfg.context("loading configuration")
    }
}

fn csv(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn read_control(path: &Path, grid: &Grid) -> Result<Control> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut values = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let h = line.rsplit(',').next().unwrap_or_default();
        values.push(h.trim().parse::<f64>().with_context(|| format!("bad control value `{h}`"))?);
    }
    Ok(Control::from_values(grid, values)?)
}

fn run(command: Command) -> Result<()> {
    let start = Instant::now();
    let (name, common) = match &command {
        Command::Simulate { common, .. } => ("simulate", common),
        Command::Rate { common, .. } => ("rate", common),
        Command::Minimize { common } => ("minimize", common),
        Command::LdpScan { common, .. } => ("ldp-scan", common),
        Command::Convergence { common } => ("convergence", common),
        Command::Particles { common, .. } => ("particles", common),
        Command::Kolmogorov { common } => ("kolmogorov", common),
        Command::Compare { common, .. } => ("compare", common),
        Command::Metrics { common, .. } => ("metrics", common),
    };
    let cfg = common.load()?;
    let out = common.out.clone();
    let mut summary = RunSummary::new(name, &cfg);
    let model = cfg.model_spec()?;
    let grid = cfg.grid()?;

    summary.results = match command {
        Command::Simulate { realization, stride, .. } => {
            let stream = NoiseStream::new(cfg.noise.root_seed, realization);
            let path = solve_spde(&model, model.epsilon.sqrt(), None, Some(&stream), &grid)?;
            let limit = deterministic_limit(&model, &grid)?;
            summary.add_output(&out, "path.csv", &csv(|w| path.write_csv(w, stride))?)?;
            summary.add_output(&out, "limit.csv", &csv(|w| limit.write_csv(w, stride))?)?;
            let gap = path.slices.iter().zip(&limit.slices).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
            json!({ "realization": realization, "projection_l1": path.projection_l1, "max_abs_gap": gap })
        }
        Command::Rate { control, .. } => {
            let h = match control {
                Some(p) => read_control(&p, &grid)?,
                None => Control::zeros(&grid),
            };
            if !model.kind.is_distribution() {
                bail!("rate densities need a distribution-function model (sbm or fvp)");
            }
            let path = solve_controlled(&model, &h, &grid)?;
            let mp = MeasurePath::density_of(&path, matches!(model.kind, ModelKind::Fvp))?;
            let mut report = rate_density(&mp, cfg.experiment.floor)?;
            report.i_energy = Some(control_energy(&h, &grid));
            let cm = cameron_martin_check(&mp, &xi_map(&grid, path.initial())?, &CmOptions::default())?;
            summary.add_output(&out, "path.csv", &csv(|w| path.write_csv(w, 1))?)?;
            json!({
                "i_energy": report.i_energy,
                "i_density": report.i_density,
                "floor_mass": report.floor_mass,
                "max_centering_residual": report.centering_residual.iter().fold(0.0f64, |m, r| m.max(r.abs())),
                "cameron_martin": cm,
                "cameron_martin_pass": cm.all_pass(),
            })
        }
        Command::Minimize { .. } => {
            let delta = *cfg.experiment.deltas.first().context("experiment.deltas is empty")?;
            let limit = deterministic_limit(&model, &grid)?;
            let m0 = terminal_mean(&grid, &limit.terminal().values);
            let opts = OptimizeOptions {
                penalty_weights: cfg.experiment.penalty_weights.clone(),
                max_iter: cfg.experiment.max_iter,
                floor: cfg.experiment.floor,
                ..OptimizeOptions::default()
            };
            let res = minimize_rate(&model, &grid, &TerminalEvent::MeanAtLeast { target: m0 + delta }, &opts, None)?;
            summary.add_output(&out, "control.csv", &csv(|w| res.control.write_csv(&grid, w))?)?;
            summary.add_output(&out, "trace.csv", &csv(|w| res.write_trace_csv(w))?)?;
            json!({
                "delta": delta,
                "limit_terminal_mean": m0,
                "i_star": res.objective.energy,
                "violation": res.objective.violation,
                "converged": res.converged,
                "i_density": res.report.i_density,
            })
        }
        Command::LdpScan { bracket, .. } => {
            if bracket {
                let (table, reports) = variational_bracket(&cfg)?;
                summary.add_output(&out, "ldp.csv", &csv(|w| table.write_csv(w))?)?;
                json!({ "stabilization": table.stabilization, "bracket": reports })
            } else {
                let table = run_ldp_scan(&cfg)?;
                summary.add_output(&out, "ldp.csv", &csv(|w| table.write_csv(w))?)?;
                json!({ "stabilization": table.stabilization })
            }
        }
        Command::Convergence { .. } => {
            let table = run_convergence_scan(&cfg)?;
            summary.add_output(&out, "convergence.csv", &csv(|w| table.write_csv(w))?)?;
            match &table.fit {
                Some(f) => json!({ "slope": f.slope, "slope_ci": f.slope_ci(), "r2": f.r2 }),
                None => json!({ "slope": null }),
            }
        }
        Command::Particles { realization, stride, .. } => {
            let u0 = initial_field(&model, &grid)?;
            let mu0 = measure_of(&model.kind, &grid, &u0.values)?;
            let stream = NoiseStream::new(cfg.noise.root_seed, realization);
            let exp = &cfg.experiment;
            let path = match model.kind {
                ModelKind::Sbm => {
                    let opts = SbmOptions {
                        refinement: exp.refinement,
                        rate_factor: exp.rate_factor,
                        jitter: grid.dx(),
                        stride,
                        ..SbmOptions::default()
                    };
                    simulate_sbm_particles(&mu0, model.epsilon, &stream, &grid, &opts)?
                }
                ModelKind::Fvp => {
                    let opts = MoranOptions { refinement: exp.refinement, jitter: grid.dx(), stride, ..MoranOptions::default() };
                    simulate_fv_moran(&mu0, model.epsilon, &stream, &grid, &opts)?
                }
                ModelKind::Custom(_) => bail!("only sbm and fvp have particle systems"),
            };
            summary.add_output(&out, "particles.csv", &csv(|w| path.write_csv(w))?)?;
            let last = path.at(path.len() - 1);
            json!({ "realization": realization, "terminal_mass": last.total_mass(), "terminal_atoms": last.positions.len() })
        }
        Command::Kolmogorov { .. } => {
            let r = kolmogorov_fit(&cfg)?;
            summary.add_output(&out, "kolmogorov.csv", &csv(|w| r.write_csv(w))?)?;
            json!({ "exponent": r.exponent, "q_hat": r.q_hat, "q_ci": r.q_ci, "r2": r.r2 })
        }
        Command::Compare { self_check, .. } => {
            let r = if self_check { compare_spde_spde(&cfg)? } else { compare_particles_spde(&cfg)? };
            summary.add_output(&out, "compare.csv", &csv(|w| r.write_csv(w))?)?;
            json!({ "max_abs_z": r.max_abs_z, "pass": r.pass })
        }
        Command::Metrics { realization, .. } => {
            let stream = NoiseStream::new(cfg.noise.root_seed, realization);
            let path = solve_spde(&model, model.epsilon.sqrt(), None, Some(&stream), &grid)?;
            let limit = deterministic_limit(&model, &grid)?;
            let params = &cfg.experiment.metric;
            let consts = membership_constants(&path, params)?;
            let mut d_max = 0.0f64;
            for (a, b) in path.slices.iter().zip(&limit.slices) {
                d_max = d_max.max(metric_d(&grid, a, b, params)?);
            }
            let table = csv(|w| {
                use std::io::Write;
                writeln!(w, "m,holder_constant")?;
                for (m, c) in consts.iter().enumerate() {
                    writeln!(w, "{},{}", m + 1, c)?;
                }
                Ok(())
            })?;
            summary.add_output(&out, "metrics.csv", &table)?;
            json!({ "realization": realization, "max_metric_d_to_limit": d_max })
        }
    };
    summary.wall_time_s = start.elapsed().as_secs_f64();
    summary.write(&out)?;
    println!("{}", serde_json::to_string_pretty(&summary.results)?);
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
