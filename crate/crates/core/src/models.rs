//! Noise coefficients `G(a, y, u)` and initial data for the SPDE family.
//!
//! Two specializations are built in: super-Brownian motion, where `u` is the
//! distribution function of the measure anchored at zero, and the
//! Fleming-Viot process, where `u` is an ordinary distribution function and
//! the noise space is `[0, 1]`. Custom coefficients are plain closures.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};

type CoefficientFn = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;

/// A user supplied coefficient together with the noise interval it lives on.
#[derive(Clone)]
pub struct CustomCoefficient {
    pub name: String,
    pub support: (f64, f64),
    f: Arc<CoefficientFn>,
}

impl CustomCoefficient {
    pub fn new(
        name: impl Into<String>,
        support: (f64, f64),
        f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        CustomCoefficient {
            name: name.into(),
            support,
            f: Arc::new(f),
        }
    }

    /// `G ≡ 1` on `[0, 1]`: additive noise, exactly linear equation.
    pub fn additive() -> Self {
        Self::new("additive", (0.0, 1.0), |_, _, _| 1.0)
    }

    pub fn zero() -> Self {
        Self::new("zero", (0.0, 1.0), |_, _, _| 0.0)
    }

    pub fn eval(&self, a: f64, y: f64, u: f64) -> f64 {
        (self.f)(a, y, u)
    }
}

impl fmt::Debug for CustomCoefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomCoefficient")
            .field("name", &self.name)
            .field("support", &self.support)
            .finish()
    }
}

#[derive(Clone, Debug)]
pub enum ModelKind {
    Sbm,
    Fvp,
    Custom(CustomCoefficient),
}

impl ModelKind {
    pub fn name(&self) -> &str {
        match self {
            ModelKind::Sbm => "sbm",
            ModelKind::Fvp => "fvp",
            ModelKind::Custom(c) => &c.name,
        }
    }

    pub fn is_distribution(&self) -> bool {
        !matches!(self, ModelKind::Custom(_))
    }
}

/// Initial datum families accepted by the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum InitialDatum {
    /// Law uniform on `[a, b]`.
    UniformCdf { a: f64, b: f64 },
    /// Point mass at `x0`.
    Dirac { x0: f64 },
    /// Normal law with mean `m`, standard deviation `s`.
    GaussianCdf { m: f64, s: f64 },
    /// Normal density itself (a plain function, used with custom models).
    GaussianDensity { m: f64, s: f64 },
    /// Lebesgue measure restricted to `[a, b]`.
    Lebesgue { a: f64, b: f64 },
    /// Piecewise-linear interpolation of `(y, F(y))` pairs, constant outside.
    Tabulated { points: Vec<(f64, f64)> },
}

impl InitialDatum {
    /// Loads `y,F` pairs from a CSV file (an optional header line is skipped).
    pub fn tabulated_from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split(',').map(str::trim);
            let (Some(a), Some(b)) = (parts.next(), parts.next()) else {
                return Err(Error::Input(format!("line {}: expected y,F", lineno + 1)));
            };
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(y), Ok(v)) => points.push((y, v)),
                _ if lineno == 0 => continue,
                _ => return Err(Error::Input(format!("line {}: cannot parse '{line}'", lineno + 1))),
            }
        }
        if points.len() < 2 {
            return Err(Error::Input("tabulated datum needs at least two points".into()));
        }
        points.sort_by(|p, q| p.0.total_cmp(&q.0));
        Ok(InitialDatum::Tabulated { points })
    }

    /// Value counted from minus infinity (distribution function, or the plain
    /// function for the density and tabulated families).
    pub fn raw(&self, y: f64) -> f64 {
        match *self {
            InitialDatum::UniformCdf { a, b } => ((y - a) / (b - a)).clamp(0.0, 1.0),
            InitialDatum::Dirac { x0 } => {
                if y >= x0 {
                    1.0
                } else {
                    0.0
                }
            }
            InitialDatum::GaussianCdf { m, s } => crate::grid::normal_cdf((y - m) / s),
            InitialDatum::GaussianDensity { m, s } => {
                let z = (y - m) / s;
                (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
            }
            InitialDatum::Lebesgue { a, b } => y.clamp(a, b) - a,
            InitialDatum::Tabulated { ref points } => interpolate(points, y),
        }
    }

    fn is_measure_family(&self) -> bool {
        !matches!(
            self,
            InitialDatum::GaussianDensity { .. } | InitialDatum::Tabulated { .. }
        )
    }

    /// Total mass for measure families.
    pub fn mass(&self) -> Option<f64> {
        match *self {
            InitialDatum::Lebesgue { a, b } => Some(b - a),
            InitialDatum::GaussianDensity { .. } | InitialDatum::Tabulated { .. } => None,
            _ => Some(1.0),
        }
    }
}

fn interpolate(points: &[(f64, f64)], y: f64) -> f64 {
    let first = points[0];
    let last = points[points.len() - 1];
    if y <= first.0 {
        return first.1;
    }
    if y >= last.0 {
        return last.1;
    }
    let k = points.partition_point(|p| p.0 <= y);
    let (x0, v0) = points[k - 1];
    let (x1, v1) = points[k];
    if x1 == x0 {
        v1
    } else {
        v0 + (v1 - v0) * (y - x0) / (x1 - x0)
    }
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub initial: InitialDatum,
    pub epsilon: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, initial: InitialDatum, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Validation(format!("epsilon must be >= 0, got {epsilon}")));
        }
        Ok(ModelSpec {
            kind,
            initial,
            epsilon,
        })
    }

    pub fn sbm(initial: InitialDatum, epsilon: f64) -> Result<Self> {
        Self::new(ModelKind::Sbm, initial, epsilon)
    }

    pub fn fvp(initial: InitialDatum, epsilon: f64) -> Result<Self> {
        Self::new(ModelKind::Fvp, initial, epsilon)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        ModelSpec {
            epsilon,
            ..self.clone()
        }
    }

    /// `F(y)`: anchored at zero for super-Brownian motion, counted from minus
    /// infinity otherwise.
    pub fn datum(&self, y: f64) -> f64 {
        match self.kind {
            ModelKind::Sbm if self.initial.is_measure_family() => {
                self.initial.raw(y) - self.initial.raw(0.0)
            }
            _ => self.initial.raw(y),
        }
    }

    /// Noise window covering the signed interval between 0 and the datum's
    /// range with a margin; for Fleming-Viot it is always `[0, 1]`.
    pub fn default_noise_window(&self, grid: &Grid, margin: f64) -> (f64, f64) {
        match &self.kind {
            ModelKind::Fvp => (0.0, 1.0),
            ModelKind::Custom(c) => c.support,
            ModelKind::Sbm => {
                let vals: Vec<f64> = grid.ys().iter().map(|&y| self.datum(y)).collect();
                let lo = vals.iter().cloned().fold(0.0, f64::min);
                let hi = vals.iter().cloned().fold(0.0, f64::max);
                (lo - margin, hi + margin)
            }
        }
    }
}

/// Pointwise coefficient.
pub fn g_eval(model: &ModelSpec, a: f64, y: f64, u: f64) -> Result<f64> {
    let v = match &model.kind {
        ModelKind::Sbm => sbm_g(a, u),
        ModelKind::Fvp => {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Domain(format!("fvp noise variable must lie in [0,1], got {a}")));
            }
            fvp_g(a, u)
        }
        ModelKind::Custom(c) => c.eval(a, y, u),
    };
    if !v.is_finite() {
        return Err(Error::Domain(format!("coefficient not finite at a={a}, y={y}, u={u}")));
    }
    Ok(v)
}

fn sbm_g(a: f64, u: f64) -> f64 {
    if 0.0 < a && a < u {
        1.0
    } else if u < a && a < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn fvp_g(a: f64, u: f64) -> f64 {
    (if a < u { 1.0 } else { 0.0 }) - u
}

const CUSTOM_QUADRATURE_POINTS: usize = 4096;

fn custom_integral(c: &CustomCoefficient, f: impl Fn(f64) -> f64) -> f64 {
    let (lo, hi) = c.support;
    let h = (hi - lo) / CUSTOM_QUADRATURE_POINTS as f64;
    crate::grid::pairwise_sum_by(CUSTOM_QUADRATURE_POINTS, |i| f(lo + (i as f64 + 0.5) * h)) * h
}

/// `∫ G(a,·,u1) G(a,·,u2) λ(da)`, the covariance kernel of the noise term.
pub fn g_cross(model: &ModelSpec, u1: f64, u2: f64) -> f64 {
    match &model.kind {
        ModelKind::Fvp => {
            let (u1, u2) = (u1.clamp(0.0, 1.0), u2.clamp(0.0, 1.0));
            u1.min(u2) - u1 * u2
        }
        ModelKind::Sbm => {
            if u1 > 0.0 && u2 > 0.0 {
                u1.min(u2)
            } else if u1 < 0.0 && u2 < 0.0 {
                u1.abs().min(u2.abs())
            } else {
                0.0
            }
        }
        ModelKind::Custom(c) => custom_integral(c, |a| c.eval(a, 0.0, u1) * c.eval(a, 0.0, u2)),
    }
}

/// Length of `[lo, hi] ∩ [c, d]`.
fn overlap(lo: f64, hi: f64, c: f64, d: f64) -> f64 {
    (hi.min(d) - lo.max(c)).max(0.0)
}

/// `∫_{cell k} G(a, y, u) da`, exact for the indicator coefficients.
pub fn cell_integral(model: &ModelSpec, grid: &Grid, k: usize, y: f64, u: f64) -> f64 {
    let (lo, hi) = (grid.a_edge(k), grid.a_edge(k + 1));
    match &model.kind {
        ModelKind::Sbm => {
            if u >= 0.0 {
                overlap(lo, hi, 0.0, u)
            } else {
                -overlap(lo, hi, u, 0.0)
            }
        }
        ModelKind::Fvp => overlap(lo, hi, 0.0, u.clamp(0.0, 1.0)) - u * (hi - lo),
        ModelKind::Custom(c) => {
            const SUB: usize = 8;
            let h = (hi - lo) / SUB as f64;
            (0..SUB).map(|i| c.eval(lo + (i as f64 + 0.5) * h, y, u)).sum::<f64>() * h
        }
    }
}

/// `A(y, u) = Σ_k c_k ∫_{cell k} G(a, y, u) da` for per-cell weights `c`.
///
/// For the indicator coefficients this is an oriented integral of the
/// piecewise-constant function `c` from 0 to `u`, evaluated in O(1) from a
/// prefix table.
pub struct CellResponse<'a> {
    model: &'a ModelSpec,
    grid: &'a Grid,
    weights: &'a [f64],
    prefix: Vec<f64>,
}

impl<'a> CellResponse<'a> {
    pub fn new(model: &'a ModelSpec, grid: &'a Grid, weights: &'a [f64]) -> Self {
        let da = grid.da();
        let mut prefix = Vec::with_capacity(weights.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for &c in weights {
            acc += c * da;
            prefix.push(acc);
        }
        CellResponse {
            model,
            grid,
            weights,
            prefix,
        }
    }

    fn cell_of(&self, a: f64) -> usize {
        let pos = (a - self.grid.a_min) / self.grid.da();
        (pos.floor().max(0.0) as usize).min(self.grid.na - 1)
    }

    /// `∫_{a_min}^{a} c`, with `a` clamped to the window.
    fn antiderivative(&self, a: f64) -> f64 {
        let a = a.clamp(self.grid.a_min, self.grid.a_max);
        let k = self.cell_of(a);
        self.prefix[k] + self.weights[k] * (a - self.grid.a_edge(k))
    }

    pub fn total(&self) -> f64 {
        self.prefix[self.weights.len()]
    }

    pub fn value(&self, y: f64, u: f64) -> f64 {
        match &self.model.kind {
            ModelKind::Sbm => self.antiderivative(u) - self.antiderivative(0.0),
            ModelKind::Fvp => self.antiderivative(u.clamp(0.0, 1.0)) - u * self.total(),
            ModelKind::Custom(_) => (0..self.weights.len())
                .map(|k| self.weights[k] * cell_integral(self.model, self.grid, k, y, u))
                .sum(),
        }
    }

    /// `∂A/∂u`.
    pub fn du(&self, y: f64, u: f64) -> f64 {
        match &self.model.kind {
            ModelKind::Sbm => {
                if u < self.grid.a_min || u > self.grid.a_max {
                    0.0
                } else {
                    self.weights[self.cell_of(u)]
                }
            }
            ModelKind::Fvp => {
                let inside = if (0.0..1.0).contains(&u) {
                    self.weights[self.cell_of(u)]
                } else {
                    0.0
                };
                inside - self.total()
            }
            ModelKind::Custom(_) => {
                let h = 1e-6 * (1.0 + u.abs());
                (self.value(y, u + h) - self.value(y, u - h)) / (2.0 * h)
            }
        }
    }
}

/// Adds `scale · Σ_y nu(y) ∫_{cell k} G(a, y, u(y)) da` to `out[k]`.
pub fn accumulate_cell_sensitivity(
    model: &ModelSpec,
    grid: &Grid,
    ys: &[f64],
    u: &[f64],
    nu: &[f64],
    scale: f64,
    out: &mut [f64],
) {
    let na = grid.na;
    match &model.kind {
        ModelKind::Custom(_) => {
            for ((&y, &ui), &w) in ys.iter().zip(u).zip(nu) {
                if w == 0.0 {
                    continue;
                }
                for (k, o) in out.iter_mut().enumerate() {
                    *o += scale * w * cell_integral(model, grid, k, y, ui);
                }
            }
        }
        ModelKind::Sbm | ModelKind::Fvp => {
            // difference array for fully covered cells, direct adds for partial ones
            let mut diff = vec![0.0; na + 1];
            let mut partial = vec![0.0; na];
            let mut centering = 0.0;
            let da = grid.da();
            let mut add_interval = |lo: f64, hi: f64, sign: f64, w: f64| {
                if hi <= lo {
                    return;
                }
                let pos = |a: f64| (a - grid.a_min) / da;
                let klo = pos(lo).floor().max(0.0) as usize;
                let khi = (pos(hi).ceil() as usize).min(na);
                if khi <= klo {
                    return;
                }
                if khi - klo == 1 {
                    partial[klo] += sign * w * overlap(grid.a_edge(klo), grid.a_edge(klo + 1), lo, hi);
                    return;
                }
                partial[klo] += sign * w * overlap(grid.a_edge(klo), grid.a_edge(klo + 1), lo, hi);
                partial[khi - 1] +=
                    sign * w * overlap(grid.a_edge(khi - 1), grid.a_edge(khi), lo, hi);
                if khi - 1 > klo + 1 {
                    diff[klo + 1] += sign * w * da;
                    diff[khi - 1] -= sign * w * da;
                }
            };
            for (&ui, &w) in u.iter().zip(nu) {
                if w == 0.0 {
                    continue;
                }
                match model.kind {
                    ModelKind::Sbm => {
                        if ui >= 0.0 {
                            add_interval(0.0_f64.max(grid.a_min), ui.min(grid.a_max), 1.0, w);
                        } else {
                            add_interval(ui.max(grid.a_min), 0.0_f64.min(grid.a_max), -1.0, w);
                        }
                    }
                    _ => {
                        add_interval(0.0, ui.clamp(0.0, 1.0), 1.0, w);
                        centering += w * ui;
                    }
                }
            }
            let mut run = 0.0;
            for k in 0..na {
                run += diff[k];
                out[k] += scale * (run + partial[k] - centering * da);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionReport {
    pub holds_growth: bool,
    pub holds_half_lipschitz: bool,
    /// Smallest `K` with `∫|G(u1)-G(u2)|² ≤ K|u1-u2|` over the probe set.
    pub k_half_lipschitz: f64,
    /// Smallest `K` with `∫|G(u)|² ≤ K(1+u²)` over the probe set.
    pub k_growth: f64,
    pub lipschitz_witness: Option<(f64, f64, f64)>,
    pub growth_witness: Option<(f64, f64)>,
    pub probes_used: usize,
}

impl ConditionReport {
    pub fn k(&self) -> f64 {
        self.k_half_lipschitz.max(self.k_growth)
    }
}

/// `(∫|G(u1)-G(u2)|², ∫|G(u1)|²)` in closed form where available.
fn condition_integrals(model: &ModelSpec, u1: f64, u2: f64, y: f64) -> (f64, f64) {
    match &model.kind {
        ModelKind::Sbm => ((u1 - u2).abs(), u1.abs()),
        ModelKind::Fvp => {
            let (a, b) = (u1.clamp(0.0, 1.0), u2.clamp(0.0, 1.0));
            let d = (a - b).abs();
            let big_d = (u1 - u2).abs();
            // the indicators differ by ±1 on an interval of length d
            let diff = d - 2.0 * d * big_d + big_d * big_d;
            (diff, a * (1.0 - u1).powi(2) + (1.0 - a) * u1 * u1)
        }
        ModelKind::Custom(c) => (
            custom_integral(c, |a| (c.eval(a, y, u1) - c.eval(a, y, u2)).powi(2)),
            custom_integral(c, |a| c.eval(a, y, u1).powi(2)),
        ),
    }
}

/// Checks the half-Lipschitz and linear-growth bounds on a probe set,
/// reporting the smallest constants that work. A bound "holds" when its
/// constant is finite and at most `k_bound`.
pub fn verify_coefficient_conditions(
    model: &ModelSpec,
    probes: &[(f64, f64, f64)],
    k_bound: f64,
) -> Result<ConditionReport> {
    if probes.is_empty() {
        return Err(Error::Input("probe set is empty".into()));
    }
    let mut k_lip: f64 = 0.0;
    let mut k_growth: f64 = 0.0;
    let mut lip_witness = None;
    let mut growth_witness = None;
    let mut finite = true;
    for &(u1, u2, y) in probes {
        let (diff, sq) = condition_integrals(model, u1, u2, y);
        if !diff.is_finite() || !sq.is_finite() {
            finite = false;
            lip_witness = Some((u1, u2, y));
            continue;
        }
        let du = (u1 - u2).abs();
        if du > 0.0 {
            let ratio = diff / du;
            if ratio > k_lip {
                k_lip = ratio;
                lip_witness = Some((u1, u2, y));
            }
        } else if diff > 0.0 {
            finite = false;
            lip_witness = Some((u1, u2, y));
        }
        let g = sq / (1.0 + u1 * u1);
        if g > k_growth {
            k_growth = g;
            growth_witness = Some((u1, y));
        }
    }
    Ok(ConditionReport {
        holds_growth: finite && k_growth <= k_bound,
        holds_half_lipschitz: finite && k_lip <= k_bound,
        k_half_lipschitz: k_lip,
        k_growth,
        lipschitz_witness: lip_witness,
        growth_witness,
        probes_used: probes.len(),
    })
}

/// Samples `F` on the grid and validates the distribution-function invariants.
/// Fleming–Viot data are pinned to exactly 0 and 1 at the ends, as every
/// later slice of the scheme is.
pub fn initial_field(model: &ModelSpec, grid: &Grid) -> Result<Field> {
    let mut field = Field::from_fn(grid, 0.0, |y| model.datum(y));
    field.check_finite("initial datum")?;
    match model.kind {
        ModelKind::Custom(_) => {}
        ModelKind::Sbm | ModelKind::Fvp => {
            if let Some(i) = field.values.windows(2).position(|w| w[1] < w[0]) {
                return Err(Error::Validation(format!(
                    "initial datum is not nondecreasing near y={}",
                    grid.y(i)
                )));
            }
        }
    }
    match model.kind {
        ModelKind::Fvp => {
            let (lo, hi) = (field.values[0], field.values[grid.ny - 1]);
            if lo.abs() > 1e-6 || (hi - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "fvp datum must run from 0 to 1 on the grid, got {lo} .. {hi}"
                )));
            }
            field.values[0] = 0.0;
            field.values[grid.ny - 1] = 1.0;
        }
        ModelKind::Sbm => {
            let at_zero = model.datum(0.0);
            if at_zero.abs() > 1e-12 {
                return Err(Error::Validation(format!("sbm datum must vanish at 0, got {at_zero}")));
            }
        }
        ModelKind::Custom(_) => {}
    }
    Ok(field)
}
