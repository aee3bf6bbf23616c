//! Weighted Hölder norms, the metric `d_{α,β}`, measures and the maps
//! between monotone fields and measures.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{pairwise_sum, Field, Grid, PathField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricParams {
    pub alpha: f64,
    pub beta: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub m_max: usize,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            alpha: 0.25,
            beta: 1.0,
            beta0: 0.25,
            beta1: 0.5,
            m_max: 16,
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::Validation(format!("alpha must lie in (0, 0.5), got {}", self.alpha)));
        }
        if !(0.0 < self.beta0 && self.beta0 < self.beta1 && self.beta1 < self.beta) {
            return Err(Error::Validation(format!(
                "need 0 < beta0 < beta1 < beta, got {} {} {}",
                self.beta0, self.beta1, self.beta
            )));
        }
        if self.m_max < 8 {
            return Err(Error::Validation(format!("m_max must be >= 8, got {}", self.m_max)));
        }
        Ok(())
    }
}

/// Largest difference quotient `|u_i − u_j| / |y_i − y_j|^α` over grid
/// pairs inside `|y| ≤ m`.
fn holder_quotient(grid: &Grid, values: &[f64], m: f64, alpha: f64) -> f64 {
    let idx: Vec<usize> = (0..grid.ny).filter(|&i| grid.y(i).abs() <= m + 1e-12).collect();
    let mut best = 0.0f64;
    for (p, &i) in idx.iter().enumerate() {
        for &j in &idx[p + 1..] {
            let q = (values[i] - values[j]).abs() / (grid.y(j) - grid.y(i)).abs().powf(alpha);
            best = best.max(q);
        }
    }
    best
}

fn weighted_sup(grid: &Grid, values: &[f64], beta: f64) -> f64 {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| (-beta * grid.y(i).abs()).exp() * v.abs())
        .fold(0.0, f64::max)
}

/// `‖u‖_{m,α,β} = sup_x e^{−β|x|}|u(x)| + e^{−βm} sup_{|y_i| ≤ m} |u(y₁)−u(y₂)|/|y₁−y₂|^α`,
/// with both suprema over grid points.
pub fn holder_norm(grid: &Grid, u: &Field, m: usize, params: &MetricParams) -> Result<f64> {
    grid.check_len("field", u.len())?;
    if m == 0 {
        return Err(Error::Input("holder_norm needs m >= 1".into()));
    }
    let m = m as f64;
    Ok(weighted_sup(grid, &u.values, params.beta)
        + (-params.beta * m).exp() * holder_quotient(grid, &u.values, m, params.alpha))
}

/// `‖u‖_{m,α,β}` for `m = 1..=m_max`. Windows wider than the grid reuse the
/// last quotient.
pub fn holder_norms(grid: &Grid, u: &Field, params: &MetricParams) -> Result<Vec<f64>> {
    grid.check_len("field", u.len())?;
    let sup = weighted_sup(grid, &u.values, params.beta);
    let mut out = Vec::with_capacity(params.m_max);
    let mut saturated: Option<f64> = None;
    for m in 1..=params.m_max {
        let mf = m as f64;
        let q = match saturated {
            Some(q) => q,
            None => {
                let q = holder_quotient(grid, &u.values, mf, params.alpha);
                if mf >= grid.half_width {
                    saturated = Some(q);
                }
                q
            }
        };
        out.push(sup + (-params.beta * mf).exp() * q);
    }
    Ok(out)
}

/// `d_{α,β}(u, v) = Σ_{m=1}^{m_max} 2^{−m} (‖u − v‖_{m,α,β} ∧ 1)`.
/// The truncated tail is at most `2^{−m_max}`.
pub fn metric_d(grid: &Grid, u: &Field, v: &Field, params: &MetricParams) -> Result<f64> {
    grid.check_len("field", v.len())?;
    let diff = Field::new(u.t, u.values.iter().zip(&v.values).map(|(a, b)| a - b).collect());
    let norms = holder_norms(grid, &diff, params)?;
    Ok(norms
        .iter()
        .enumerate()
        .map(|(i, n)| 0.5f64.powi(i as i32 + 1) * n.min(1.0))
        .sum())
}

/// Largest `‖u_t‖_{m,α,β}` over the slices of a path, for each `m`: the
/// smallest constant that bounds the path uniformly in time.
pub fn membership_constants(path: &PathField, params: &MetricParams) -> Result<Vec<f64>> {
    let mut best = vec![0.0f64; params.m_max];
    for slice in &path.slices {
        for (b, n) in best.iter_mut().zip(holder_norms(&path.grid, slice, params)?) {
            *b = b.max(n);
        }
    }
    Ok(best)
}

/// Finite measure as weighted atoms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Measure {
    pub positions: Vec<f64>,
    pub masses: Vec<f64>,
}

impl Measure {
    pub fn new(positions: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if positions.len() != masses.len() {
            return Err(Error::Dimension {
                what: "measure masses",
                expected: positions.len(),
                got: masses.len(),
            });
        }
        if let Some(index) = masses.iter().position(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::Validation(format!("measure mass at {index} is negative or non-finite")));
        }
        Ok(Measure { positions, masses })
    }

    pub fn dirac(x: f64) -> Self {
        Measure {
            positions: vec![x],
            masses: vec![1.0],
        }
    }

    pub fn total_mass(&self) -> f64 {
        pairwise_sum(&self.masses)
    }

    /// `⟨μ, f⟩`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        let terms: Vec<f64> = self.positions.iter().zip(&self.masses).map(|(&x, &m)| m * f(x)).collect();
        pairwise_sum(&terms)
    }

    pub fn mean(&self) -> f64 {
        self.integrate(|x| x) / self.total_mass()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MeasureRepr {
    /// Densities `w[step][i]` at points `ys` spaced `dx` apart.
    Density { ys: Vec<f64>, dx: f64, w: Vec<Vec<f64>> },
    Atoms(Vec<Measure>),
}

/// Time-indexed measures on the grid's time steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurePath {
    pub grid: Grid,
    pub times: Vec<f64>,
    pub repr: MeasureRepr,
    /// Probability-valued path (unit mass each step).
    pub probability: bool,
}

impl MeasurePath {
    pub fn from_atoms(grid: &Grid, times: Vec<f64>, steps: Vec<Measure>, probability: bool) -> Result<Self> {
        let p = MeasurePath {
            grid: grid.clone(),
            times,
            repr: MeasureRepr::Atoms(steps),
            probability,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_density(grid: &Grid, times: Vec<f64>, ys: Vec<f64>, dx: f64, w: Vec<Vec<f64>>, probability: bool) -> Result<Self> {
        let p = MeasurePath {
            grid: grid.clone(),
            times,
            repr: MeasureRepr::Density { ys, dx, w },
            probability,
        };
        p.validate()?;
        Ok(p)
    }

    /// Densities at cell midpoints, `(u_{i+1} − u_i)/dx`, of a monotone path.
    pub fn density_of(path: &PathField, probability: bool) -> Result<Self> {
        let g = &path.grid;
        let dx = g.dx();
        let mut w = Vec::with_capacity(path.slices.len());
        for slice in &path.slices {
            let xi = xi_map(g, slice)?;
            w.push(xi.masses.iter().map(|m| m / dx).collect());
        }
        Self::from_density(
            g,
            path.slices.iter().map(|s| s.t).collect(),
            g.midpoints(),
            dx,
            w,
            probability,
        )
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = match &self.repr {
            MeasureRepr::Density { ys, w, dx } => {
                if !(*dx > 0.0) {
                    return Err(Error::Validation("density spacing must be positive".into()));
                }
                for (s, row) in w.iter().enumerate() {
                    if row.len() != ys.len() {
                        return Err(Error::Dimension {
                            what: "density row",
                            expected: ys.len(),
                            got: row.len(),
                        });
                    }
                    if let Some(i) = row.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                        return Err(Error::Validation(format!(
                            "density at step {s}, point {i} is negative or non-finite ({})",
                            row[i]
                        )));
                    }
                }
                w.len()
            }
            MeasureRepr::Atoms(steps) => {
                for (s, m) in steps.iter().enumerate() {
                    if m.positions.len() != m.masses.len() {
                        return Err(Error::Validation(format!("atom arrays differ in length at step {s}")));
                    }
                    if m.masses.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                        return Err(Error::Validation(format!("negative atom mass at step {s}")));
                    }
                }
                steps.len()
            }
        };
        if n != self.times.len() {
            return Err(Error::Dimension {
                what: "measure path steps",
                expected: self.times.len(),
                got: n,
            });
        }
        if self.probability {
            for s in 0..n {
                let mass = self.at(s).total_mass();
                if (mass - 1.0).abs() > 1e-6 {
                    return Err(Error::Validation(format!("step {s} has mass {mass}, expected 1")));
                }
            }
        }
        Ok(())
    }

    /// The measure at step `s` as atoms.
    pub fn at(&self, s: usize) -> Measure {
        match &self.repr {
            MeasureRepr::Density { ys, dx, w } => Measure {
                positions: ys.clone(),
                masses: w[s].iter().map(|v| v * dx).collect(),
            },
            MeasureRepr::Atoms(steps) => steps[s].clone(),
        }
    }

    /// CSV with columns `t,y,mass`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,y,mass")?;
        for (s, t) in self.times.iter().enumerate() {
            let m = self.at(s);
            for (x, mass) in m.positions.iter().zip(&m.masses) {
                writeln!(w, "{t},{x},{mass}")?;
            }
        }
        Ok(())
    }
}

const MONOTONE_TOL: f64 = 1e-12;

/// Stieltjes measure of a nondecreasing field: atoms at cell midpoints with
/// masses `u(y_{i+1}) − u(y_i)`.
pub fn xi_map(grid: &Grid, u: &Field) -> Result<Measure> {
    grid.check_len("field", u.len())?;
    let scale = u.values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut masses = Vec::with_capacity(grid.ny - 1);
    for (i, w) in u.values.windows(2).enumerate() {
        let d = w[1] - w[0];
        if d < -MONOTONE_TOL * scale || !d.is_finite() {
            return Err(Error::Validation(format!(
                "field decreases between points {i} and {} by {}",
                i + 1,
                -d
            )));
        }
        masses.push(d.max(0.0));
    }
    Ok(Measure {
        positions: grid.midpoints(),
        masses,
    })
}

/// Probability measure whose distribution function is `u`.
pub fn psi_map(grid: &Grid, u: &Field) -> Result<Measure> {
    let n = u.len();
    if n == 0 || u.values[0].abs() > 1e-6 || (u.values[n - 1] - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!(
            "distribution function must run from 0 to 1, got {} .. {}",
            u.values.first().copied().unwrap_or(f64::NAN),
            u.values.last().copied().unwrap_or(f64::NAN)
        )));
    }
    let mut m = xi_map(grid, u)?;
    let total = m.total_mass();
    for v in &mut m.masses {
        *v /= total;
    }
    Ok(m)
}

fn bump(x: f64) -> f64 {
    if x.abs() < 1.0 {
        (-1.0 / (1.0 - x * x)).exp()
    } else {
        0.0
    }
}

// Smooth and compactly supported, so the midpoint rule converges faster than
// any power.
fn midpoint_rule(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64 + Copy) -> f64 {
    let h = (hi - lo) / n as f64;
    crate::grid::pairwise_sum_by(n, |i| f(lo + (i as f64 + 0.5) * h)) * h
}

/// Normalizing constant `K` of the mollifier `ρ(x) = K exp(−1/(1−x²)) 1_{|x|<1}`.
pub fn mollifier_constant() -> f64 {
    static K: OnceLock<f64> = OnceLock::new();
    *K.get_or_init(|| 1.0 / midpoint_rule(-1.0, 1.0, 20_000, bump))
}

pub fn mollifier(x: f64) -> f64 {
    mollifier_constant() * bump(x)
}

/// `J_β(x) = ∫ e^{−β|y|} ρ(x − y) dy`.
pub fn mollified_weight(beta: f64, x: f64) -> f64 {
    let f = |z: f64| mollifier(z) * (-beta * (x - z).abs()).exp();
    // split at the kink of |x − z|
    if x.abs() < 1.0 {
        // the integrand is only piecewise smooth here: one Richardson step
        let piece = |lo: f64, hi: f64| (4.0 * midpoint_rule(lo, hi, 2_000, f) - midpoint_rule(lo, hi, 1_000, f)) / 3.0;
        piece(-1.0, x) + piece(x, 1.0)
    } else {
        midpoint_rule(-1.0, 1.0, 4_000, f)
    }
}

/// `(c₀, C₀)` with `c₀ e^{−β|x|} ≤ J_β(x) ≤ C₀ e^{−β|x|}`, from a scan of
/// `x ∈ [−3, 3]`. Outside `[−1, 1]` the ratio is constant.
pub fn sandwich_constants(beta: f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..=600 {
        let x = -3.0 + 0.01 * i as f64;
        let r = mollified_weight(beta, x) * (beta * x.abs()).exp();
        lo = lo.min(r);
        hi = hi.max(r);
    }
    (lo, hi)
}

pub const DICTIONARY_CENTERS: [f64; 8] = [-3.5, -2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 3.5];

/// Number of functions in [`test_function`]'s dictionary.
pub const DICTIONARY_LEN: usize = 21;

/// The bounded test functions used by [`weak_metric`]:
///
/// * `0`: `f ≡ 1`
/// * `1..=3`: `clip(x^k, −1, 1)` for `k = 1, 2, 3`
/// * `4`: `clip(x/4, −1, 1)`
/// * `5..=12`: `exp(−(x − c)²/2)` for `c` in [`DICTIONARY_CENTERS`]
/// * `13..=20`: `½(1 + tanh(x − c))` for the same centers
pub fn test_function(index: usize, x: f64) -> f64 {
    match index {
        0 => 1.0,
        1..=3 => x.powi(index as i32).clamp(-1.0, 1.0),
        4 => (x / 4.0).clamp(-1.0, 1.0),
        5..=12 => {
            let c = DICTIONARY_CENTERS[index - 5];
            (-(x - c) * (x - c) / 2.0).exp()
        }
        13..=20 => 0.5 * (1.0 + (x - DICTIONARY_CENTERS[index - 13]).tanh()),
        _ => panic!("test function index {index} out of range"),
    }
}

/// `sup_f |∫ f e^{−β|x|} d(μ − ν)|` over the 21-function dictionary. This is
/// a pseudometric for the weighted weak topology.
pub fn weak_metric(mu: &Measure, nu: &Measure, beta: f64) -> f64 {
    (0..DICTIONARY_LEN)
        .map(|k| {
            let f = |x: f64| test_function(k, x) * (-beta * x.abs()).exp();
            (mu.integrate(f) - nu.integrate(f)).abs()
        })
        .fold(0.0, f64::max)
}
