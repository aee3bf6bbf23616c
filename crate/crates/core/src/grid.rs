//! Space, time and noise-space discretization, plus the heat semigroup.
//!
//! Space is the truncated line `[-L, L]` sampled at `ny` points, time is
//! `[0, T]` split into `nt` steps and the noise space is an interval
//! `[a_min, a_max]` split into `na` cells. Every solver in the crate is built
//! on the implicit heat step defined here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    /// Zero flux at both ends.
    Neumann,
    /// End values are held fixed (`u(-L)=0`, `u(L)=1` for distribution functions).
    DirichletPinned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub half_width: f64,
    pub ny: usize,
    pub horizon: f64,
    pub nt: usize,
    pub a_min: f64,
    pub a_max: f64,
    pub na: usize,
    pub bc: BoundaryCondition,
}

impl Grid {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        half_width: f64,
        ny: usize,
        horizon: f64,
        nt: usize,
        a_min: f64,
        a_max: f64,
        na: usize,
        bc: BoundaryCondition,
    ) -> Result<Self> {
        let grid = Grid {
            half_width,
            ny,
            horizon,
            nt,
            a_min,
            a_max,
            na,
            bc,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Builds a grid from spacings instead of point counts.
    #[allow(clippy::too_many_arguments)]
    pub fn with_spacing(
        half_width: f64,
        dx: f64,
        horizon: f64,
        dt: f64,
        a_min: f64,
        a_max: f64,
        na: usize,
        bc: BoundaryCondition,
    ) -> Result<Self> {
        if !(dx > 0.0 && dt > 0.0) {
            return Err(Error::Grid(format!("spacings must be positive (dx={dx}, dt={dt})")));
        }
        let ny = (2.0 * half_width / dx).round() as usize + 1;
        let nt = (horizon / dt).round() as usize;
        Self::new(half_width, ny, horizon, nt, a_min, a_max, na, bc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(Error::Grid(format!("half width must be positive, got {}", self.half_width)));
        }
        if self.ny < 3 {
            return Err(Error::Grid(format!("need at least 3 spatial points, got {}", self.ny)));
        }
        if self.nt < 1 {
            return Err(Error::Grid("need at least one time step".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Grid(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.na < 1 {
            return Err(Error::Grid("need at least one noise cell".into()));
        }
        if !(self.a_min < self.a_max) {
            return Err(Error::Grid(format!(
                "noise window must satisfy a_min < a_max, got [{}, {}]",
                self.a_min, self.a_max
            )));
        }
        // quality gate for the explicit noise increment
        if self.dt() > self.dx() * (1.0 + 1e-12) {
            return Err(Error::Grid(format!(
                "time step {} exceeds spatial step {}",
                self.dt(),
                self.dx()
            )));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / (self.ny - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.nt as f64
    }

    pub fn da(&self) -> f64 {
        (self.a_max - self.a_min) / self.na as f64
    }

    pub fn y(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.dx()
    }

    pub fn ys(&self) -> Vec<f64> {
        (0..self.ny).map(|i| self.y(i)).collect()
    }

    /// Midpoints of the spatial cells, where Stieltjes masses are placed.
    pub fn midpoints(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.ny - 1).map(|i| self.y(i) + 0.5 * dx).collect()
    }

    pub fn t(&self, step: usize) -> f64 {
        step as f64 * self.dt()
    }

    pub fn a_edge(&self, k: usize) -> f64 {
        self.a_min + k as f64 * self.da()
    }

    pub fn a_mid(&self, k: usize) -> f64 {
        self.a_min + (k as f64 + 0.5) * self.da()
    }

    /// Trapezoidal quadrature weights (already multiplied by `dx`).
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let dx = self.dx();
        let mut w = vec![dx; self.ny];
        w[0] = 0.5 * dx;
        w[self.ny - 1] = 0.5 * dx;
        w
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        let w = self.trapezoid_weights();
        pairwise_sum_by(values.len(), |i| w[i] * values[i])
    }

    pub fn with_noise_window(&self, a_min: f64, a_max: f64, na: usize) -> Result<Self> {
        Grid::new(self.half_width, self.ny, self.horizon, self.nt, a_min, a_max, na, self.bc)
    }

    pub fn with_bc(&self, bc: BoundaryCondition) -> Self {
        Grid { bc, ..self.clone() }
    }

    pub(crate) fn check_len(&self, what: &'static str, len: usize) -> Result<()> {
        if len != self.ny {
            return Err(Error::Dimension {
                what,
                expected: self.ny,
                got: len,
            });
        }
        Ok(())
    }
}

/// Spatial slice `u_t(.)` on the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub t: f64,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(t: f64, values: Vec<f64>) -> Self {
        Field { t, values }
    }

    pub fn from_fn(grid: &Grid, t: f64, f: impl Fn(f64) -> f64) -> Self {
        Field {
            t,
            values: grid.ys().into_iter().map(f).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { what, index }),
            None => Ok(()),
        }
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Full time-indexed solution with `nt + 1` slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathField {
    pub grid: Grid,
    pub slices: Vec<Field>,
    /// Total discrete L1 mass moved by the monotone projection over the run.
    pub projection_l1: f64,
}

impl PathField {
    pub fn terminal(&self) -> &Field {
        self.slices.last().expect("path has at least the initial slice")
    }

    pub fn initial(&self) -> &Field {
        &self.slices[0]
    }

    /// Writes `t,y,u` rows; every `stride`-th time slice is emitted.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W, stride: usize) -> std::io::Result<()> {
        writeln!(w, "t,y,u")?;
        let ys = self.grid.ys();
        let stride = stride.max(1);
        for (n, slice) in self.slices.iter().enumerate() {
            if n % stride != 0 && n + 1 != self.slices.len() {
                continue;
            }
            for (y, u) in ys.iter().zip(&slice.values) {
                writeln!(w, "{},{},{}", slice.t, y, u)?;
            }
        }
        Ok(())
    }
}

/// Gaussian density with variance `t`.
pub fn heat_kernel(t: f64, x: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("heat kernel needs t > 0, got {t}")));
    }
    Ok((-x * x / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt())
}

pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Gaussian convolution of the sampled datum by trapezoidal quadrature.
///
/// Beyond `[-L, L]` the datum is continued by its end values, whose
/// contribution is added in closed form; for data that decay at the ends this
/// is exactly the truncated quadrature, and constants are reproduced exactly.
pub fn heat_flow_exact(grid: &Grid, f: &Field, t: f64) -> Result<Field> {
    grid.check_len("initial datum", f.len())?;
    if t < 0.0 {
        return Err(Error::Domain(format!("heat flow needs t >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(Field::new(f.t, f.values.clone()));
    }
    let ys = grid.ys();
    let w = grid.trapezoid_weights();
    let sd = t.sqrt();
    let left = f.values[0];
    let right = f.values[grid.ny - 1];
    let l = grid.half_width;
    let dx = grid.dx();
    let n = grid.ny;
    let v = &f.values;
    let (d_left, d_right) = if n >= 3 {
        (
            (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * dx),
            (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * dx),
        )
    } else {
        ((v[n - 1] - v[0]) / dx, (v[n - 1] - v[0]) / dx)
    };
    let values = ys
        .iter()
        .map(|&y| {
            let bulk = pairwise_sum_by(ys.len(), |i| {
                let d = y - ys[i];
                w[i] * f.values[i] * (-d * d / (2.0 * t)).exp()
            }) / (2.0 * std::f64::consts::PI * t).sqrt();
            // Euler-Maclaurin end correction: -dx²/12 · (g'(L) - g'(-L))
            let g_prime = |x: f64, fx: f64, dfx: f64| {
                let d = y - x;
                let p = (-d * d / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt();
                p * (dfx + fx * d / t)
            };
            let g_third = |x: f64, fx: f64| {
                let d = y - x;
                let p = (-d * d / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt();
                fx * p * (d * d * d / (t * t * t) - 3.0 * d / (t * t))
            };
            let corr = -dx * dx / 12.0 * (g_prime(l, right, d_right) - g_prime(-l, left, d_left))
                + dx.powi(4) / 720.0 * (g_third(l, right) - g_third(-l, left));
            bulk + corr + left * normal_cdf((-l - y) / sd) + right * normal_cdf((y - l) / sd)
        })
        .collect();
    Ok(Field::new(f.t + t, values))
}

/// Tridiagonal matrix with a precomputed Thomas factorization.
#[derive(Clone, Debug)]
pub struct Tridiagonal {
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
    c_prime: Vec<f64>,
    denom: Vec<f64>,
}

impl Tridiagonal {
    /// `sub[0]` and `sup[n-1]` are ignored.
    pub fn new(sub: Vec<f64>, diag: Vec<f64>, sup: Vec<f64>) -> Result<Self> {
        let n = diag.len();
        let mut c_prime = vec![0.0; n];
        let mut denom = vec![0.0; n];
        for i in 0..n {
            let d = if i == 0 {
                diag[0]
            } else {
                diag[i] - sub[i] * c_prime[i - 1]
            };
            if d == 0.0 || !d.is_finite() {
                return Err(Error::Singular(i));
            }
            denom[i] = d;
            c_prime[i] = if i + 1 < n { sup[i] / d } else { 0.0 };
        }
        Ok(Tridiagonal {
            sub,
            diag,
            sup,
            c_prime,
            denom,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let n = self.diag.len();
        let mut sub = vec![0.0; n];
        let mut sup = vec![0.0; n];
        for i in 0..n {
            if i > 0 {
                sub[i] = self.sup[i - 1];
            }
            if i + 1 < n {
                sup[i] = self.sub[i + 1];
            }
        }
        Tridiagonal::new(sub, self.diag.clone(), sup)
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = self.diag.len();
        rhs[0] /= self.denom[0];
        for i in 1..n {
            rhs[i] = (rhs[i] - self.sub[i] * rhs[i - 1]) / self.denom[i];
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= self.c_prime[i] * rhs[i + 1];
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        (0..n)
            .map(|i| {
                let mut v = self.diag[i] * x[i];
                if i > 0 {
                    v += self.sub[i] * x[i - 1];
                }
                if i + 1 < n {
                    v += self.sup[i] * x[i + 1];
                }
                v
            })
            .collect()
    }
}

/// Backward-Euler solver for `du/dt = ½ u''` with the grid's boundary rule.
#[derive(Clone, Debug)]
pub struct HeatSolver {
    forward: Tridiagonal,
    adjoint: Tridiagonal,
}

impl HeatSolver {
    pub fn new(grid: &Grid, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("heat step needs dt > 0, got {dt}")));
        }
        let n = grid.ny;
        let r = dt / (grid.dx() * grid.dx());
        let mut sub = vec![-0.5 * r; n];
        let mut diag = vec![1.0 + r; n];
        let mut sup = vec![-0.5 * r; n];
        match grid.bc {
            BoundaryCondition::Neumann => {
                // ghost-point reflection doubles the inward coupling
                sup[0] = -r;
                sub[n - 1] = -r;
            }
            BoundaryCondition::DirichletPinned => {
                diag[0] = 1.0;
                sup[0] = 0.0;
                diag[n - 1] = 1.0;
                sub[n - 1] = 0.0;
            }
        }
        sub[0] = 0.0;
        sup[n - 1] = 0.0;
        let forward = Tridiagonal::new(sub, diag, sup)?;
        let adjoint = forward.transpose()?;
        Ok(HeatSolver { forward, adjoint })
    }

    pub fn step_in_place(&self, u: &mut [f64]) {
        self.forward.solve_in_place(u);
    }

    pub fn adjoint_in_place(&self, v: &mut [f64]) {
        self.adjoint.solve_in_place(v);
    }

    pub fn matrix(&self) -> &Tridiagonal {
        &self.forward
    }
}

/// One implicit step `(I - ½ dt Δ_h) u_next = u`.
pub fn heat_step(grid: &Grid, u: &Field, dt: f64) -> Result<Field> {
    grid.check_len("heat step input", u.len())?;
    let solver = HeatSolver::new(grid, dt)?;
    let mut values = u.values.clone();
    solver.step_in_place(&mut values);
    let out = Field::new(u.t + dt, values);
    out.check_finite("heat step output")?;
    Ok(out)
}

/// Pairwise summation of `f(0) + ... + f(n-1)`; result does not depend on
/// how callers chunk their work.
pub fn pairwise_sum_by(n: usize, f: impl Fn(usize) -> f64 + Copy) -> f64 {
    fn rec(lo: usize, hi: usize, f: impl Fn(usize) -> f64 + Copy) -> f64 {
        if hi - lo <= 16 {
            let mut s = 0.0;
            for i in lo..hi {
                s += f(i);
            }
            s
        } else {
            let mid = lo + (hi - lo) / 2;
            rec(lo, mid, f) + rec(mid, hi, f)
        }
    }
    if n == 0 {
        0.0
    } else {
        rec(0, n, f)
    }
}

pub fn pairwise_sum(xs: &[f64]) -> f64 {
    pairwise_sum_by(xs.len(), |i| xs[i])
}
