//! Deterministic controls `h_s(a)` on the time × noise grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{pairwise_sum, Grid, PathField};
use crate::models::ModelSpec;

/// Control values `h[step][cell]`, piecewise constant on the grid cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub nt: usize,
    pub na: usize,
    values: Vec<f64>,
    /// Optional energy budget `N` of the ball `∫‖k_s‖² ds ≤ N`.
    pub budget: Option<f64>,
}

impl Control {
    pub fn zeros(grid: &Grid) -> Self {
        Control {
            nt: grid.nt,
            na: grid.na,
            values: vec![0.0; grid.nt * grid.na],
            budget: None,
        }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nt * grid.na {
            return Err(Error::Dimension {
                what: "control values",
                expected: grid.nt * grid.na,
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "control",
                index,
            });
        }
        Ok(Control {
            nt: grid.nt,
            na: grid.na,
            values,
            budget: None,
        })
    }

    /// Samples `h(t, a)` at step start times and cell midpoints.
    pub fn from_fn(grid: &Grid, h: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.nt * grid.na);
        for n in 0..grid.nt {
            let t = grid.t(n);
            for k in 0..grid.na {
                values.push(h(t, grid.a_mid(k)));
            }
        }
        Self::from_values(grid, values)
    }

    pub fn with_budget(mut self, budget: f64) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn step(&self, n: usize) -> &[f64] {
        &self.values[n * self.na..(n + 1) * self.na]
    }

    pub fn step_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.values[n * self.na..(n + 1) * self.na]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        if self.nt != grid.nt || self.na != grid.na {
            return Err(Error::Dimension {
                what: "control grid (nt*na)",
                expected: grid.nt * grid.na,
                got: self.nt * self.na,
            });
        }
        Ok(())
    }

    /// Whether `∫‖k_s‖² ds = 2·energy` stays within the budget, if one is set.
    pub fn within_budget(&self, grid: &Grid) -> bool {
        self.budget
            .is_none_or(|n| 2.0 * control_energy(self, grid) <= n * (1.0 + 1e-12))
    }

    pub fn write_csv<W: std::io::Write>(&self, grid: &Grid, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,a,h")?;
        for n in 0..self.nt {
            for k in 0..self.na {
                writeln!(w, "{},{},{}", grid.t(n), grid.a_mid(k), self.step(n)[k])?;
            }
        }
        Ok(())
    }
}

/// `½ ∬ |h|² da ds`.
pub fn control_energy(h: &Control, grid: &Grid) -> f64 {
    0.5 * pairwise_sum(&h.values.iter().map(|v| v * v).collect::<Vec<_>>()) * grid.dt() * grid.da()
}

/// `h_s(a) = Σ_j k_s^j φ_j(a)` with the normalized cell indicators, i.e.
/// `h = k / √da` cell by cell.
pub fn zeta(k: &[f64], grid: &Grid) -> Result<Control> {
    let s = grid.da().sqrt();
    Control::from_values(grid, k.iter().map(|v| v / s).collect())
}

/// Coefficients `k_s^j = ⟨h_s, φ_j⟩ = h · √da`.
pub fn zeta_inverse(h: &Control, grid: &Grid) -> Vec<f64> {
    let s = grid.da().sqrt();
    h.values.iter().map(|v| v * s).collect()
}

/// `∫ ‖k_s‖²_{ℓ₂} ds` for coefficient sequences.
pub fn coefficient_energy(k: &[f64], grid: &Grid) -> f64 {
    pairwise_sum(&k.iter().map(|v| v * v).collect::<Vec<_>>()) * grid.dt()
}

/// Removes the per-step mean over `a ∈ [0, 1]`.
pub fn center_control_fv(h: &Control, grid: &Grid) -> Result<Control> {
    if grid.a_min != 0.0 || grid.a_max != 1.0 {
        return Err(Error::Grid("centering needs the [0,1] noise window".into()));
    }
    let mut out = h.clone();
    for n in 0..h.nt {
        let row = out.step_mut(n);
        let mean = pairwise_sum(row) / row.len() as f64;
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
    Ok(out)
}

/// Solution of the controlled equation (the γ map).
pub fn solve_controlled(model: &ModelSpec, h: &Control, grid: &Grid) -> Result<PathField> {
    crate::solver::solve_spde(model, 0.0, Some(h), None, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoundaryCondition;

    fn grid(na: usize) -> Grid {
        Grid::new(4.0, 41, 1.0, 20, 0.0, 1.0, na, BoundaryCondition::DirichletPinned).unwrap()
    }

    #[test]
    fn energy_values() {
        let g = grid(8);
        assert_eq!(control_energy(&Control::zeros(&g), &g), 0.0);
        let c = Control::from_fn(&g, |_, _| 3.0).unwrap();
        assert!((control_energy(&c, &g) - 4.5).abs() < 1e-12);
        // value 2 on the first half of the cells
        let c = Control::from_fn(&g, |_, a| if a < 0.5 { 2.0 } else { 0.0 }).unwrap();
        let count = (g.nt * g.na / 2) as f64;
        assert!((control_energy(&c, &g) - 0.5 * 4.0 * g.dt() * g.da() * count).abs() < 1e-12);
    }

    #[test]
    fn zeta_reshape() {
        let g = grid(4);
        let k = vec![0.0; g.nt * g.na];
        assert!(zeta(&k, &g).unwrap().values().iter().all(|&v| v == 0.0));
        let mut k = vec![0.0; g.nt * g.na];
        k[5] = 1.0;
        let h = zeta(&k, &g).unwrap();
        assert_eq!(h.values()[5], 2.0);
        let back = zeta_inverse(&h, &g);
        assert_eq!(back, k);
        assert!(zeta(&k[..3], &g).is_err());
    }

    #[test]
    fn parseval_for_indicator_basis() {
        let g = grid(8);
        let k: Vec<f64> = (0..g.nt * g.na).map(|i| ((i * 7919) % 113) as f64 / 50.0 - 1.1).collect();
        let h = zeta(&k, &g).unwrap();
        let lhs = coefficient_energy(&k, &g);
        let rhs = 2.0 * control_energy(&h, &g);
        assert!((lhs - rhs).abs() <= 1e-12 * lhs);
        let budgeted = h.clone().with_budget(lhs * 1.01);
        assert!(budgeted.within_budget(&g));
        assert!(!h.with_budget(lhs * 0.5).within_budget(&g));
    }

    #[test]
    fn centering() {
        let g = grid(10);
        let h = Control::from_fn(&g, |_, a| a).unwrap();
        let c = center_control_fv(&h, &g).unwrap();
        for n in 0..g.nt {
            for k in 0..g.na {
                assert!((c.step(n)[k] - (g.a_mid(k) - 0.5)).abs() < 1e-15);
            }
        }
        let again = center_control_fv(&c, &g).unwrap();
        for (a, b) in again.values().iter().zip(c.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(control_energy(&c, &g) <= control_energy(&h, &g));
        let sbm_grid = Grid::new(4.0, 41, 1.0, 20, -1.0, 1.0, 10, BoundaryCondition::Neumann).unwrap();
        assert!(center_control_fv(&Control::zeros(&sbm_grid), &sbm_grid).is_err());
    }
}
