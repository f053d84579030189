//! Partition of the characteristic axis and piecewise-constant densities.
//!
//! A [`LambdaGrid`] splits `[λ_min, λ_max]` into half-open cells
//! `[λ_i, λ_{i+1})`; the top edge `λ_max` belongs to the last cell. A
//! [`BinDensity`] holds one nonnegative value per cell and is read as the
//! step function `Σ_i ρ^i 1_{Λ_i}`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FlocError, Result};
use crate::kernels::KernelSet;
use crate::quadrature::GaussRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    Uniform,
    Geometric,
    Explicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid {
    edges: Vec<f64>,
    spacing: Spacing,
}

impl LambdaGrid {
    /// Build `cells` cells between `lambda_min` and `lambda_max`.
    ///
    /// Geometric spacing uses the constant ratio `(λ_max/λ_min)^(1/cells)`.
    /// The first and last edges are exactly the requested bounds.
    pub fn new(lambda_min: f64, lambda_max: f64, cells: usize, spacing: Spacing) -> Result<Self> {
        if !(lambda_min > 0.0) || !lambda_min.is_finite() {
            return Err(FlocError::param("lambda_min", "must be positive"));
        }
        if !(lambda_max > lambda_min) || !lambda_max.is_finite() {
            return Err(FlocError::param("lambda_max", "must exceed lambda_min"));
        }
        if cells == 0 {
            return Err(FlocError::param("bins", "need at least one cell"));
        }
        let mut edges: Vec<f64> = match spacing {
            Spacing::Uniform | Spacing::Explicit => {
                let h = (lambda_max - lambda_min) / cells as f64;
                (0..=cells).map(|i| lambda_min + h * i as f64).collect()
            }
            Spacing::Geometric => {
                let ratio = (lambda_max / lambda_min).powf(1.0 / cells as f64);
                (0..=cells)
                    .map(|i| lambda_min * ratio.powi(i as i32))
                    .collect()
            }
        };
        edges[0] = lambda_min;
        edges[cells] = lambda_max;
        let spacing = if spacing == Spacing::Explicit {
            Spacing::Uniform
        } else {
            spacing
        };
        Self::checked(edges, spacing)
    }

    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        Self::checked(edges, Spacing::Explicit)
    }

    fn checked(edges: Vec<f64>, spacing: Spacing) -> Result<Self> {
        if edges.len() < 2 {
            return Err(FlocError::param("edges", "need at least two edges"));
        }
        if !(edges[0] > 0.0) {
            return Err(FlocError::param("edges", "first edge must be positive"));
        }
        if edges.iter().any(|e| !e.is_finite()) {
            return Err(FlocError::param("edges", "edges must be finite"));
        }
        if edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(FlocError::param(
                "edges",
                "edges must be strictly increasing",
            ));
        }
        Ok(Self { edges, spacing })
    }

    /// Subdivide every cell into `factor` cells of the same kind, keeping all
    /// original edges.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(FlocError::param("factor", "must be at least 1"));
        }
        let mut edges = Vec::with_capacity(self.len() * factor + 1);
        for i in 0..self.len() {
            let (lo, hi) = self.cell(i);
            for s in 0..factor {
                let t = s as f64 / factor as f64;
                let e = match self.spacing {
                    Spacing::Geometric => lo * (hi / lo).powf(t),
                    _ => lo + (hi - lo) * t,
                };
                edges.push(e);
            }
        }
        edges.push(self.lambda_max());
        Self::checked(edges, self.spacing)
    }

    /// Number of cells.
    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn lambda_min(&self) -> f64 {
        self.edges[0]
    }

    pub fn lambda_max(&self) -> f64 {
        self.edges[self.edges.len() - 1]
    }

    pub fn cell(&self, i: usize) -> (f64, f64) {
        (self.edges[i], self.edges[i + 1])
    }

    pub fn width(&self, i: usize) -> f64 {
        self.edges[i + 1] - self.edges[i]
    }

    pub fn widths(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        0.5 * (self.edges[i] + self.edges[i + 1])
    }

    /// Cell containing `lambda`; `λ_max` maps to the last cell.
    pub fn bin_index(&self, lambda: f64) -> Option<usize> {
        let n = self.len();
        if !(lambda >= self.edges[0]) || lambda > self.edges[n] {
            return None;
        }
        if lambda == self.edges[n] {
            return Some(n - 1);
        }
        // first edge strictly greater than lambda, minus one
        Some(self.edges.partition_point(|e| *e <= lambda) - 1)
    }

    /// Mean of `f` over each cell with a per-cell Gauss–Legendre rule.
    ///
    /// Weights are renormalized and the sum is taken relative to the first
    /// sample, so a constant function has an exactly constant mean.
    pub fn cell_means<F: FnMut(f64) -> f64>(&self, order: usize, mut f: F) -> Result<Vec<f64>> {
        let rule = GaussRule::new(order)?;
        Ok((0..self.len())
            .map(|i| {
                let (lo, hi) = self.cell(i);
                let samples: Vec<(f64, f64)> =
                    rule.mapped(lo, hi).map(|(x, w)| (f(x), w)).collect();
                let wsum: f64 = samples.iter().map(|s| s.1).sum();
                // offset by the first sample so constants come out exact
                let base = samples[0].0;
                base + samples
                    .iter()
                    .map(|(v, w)| w / wsum * (v - base))
                    .sum::<f64>()
            })
            .collect())
    }
}

/// Piecewise-constant mass density over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinDensity {
    grid: Arc<LambdaGrid>,
    values: Vec<f64>,
}

impl BinDensity {
    pub fn new(grid: Arc<LambdaGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(FlocError::GridMismatch(format!(
                "{} values for {} cells",
                values.len(),
                grid.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(FlocError::domain(
                *v,
                "bin densities must be finite and nonnegative",
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<LambdaGrid>) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn grid(&self) -> &Arc<LambdaGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Replace the values; same validation as [`BinDensity::new`].
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.grid.clone(), values)
    }

    /// `Σ_i |Λ_i| ρ^i`; exact for a piecewise constant.
    pub fn total_mass(&self) -> f64 {
        self.grid
            .edges
            .windows(2)
            .zip(&self.values)
            .map(|(w, r)| (w[1] - w[0]) * r)
            .sum()
    }

    /// Value of the step function at `lambda` (zero outside the grid).
    pub fn eval(&self, lambda: f64) -> f64 {
        self.grid.bin_index(lambda).map_or(0.0, |i| self.values[i])
    }
}

/// Result of projecting a function onto a grid.
#[derive(Debug, Clone)]
pub struct Projection {
    pub density: BinDensity,
    /// Cells whose quadrature mean came out negative and was clipped to zero.
    pub clipped: usize,
}

/// Cell averages `ρ^i = (1/|Λ_i|) ∫_{Λ_i} ρ_fn` by per-cell Gauss–Legendre.
pub fn project<F: FnMut(f64) -> f64>(
    rho_fn: F,
    grid: &Arc<LambdaGrid>,
    quad_order: usize,
) -> Result<Projection> {
    let mut values = grid.cell_means(quad_order, rho_fn)?;
    let mut clipped = 0;
    for v in values.iter_mut() {
        if !v.is_finite() {
            return Err(FlocError::domain(*v, "projected density is not finite"));
        }
        if *v < 0.0 {
            *v = 0.0;
            clipped += 1;
        }
    }
    Ok(Projection {
        density: BinDensity::new(grid.clone(), values)?,
        clipped,
    })
}

pub fn total_mass(rho: &BinDensity) -> f64 {
    rho.total_mass()
}

/// Number density `∫ ρ/m dλ`; the cell integrals of `1/m` are taken in
/// closed form from the kernel set's power-law mass.
pub fn number_total(rho: &BinDensity, kernels: &KernelSet) -> f64 {
    let g = rho.grid();
    rho.values()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (lo, hi) = g.cell(i);
            r * kernels.inverse_mass_integral(lo, hi)
        })
        .sum()
}

/// `∫ ρ f dλ` by per-cell quadrature of `f`.
pub fn weighted_mass<F: FnMut(f64) -> f64>(
    rho: &BinDensity,
    f: F,
    quad_order: usize,
) -> Result<f64> {
    let means = rho.grid().cell_means(quad_order, f)?;
    Ok(weighted_mass_with_means(rho, &means))
}

pub(crate) fn weighted_mass_with_means(rho: &BinDensity, means: &[f64]) -> f64 {
    rho.grid
        .edges
        .windows(2)
        .zip(&rho.values)
        .zip(means)
        .map(|((w, r), f)| (w[1] - w[0]) * r * f)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len()
            && a.iter()
                .zip(b)
                .all(|(x, y)| (x - y).abs() <= 1e-12 * y.abs().max(1.0))
    }

    #[test]
    fn make_grid_examples() {
        let g = LambdaGrid::new(1.0, 2.0, 1, Spacing::Uniform).unwrap();
        assert_eq!(g.edges(), &[1.0, 2.0]);
        let g = LambdaGrid::new(1.0, 16.0, 4, Spacing::Geometric).unwrap();
        assert!(close(g.edges(), &[1.0, 2.0, 4.0, 8.0, 16.0]));
        let g = LambdaGrid::new(5.0, 10.0, 5, Spacing::Uniform).unwrap();
        assert!(close(g.edges(), &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]));
        assert_eq!(g.edges()[5], 10.0);
    }

    #[test]
    fn make_grid_errors() {
        assert!(LambdaGrid::new(0.0, 2.0, 3, Spacing::Uniform).is_err());
        assert!(LambdaGrid::new(-1.0, 2.0, 3, Spacing::Uniform).is_err());
        assert!(LambdaGrid::new(3.0, 2.0, 3, Spacing::Geometric).is_err());
        assert!(LambdaGrid::new(1.0, 2.0, 0, Spacing::Uniform).is_err());
        assert!(LambdaGrid::from_edges(vec![1.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn bin_index_is_half_open() {
        let g = LambdaGrid::new(1.0, 4.0, 3, Spacing::Uniform).unwrap();
        assert_eq!(g.bin_index(1.0), Some(0));
        assert_eq!(g.bin_index(2.0), Some(1));
        assert_eq!(g.bin_index(3.999), Some(2));
        assert_eq!(g.bin_index(4.0), Some(2));
        assert_eq!(g.bin_index(0.5), None);
        assert_eq!(g.bin_index(4.5), None);
    }

    #[test]
    fn refine_keeps_edges() {
        let g = LambdaGrid::new(1.0, 16.0, 4, Spacing::Geometric).unwrap();
        let f = g.refine(3).unwrap();
        assert_eq!(f.len(), 12);
        for (i, e) in g.edges().iter().enumerate() {
            assert_eq!(f.edges()[3 * i], *e);
        }
    }

    #[test]
    fn project_examples() {
        let g = Arc::new(LambdaGrid::new(1.0, 9.0, 7, Spacing::Geometric).unwrap());
        let p = project(|_| 2.5, &g, 4).unwrap();
        assert!(p.density.values().iter().all(|v| *v == 2.5));
        let one = Arc::new(LambdaGrid::new(1.0, 3.0, 1, Spacing::Uniform).unwrap());
        let p = project(|x| x, &one, 4).unwrap();
        assert!((p.density.values()[0] - 2.0).abs() < 1e-14);
        assert_eq!(p.clipped, 0);
    }

    #[test]
    fn project_clips_negative() {
        let g = Arc::new(LambdaGrid::new(1.0, 3.0, 2, Spacing::Uniform).unwrap());
        let p = project(|x| x - 2.0, &g, 4).unwrap();
        assert_eq!(p.clipped, 1);
        assert_eq!(p.density.values()[0], 0.0);
        assert!((p.density.values()[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn total_mass_examples() {
        let g = Arc::new(LambdaGrid::new(1.0, 3.0, 1, Spacing::Uniform).unwrap());
        assert_eq!(BinDensity::zeros(g.clone()).total_mass(), 0.0);
        let r = BinDensity::new(g, vec![2.0]).unwrap();
        assert_eq!(r.total_mass(), 4.0);
    }

    #[test]
    fn negative_density_rejected() {
        let g = Arc::new(LambdaGrid::new(1.0, 3.0, 2, Spacing::Uniform).unwrap());
        assert!(BinDensity::new(g.clone(), vec![1.0, -1e-300]).is_err());
        assert!(BinDensity::new(g, vec![1.0]).is_err());
    }

    #[test]
    fn weighted_mass_with_unit_weight_is_total_mass() {
        let g = Arc::new(LambdaGrid::new(1.0, 50.0, 17, Spacing::Geometric).unwrap());
        let vals: Vec<f64> = (0..17).map(|i| ((i * 7919) % 13) as f64 * 0.37).collect();
        let r = BinDensity::new(g, vals).unwrap();
        assert_eq!(weighted_mass(&r, |_| 1.0, 4).unwrap(), r.total_mass());
        let z = BinDensity::zeros(r.grid().clone());
        assert_eq!(weighted_mass(&z, |x| x, 4).unwrap(), 0.0);
    }
}
