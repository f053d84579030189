//! Relaxation toward an equilibrium size distribution.
//!
//! `∂ρ/∂t = -(ρ - M D_eq)/T_eq` drives the density to `M D_eq` while keeping
//! the mass `M` fixed. The weighted variant relaxes toward `(W/f) D_eq`
//! and keeps `W = ∫ ρ f` fixed instead.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FlocError, Result};
use crate::grid::{BinDensity, LambdaGrid};

pub type Weight = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Gamma(2) equilibrium density with shape `(λ-λ_min)/σ² · exp(-(λ-λ_min)/σ)`.
///
/// Zero below `λ_min`, unit integral over `[λ_min, ∞)`, mode at `λ_min + σ`.
pub fn d_eq(lambda: f64, lambda_min: f64, sigma: f64) -> f64 {
    if lambda < lambda_min {
        return 0.0;
    }
    let x = (lambda - lambda_min) / sigma;
    x * (-x).exp() / sigma
}

#[derive(Clone)]
pub struct RelaxParams {
    pub t_eq: f64,
    pub lambda_min: f64,
    pub sigma: f64,
    pub weight: Option<Weight>,
}

impl fmt::Debug for RelaxParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RelaxParams")
            .field("t_eq", &self.t_eq)
            .field("lambda_min", &self.lambda_min)
            .field("sigma", &self.sigma)
            .field("weighted", &self.weight.is_some())
            .finish()
    }
}

impl RelaxParams {
    pub fn new(t_eq: f64, lambda_min: f64, sigma: f64) -> Result<Self> {
        if !(t_eq > 0.0) || !t_eq.is_finite() {
            return Err(FlocError::param("T_eq", "must be positive"));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(FlocError::param("sigma", "must be positive"));
        }
        if !(lambda_min > 0.0) {
            return Err(FlocError::param("lambda_min", "must be positive"));
        }
        Ok(Self {
            t_eq,
            lambda_min,
            sigma,
            weight: None,
        })
    }

    pub fn with_weight(mut self, f: Weight) -> Self {
        self.weight = Some(f);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Rk4,
}

/// Relaxation operator prepared on one grid: projected equilibrium and,
/// when weighted, the cell means of `f`.
#[derive(Debug, Clone)]
pub struct Relaxation {
    grid: Arc<LambdaGrid>,
    widths: Vec<f64>,
    t_eq: f64,
    equilibrium: Vec<f64>,
    weight_means: Option<Vec<f64>>,
}

impl Relaxation {
    /// Project `D_eq` with per-cell Gauss–Legendre of `quad_order` and
    /// rescale so `Σ |Λ_i| D_i = 1`.
    pub fn new(params: &RelaxParams, grid: &Arc<LambdaGrid>, quad_order: usize) -> Result<Self> {
        let (lmin, sigma) = (params.lambda_min, params.sigma);
        let mut eq = grid.cell_means(quad_order, |x| d_eq(x, lmin, sigma))?;
        let widths = grid.widths();
        let total: f64 = eq.iter().zip(&widths).map(|(d, w)| d * w).sum();
        if !(total > 0.0) {
            return Err(FlocError::param(
                "sigma",
                "equilibrium density has no mass on the grid",
            ));
        }
        eq.iter_mut().for_each(|d| *d /= total);

        let weight_means = match &params.weight {
            None => None,
            Some(f) => {
                let means = grid.cell_means(quad_order, |x| f(x))?;
                if let Some(bad) = means.iter().find(|m| !(**m > 0.0) || !m.is_finite()) {
                    return Err(FlocError::domain(
                        *bad,
                        "weight must be positive on the grid",
                    ));
                }
                Some(means)
            }
        };
        Ok(Self {
            grid: grid.clone(),
            widths,
            t_eq: params.t_eq,
            equilibrium: eq,
            weight_means,
        })
    }

    pub fn grid(&self) -> &Arc<LambdaGrid> {
        &self.grid
    }

    pub fn t_eq(&self) -> f64 {
        self.t_eq
    }

    /// Projected, normalized `D_eq`.
    pub fn equilibrium(&self) -> &[f64] {
        &self.equilibrium
    }

    /// Cell means of the weight, if any.
    pub fn weight_means(&self) -> Option<&[f64]> {
        self.weight_means.as_deref()
    }

    pub fn is_weighted(&self) -> bool {
        self.weight_means.is_some()
    }

    fn check(&self, rho: &BinDensity) -> Result<()> {
        if rho.grid().as_ref() != self.grid.as_ref() {
            return Err(FlocError::GridMismatch(
                "density and relaxation operator live on different grids".into(),
            ));
        }
        Ok(())
    }

    fn mass(&self, rho: &[f64]) -> f64 {
        rho.iter().zip(&self.widths).map(|(r, w)| r * w).sum()
    }

    fn weighted(&self, rho: &[f64], f: &[f64]) -> f64 {
        rho.iter()
            .zip(&self.widths)
            .zip(f)
            .map(|((r, w), f)| r * w * f)
            .sum()
    }

    /// Fixed point for the current state: `M D_eq` or `(W/f̄) D_eq`.
    fn target(&self, rho: &[f64]) -> Vec<f64> {
        match &self.weight_means {
            None => {
                let m = self.mass(rho);
                self.equilibrium.iter().map(|d| m * d).collect()
            }
            Some(f) => {
                let w = self.weighted(rho, f);
                self.equilibrium
                    .iter()
                    .zip(f)
                    .map(|(d, f)| w / f * d)
                    .collect()
            }
        }
    }

    pub(crate) fn rhs_slice(&self, rho: &[f64], out: &mut [f64]) {
        let target = self.target(rho);
        let k = 1.0 / self.t_eq;
        for ((o, r), t) in out.iter_mut().zip(rho).zip(&target) {
            *o = -k * (r - t);
        }
    }

    /// Right-hand side of the configured operator (weighted if a weight was given).
    pub fn rhs(&self, rho: &BinDensity) -> Result<Vec<f64>> {
        self.check(rho)?;
        let mut out = vec![0.0; rho.values().len()];
        self.rhs_slice(rho.values(), &mut out);
        Ok(out)
    }

    /// `-(ρ - M D_eq)/T_eq`, ignoring any weight.
    pub fn g_relax(&self, rho: &BinDensity) -> Result<Vec<f64>> {
        self.check(rho)?;
        let m = self.mass(rho.values());
        let k = 1.0 / self.t_eq;
        Ok(rho
            .values()
            .iter()
            .zip(&self.equilibrium)
            .map(|(r, d)| -k * (r - m * d))
            .collect())
    }

    /// `-(ρ - (W/f̄) D_eq)/T_eq`.
    pub fn g_relax_weighted(&self, rho: &BinDensity) -> Result<Vec<f64>> {
        if self.weight_means.is_none() {
            return Err(FlocError::param(
                "weight",
                "operator was built without a weight",
            ));
        }
        self.rhs(rho)
    }

    /// Closed-form solution `ρ* + (ρ_0 - ρ*) e^{-t/T_eq}`; the invariant
    /// (mass or weighted mass) fixes `ρ*` from `ρ_0`.
    pub fn exact(&self, rho0: &BinDensity, t: f64) -> Result<BinDensity> {
        self.check(rho0)?;
        if !(t >= 0.0) {
            return Err(FlocError::param("t", "must be nonnegative"));
        }
        if t == 0.0 {
            return Ok(rho0.clone());
        }
        let target = self.target(rho0.values());
        let decay = (-t / self.t_eq).exp();
        let vals = rho0
            .values()
            .iter()
            .zip(&target)
            .map(|(r, s)| s + (r - s) * decay)
            .collect();
        rho0.with_values(vals)
    }

    /// March `dρ/dt = G` from 0 to `t_end` with steps of `dt` (the last
    /// one shortened to land on `t_end`).
    pub fn integrate(
        &self,
        rho0: &BinDensity,
        t_end: f64,
        dt: f64,
        scheme: Scheme,
    ) -> Result<BinDensity> {
        self.check(rho0)?;
        if !(dt > 0.0) {
            return Err(FlocError::param("dt", "must be positive"));
        }
        if !(t_end >= 0.0) {
            return Err(FlocError::param("t_end", "must be nonnegative"));
        }
        if scheme == Scheme::Euler && dt > 2.0 * self.t_eq {
            return Err(FlocError::param(
                "dt",
                "explicit Euler is unstable for dt > 2 T_eq",
            ));
        }
        let mut y = rho0.values().to_vec();
        let n = y.len();
        let steps = (t_end / dt - 1e-9).ceil().max(0.0) as u64;
        let mut t = 0.0;
        let (mut k1, mut k2, mut k3, mut k4) =
            (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut tmp = vec![0.0; n];
        for s in 0..steps {
            let h = if s + 1 == steps { t_end - t } else { dt };
            match scheme {
                Scheme::Euler => {
                    self.rhs_slice(&y, &mut k1);
                    y.iter_mut().zip(&k1).for_each(|(y, k)| *y += h * k);
                }
                Scheme::Rk4 => {
                    self.rhs_slice(&y, &mut k1);
                    axpy(&mut tmp, &y, 0.5 * h, &k1);
                    self.rhs_slice(&tmp, &mut k2);
                    axpy(&mut tmp, &y, 0.5 * h, &k2);
                    self.rhs_slice(&tmp, &mut k3);
                    axpy(&mut tmp, &y, h, &k3);
                    self.rhs_slice(&tmp, &mut k4);
                    for i in 0..n {
                        y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    }
                }
            }
            t += h;
        }
        // rounding can leave -1e-300 style residue in empty cells
        for v in y.iter_mut() {
            if *v < 0.0 && *v > -1e-14 * self.mass(rho0.values()).max(f64::MIN_POSITIVE) {
                *v = 0.0;
            }
        }
        rho0.with_values(y)
    }
}

fn axpy(out: &mut [f64], y: &[f64], a: f64, x: &[f64]) {
    for ((o, y), x) in out.iter_mut().zip(y).zip(x) {
        *o = y + a * x;
    }
}
