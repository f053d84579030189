//! Vertical column: settling and turbulent diffusion of every size bin,
//! coupled to the aggregation/fragmentation step by time splitting.
//!
//! Cells are stacked from the bed (`z_edges[0]`) to the surface. `ρ` is
//! stored row-major, one row of `I` bin densities per height cell, so the
//! suspended mass per unit area is `Σ_k Δz_k Σ_i |Λ_i| ρ_{k,i}`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrete::{euler_slice, CoeffTable};
use crate::error::{FlocError, Result};
use crate::fluid::{eddy_viscosity, ColumnField, FluidField, DEFAULT_C_MU};
use crate::grid::{BinDensity, LambdaGrid};

/// Sub-steps allowed in one transport call.
pub const MAX_SUBSTEPS: u64 = 1_000_000;

/// Fraction of the positivity limit used for a sub-step.
pub const CFL_SAFETY: f64 = 0.9;

/// Power law in size times a hindrance factor in concentration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettlingLaw {
    pub w0: f64,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
    pub r_gel: f64,
    #[serde(default = "default_power", alias = "power")]
    pub hindrance_power: f64,
    /// Size at which the velocity equals `w0`; the grid's `λ_min` if unset.
    #[serde(default)]
    pub lambda_ref: Option<f64>,
}

fn default_exponent() -> f64 {
    2.0
}

fn default_power() -> f64 {
    4.65
}

impl SettlingLaw {
    pub fn new(w0: f64, exponent: f64, r_gel: f64, hindrance_power: f64) -> Result<Self> {
        let law = Self {
            w0,
            exponent,
            r_gel,
            hindrance_power,
            lambda_ref: None,
        };
        law.validate()?;
        Ok(law)
    }

    pub fn with_reference(mut self, lambda_ref: f64) -> Result<Self> {
        self.lambda_ref = Some(lambda_ref);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w0 >= 0.0) || !self.w0.is_finite() {
            return Err(FlocError::param("w0", "must be nonnegative"));
        }
        if !(self.r_gel > 0.0) {
            return Err(FlocError::param("r_gel", "must be positive"));
        }
        if !(self.exponent >= 0.0) || !self.exponent.is_finite() {
            return Err(FlocError::param("exponent", "must be nonnegative"));
        }
        if !(self.hindrance_power >= 0.0) || !self.hindrance_power.is_finite() {
            return Err(FlocError::param("hindrance_power", "must be nonnegative"));
        }
        if let Some(l) = self.lambda_ref {
            if !(l > 0.0) {
                return Err(FlocError::param("lambda_ref", "must be positive"));
            }
        }
        Ok(())
    }
}

/// `w0 (λ/λ_ref)^exponent · max(0, 1 - r/r_gel)^power`, downward positive.
pub fn settling_velocity(law: &SettlingLaw, lambda_ref: f64, lambda: f64, r: f64) -> f64 {
    let free = law.w0 * (lambda / law.lambda_ref.unwrap_or(lambda_ref)).powf(law.exponent);
    let h = (1.0 - r.max(0.0) / law.r_gel).max(0.0);
    if h == 0.0 {
        return 0.0;
    }
    free * h.powf(law.hindrance_power)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnState {
    z_edges: Vec<f64>,
    grid: Arc<LambdaGrid>,
    rho: Vec<f64>,
    /// Mass per unit area that has settled onto the bed.
    pub deposited: f64,
    /// Mass per unit area moved into the top bin by overflow.
    pub redirected: f64,
    pub time: f64,
}

impl ColumnState {
    pub fn new(z_edges: Vec<f64>, grid: Arc<LambdaGrid>, rho: Vec<f64>) -> Result<Self> {
        if z_edges.len() < 2 || z_edges[0] < 0.0 || z_edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(FlocError::param(
                "z_edges",
                "need at least one cell and strictly increasing heights from the bed",
            ));
        }
        let nz = z_edges.len() - 1;
        if rho.len() != nz * grid.len() {
            return Err(FlocError::GridMismatch(format!(
                "{} values for {nz} heights by {} bins",
                rho.len(),
                grid.len()
            )));
        }
        if rho.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(FlocError::param(
                "rho",
                "densities must be finite and nonnegative",
            ));
        }
        Ok(Self {
            z_edges,
            grid,
            rho,
            deposited: 0.0,
            redirected: 0.0,
            time: 0.0,
        })
    }

    /// `nz` equal cells over `[0, depth]`, all holding `profile`.
    pub fn uniform(depth: f64, nz: usize, profile: &BinDensity) -> Result<Self> {
        if !(depth > 0.0) || nz == 0 {
            return Err(FlocError::param(
                "depth",
                "need a positive depth and at least one cell",
            ));
        }
        let edges = (0..=nz).map(|k| depth * k as f64 / nz as f64).collect();
        let rho = profile.values().repeat(nz);
        Self::new(edges, profile.grid().clone(), rho)
    }

    pub fn nz(&self) -> usize {
        self.z_edges.len() - 1
    }

    pub fn bins(&self) -> usize {
        self.grid.len()
    }

    pub fn grid(&self) -> &Arc<LambdaGrid> {
        &self.grid
    }

    pub fn z_edges(&self) -> &[f64] {
        &self.z_edges
    }

    pub fn z_centers(&self) -> Vec<f64> {
        self.z_edges
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]))
            .collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.rho
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let n = self.bins();
        &self.rho[k * n..(k + 1) * n]
    }

    pub fn node_density(&self, k: usize) -> Result<BinDensity> {
        BinDensity::new(self.grid.clone(), self.row(k).to_vec())
    }

    /// Suspended mass per unit volume in height cell `k`.
    pub fn concentration(&self, k: usize) -> f64 {
        self.row(k)
            .iter()
            .enumerate()
            .map(|(i, r)| r * self.grid.width(i))
            .sum()
    }

    pub fn suspended(&self) -> f64 {
        (0..self.nz())
            .map(|k| (self.z_edges[k + 1] - self.z_edges[k]) * self.concentration(k))
            .sum()
    }

    /// Suspended plus deposited; constant under transport and the corrected
    /// reaction step.
    pub fn budget(&self) -> f64 {
        self.suspended() + self.deposited
    }
}

/// Fluid forcing and settling closure for a column run.
#[derive(Debug, Clone)]
pub struct ColumnModel {
    pub fields: ColumnField,
    pub law: SettlingLaw,
    pub c_mu: f64,
    /// Per-bin multiplier on the eddy viscosity; empty means 1 everywhere.
    pub nu_scale: Vec<f64>,
}

impl ColumnModel {
    pub fn new(fields: ColumnField, law: SettlingLaw) -> Result<Self> {
        law.validate()?;
        Ok(Self {
            fields,
            law,
            c_mu: DEFAULT_C_MU,
            nu_scale: Vec::new(),
        })
    }

    fn nu_at(&self, z: f64) -> Result<f64> {
        let f = self.fields.at(z);
        if f.k == 0.0 {
            return Ok(0.0);
        }
        eddy_viscosity(&f, self.c_mu)
    }

    fn nu_scale(&self, i: usize) -> f64 {
        self.nu_scale.get(i).copied().unwrap_or(1.0)
    }

    /// Advance settling and diffusion over `dt`, sub-stepping so that every
    /// explicit update stays a convex combination.
    pub fn transport_step(&self, state: &ColumnState, dt: f64) -> Result<ColumnState> {
        if !(dt >= 0.0) {
            return Err(FlocError::param("dt", "must be nonnegative"));
        }
        let nz = state.nz();
        let n = state.bins();
        let grid = state.grid.clone();
        let lref = grid.lambda_min();
        let z = &state.z_edges;
        let dz: Vec<f64> = z.windows(2).map(|w| w[1] - w[0]).collect();
        let zc = state.z_centers();
        // fluid vertical velocity on every face, viscosity on interior faces
        let w_face: Vec<f64> = z.iter().map(|&h| self.fields.at(h).w).collect();
        let mut nu_face = vec![0.0; nz + 1];
        for k in 1..nz {
            nu_face[k] = self.nu_at(z[k])?;
        }
        let mids: Vec<f64> = (0..n).map(|i| grid.midpoint(i)).collect();

        // worst-case outflow rate per cell over bins, hindrance switched off
        let mut rate = 0.0f64;
        for (i, &mid) in mids.iter().enumerate() {
            let ws = settling_velocity(&self.law, lref, mid, 0.0);
            let s = self.nu_scale(i);
            for k in 0..nz {
                let a_lo = w_face[k] - ws;
                let a_hi = if k + 1 == nz { 0.0 } else { w_face[k + 1] };
                let mut out = (-a_lo).max(0.0) + a_hi.max(0.0);
                if k > 0 {
                    out += s * nu_face[k] / (zc[k] - zc[k - 1]);
                }
                if k + 1 < nz {
                    out += s * nu_face[k + 1] / (zc[k + 1] - zc[k]);
                }
                rate = rate.max(out / dz[k]);
            }
        }
        let mut next = state.clone();
        next.time += dt;
        if dt == 0.0 || rate == 0.0 {
            return Ok(next);
        }
        let required = (dt * rate / CFL_SAFETY).ceil();
        if required > MAX_SUBSTEPS as f64 {
            return Err(FlocError::SubstepLimit {
                required,
                limit: MAX_SUBSTEPS,
            });
        }
        let steps = (required as u64).max(1);
        let h = dt / steps as f64;

        let mut rho = state.rho.clone();
        let mut flux = vec![0.0; nz + 1];
        let mut conc = vec![0.0; nz];
        for _ in 0..steps {
            for (k, c) in conc.iter_mut().enumerate() {
                *c = (0..n).map(|i| rho[k * n + i] * grid.width(i)).sum();
            }
            let mut settled = 0.0;
            for i in 0..n {
                let s = self.nu_scale(i);
                // flux[k] is the upward flux through face k
                flux[0] = 0.0;
                flux[nz] = 0.0;
                {
                    let ws = settling_velocity(&self.law, lref, mids[i], conc[0]);
                    let a = w_face[0] - ws;
                    if a < 0.0 {
                        flux[0] = a * rho[i];
                    }
                }
                for k in 1..nz {
                    let below = rho[(k - 1) * n + i];
                    let above = rho[k * n + i];
                    // the donor cell sets the hindrance
                    let a_down = w_face[k] - settling_velocity(&self.law, lref, mids[i], conc[k]);
                    let adv = if a_down < 0.0 {
                        a_down * above
                    } else {
                        let a_up =
                            w_face[k] - settling_velocity(&self.law, lref, mids[i], conc[k - 1]);
                        a_up.max(0.0) * below
                    };
                    let dif = -s * nu_face[k] * (above - below) / (zc[k] - zc[k - 1]);
                    flux[k] = adv + dif;
                }
                for k in 0..nz {
                    rho[k * n + i] += h / dz[k] * (flux[k] - flux[k + 1]);
                    if rho[k * n + i] < 0.0 {
                        // rounding only: the sub-step keeps updates convex
                        rho[k * n + i] = 0.0;
                    }
                }
                settled -= h * flux[0] * grid.width(i);
            }
            next.deposited += settled;
        }
        next.rho = rho;
        Ok(next)
    }

    /// Transport over `dt`, then one reaction step per height cell. `tables`
    /// holds one table per cell, or a single table shared by all cells.
    pub fn split_step(
        &self,
        state: &ColumnState,
        tables: &[Arc<CoeffTable>],
        dt: f64,
    ) -> Result<ColumnState> {
        let nz = state.nz();
        if tables.len() != 1 && tables.len() != nz {
            return Err(FlocError::GridMismatch(format!(
                "{} tables for {nz} height cells",
                tables.len()
            )));
        }
        for t in tables {
            if t.grid().edges() != state.grid.edges() {
                return Err(FlocError::GridMismatch(
                    "coefficient table built on another grid".into(),
                ));
            }
        }
        let mut next = self.transport_step(state, dt)?;
        if dt == 0.0 {
            return Ok(next);
        }
        let n = state.bins();
        let rows: Vec<(Vec<f64>, f64)> = (0..nz)
            .into_par_iter()
            .map(|k| {
                let tab = &tables[if tables.len() == 1 { 0 } else { k }];
                let (y, _, _, red) = euler_slice(tab, &next.rho[k * n..(k + 1) * n], dt)?;
                Ok((y, red))
            })
            .collect::<Result<_>>()?;
        for (k, (y, red)) in rows.into_iter().enumerate() {
            next.rho[k * n..(k + 1) * n].copy_from_slice(&y);
            next.redirected += red * (state.z_edges[k + 1] - state.z_edges[k]);
        }
        Ok(next)
    }
}

/// [`ColumnModel::transport_step`] with default viscosity settings.
pub fn transport_step(
    state: &ColumnState,
    fields: &ColumnField,
    law: &SettlingLaw,
    dt: f64,
) -> Result<ColumnState> {
    ColumnModel::new(fields.clone(), *law)?.transport_step(state, dt)
}

/// [`ColumnModel::split_step`] with default viscosity settings.
pub fn split_step(
    state: &ColumnState,
    tables: &[Arc<CoeffTable>],
    fields: &ColumnField,
    law: &SettlingLaw,
    dt: f64,
) -> Result<ColumnState> {
    ColumnModel::new(fields.clone(), *law)?.split_step(state, tables, dt)
}

/// Fluid state at each cell centre, collapsed to a single entry when the
/// column is uniform so one table serves every cell.
pub fn node_fields(state: &ColumnState, fields: &ColumnField) -> Vec<FluidField> {
    let per: Vec<FluidField> = state.z_centers().iter().map(|&z| fields.at(z)).collect();
    if per.windows(2).all(|w| w[0] == w[1]) {
        per[..1].to_vec()
    } else {
        per
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluid::uniform_field;
    use crate::grid::Spacing;

    fn law(w0: f64) -> SettlingLaw {
        SettlingLaw::new(w0, 2.0, 10.0, 4.0).unwrap()
    }

    fn grid() -> Arc<LambdaGrid> {
        Arc::new(LambdaGrid::new(1.0, 4.0, 3, Spacing::Uniform).unwrap())
    }

    fn still(k: f64, eps: f64) -> ColumnField {
        let f = FluidField {
            k,
            eps,
            ..Default::default()
        };
        uniform_field(f, vec![0.0, 1.0]).unwrap()
    }

    #[test]
    fn velocity_examples() {
        let l = law(0.01);
        assert_eq!(settling_velocity(&l, 1.0, 1.0, 0.0), 0.01);
        assert_eq!(settling_velocity(&l, 1.0, 1.0, 10.0), 0.0);
        assert_eq!(settling_velocity(&l, 1.0, 1.0, 50.0), 0.0);
        assert!((settling_velocity(&l, 1.0, 2.0, 0.0) - 0.04).abs() < 1e-15);
        let fixed = l.with_reference(2.0).unwrap();
        assert!((settling_velocity(&fixed, 1.0, 2.0, 0.0) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn velocity_monotone() {
        let l = law(1e-3);
        let mut last = f64::INFINITY;
        for j in 0..50 {
            let v = settling_velocity(&l, 1.0, 3.0, j as f64 * 0.25);
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn rejects_bad_law() {
        assert!(SettlingLaw::new(-1.0, 2.0, 1.0, 1.0).is_err());
        assert!(SettlingLaw::new(1.0, 2.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn still_water_is_unchanged() {
        let g = grid();
        let p = BinDensity::new(g, vec![1.0, 2.0, 3.0]).unwrap();
        let s = ColumnState::uniform(2.0, 5, &p).unwrap();
        let next = transport_step(&s, &still(0.0, 0.0), &law(0.0), 10.0).unwrap();
        assert_eq!(next.values(), s.values());
        assert_eq!(next.deposited, 0.0);
        assert_eq!(next.time, 10.0);
    }

    #[test]
    fn settling_deposits_and_conserves() {
        let g = grid();
        let p = BinDensity::new(g, vec![1.0, 0.5, 0.25]).unwrap();
        let s = ColumnState::uniform(1.0, 20, &p).unwrap();
        let b0 = s.budget();
        let next = transport_step(&s, &still(0.0, 0.0), &law(1e-3), 50.0).unwrap();
        assert!(next.deposited > 0.0);
        assert!(((next.budget() - b0) / b0).abs() < 1e-12);
        assert!(next.values().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn diffusion_keeps_mass_and_flattens() {
        let g = grid();
        let nz = 10;
        let mut rho = vec![0.0; nz * 3];
        rho[9 * 3] = 5.0;
        let s = ColumnState::new((0..=nz).map(|k| k as f64 / 10.0).collect(), g, rho).unwrap();
        let f = still(1e-3, 1e-3);
        let m0 = s.suspended();
        let next = transport_step(&s, &f, &law(0.0), 5.0).unwrap();
        assert!(((next.suspended() - m0) / m0).abs() < 1e-12);
        assert!(next.row(9)[0] < 5.0 && next.row(0)[0] > 0.0);
    }

    #[test]
    fn substep_cap_is_reported() {
        let g = grid();
        let p = BinDensity::new(g, vec![1.0, 1.0, 1.0]).unwrap();
        let s = ColumnState::uniform(1.0, 1000, &p).unwrap();
        let err = transport_step(&s, &still(0.0, 0.0), &law(10.0), 1e6).unwrap_err();
        assert!(matches!(err, FlocError::SubstepLimit { .. }));
    }

    #[test]
    fn state_shape_checked() {
        let g = grid();
        assert!(ColumnState::new(vec![0.0, 1.0], g.clone(), vec![1.0; 2]).is_err());
        assert!(ColumnState::new(vec![1.0, 0.5], g, vec![1.0; 3]).is_err());
    }
}
