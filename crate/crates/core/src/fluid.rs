//! Prescribed fluid field and the scalar closures derived from it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FlocError, Result};

/// Default eddy-viscosity constant `c̃_μ`.
pub const DEFAULT_C_MU: f64 = 90.0;

/// Fluid state at one point: velocity, salinity, temperature, turbulence
/// energy and dissipation, pH and organic-matter content (SI units, °C).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FluidField {
    #[serde(default)]
    pub u: f64,
    #[serde(default)]
    pub v: f64,
    #[serde(default)]
    pub w: f64,
    #[serde(default, rename = "S")]
    pub salinity: f64,
    #[serde(default, rename = "T")]
    pub temperature: f64,
    #[serde(default)]
    pub k: f64,
    #[serde(default)]
    pub eps: f64,
    #[serde(default, rename = "pH")]
    pub ph: f64,
    #[serde(default, rename = "O")]
    pub organic: f64,
}

impl FluidField {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&'static str, f64); 6] = [
            ("S", self.salinity),
            ("T", self.temperature + 273.15),
            ("k", self.k),
            ("eps", self.eps),
            ("pH", self.ph),
            ("O", self.organic),
        ];
        for (name, value) in checks {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(FlocError::param(
                    name,
                    format!("must be nonnegative, got {value}"),
                ));
            }
        }
        if ![self.u, self.v, self.w].iter().all(|x| x.is_finite()) {
            return Err(FlocError::param("velocity", "must be finite"));
        }
        Ok(())
    }

    fn lerp(&self, other: &Self, t: f64) -> Self {
        let mix = |a: f64, b: f64| a + (b - a) * t;
        Self {
            u: mix(self.u, other.u),
            v: mix(self.v, other.v),
            w: mix(self.w, other.w),
            salinity: mix(self.salinity, other.salinity),
            temperature: mix(self.temperature, other.temperature),
            k: mix(self.k, other.k),
            eps: mix(self.eps, other.eps),
            ph: mix(self.ph, other.ph),
            organic: mix(self.organic, other.organic),
        }
    }
}

/// Fluid field sampled at heights above the bed.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnField {
    z_nodes: Vec<f64>,
    fields: Vec<FluidField>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    z: f64,
    #[serde(flatten)]
    field: FluidField,
}

impl ColumnField {
    pub fn new(z_nodes: Vec<f64>, fields: Vec<FluidField>) -> Result<Self> {
        if z_nodes.is_empty() || z_nodes.len() != fields.len() {
            return Err(FlocError::param(
                "z_nodes",
                "need one fluid record per node and at least one node",
            ));
        }
        if z_nodes[0] < 0.0 || z_nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(FlocError::param(
                "z_nodes",
                "heights must increase strictly upward from the bed",
            ));
        }
        for f in &fields {
            f.validate()?;
        }
        Ok(Self { z_nodes, fields })
    }

    /// Read a `z,u,v,w,S,T,k,eps,pH,O` CSV file.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| FlocError::Parse {
            path: path.into(),
            reason: e.to_string(),
        })?;
        let (mut z, mut fields) = (Vec::new(), Vec::new());
        for row in rdr.deserialize::<CsvRow>() {
            let row = row.map_err(|e| FlocError::Parse {
                path: path.into(),
                reason: e.to_string(),
            })?;
            z.push(row.z);
            fields.push(row.field);
        }
        Self::new(z, fields)
    }

    pub fn z_nodes(&self) -> &[f64] {
        &self.z_nodes
    }

    pub fn fields(&self) -> &[FluidField] {
        &self.fields
    }

    /// Piecewise-linear interpolation in `z`, constant beyond the end nodes.
    pub fn at(&self, z: f64) -> FluidField {
        let n = self.z_nodes.len();
        if z <= self.z_nodes[0] {
            return self.fields[0];
        }
        if z >= self.z_nodes[n - 1] {
            return self.fields[n - 1];
        }
        let j = self.z_nodes.partition_point(|x| *x <= z);
        let (z0, z1) = (self.z_nodes[j - 1], self.z_nodes[j]);
        self.fields[j - 1].lerp(&self.fields[j], (z - z0) / (z1 - z0))
    }
}

/// Column with the same fluid state at every node.
pub fn uniform_field(values: FluidField, z_nodes: Vec<f64>) -> Result<ColumnField> {
    values.validate()?;
    let fields = vec![values; z_nodes.len()];
    ColumnField::new(z_nodes, fields)
}

/// `c̃_μ k² / ε`.
pub fn eddy_viscosity(f: &FluidField, c_mu_tilde: f64) -> Result<f64> {
    if !(f.eps > 0.0) {
        return Err(FlocError::domain(
            f.eps,
            "eddy viscosity needs a positive dissipation rate",
        ));
    }
    Ok(c_mu_tilde * f.k * f.k / f.eps)
}

/// Equilibrium spread closure `σ_0 / (1 + c_k k)`.
pub fn sigma_eq(f: &FluidField, sigma0: f64, c_k: f64) -> f64 {
    sigma0 / (1.0 + c_k * f.k)
}

/// Map from the fluid state to the equilibrium spread `σ`.
pub trait SigmaClosure: Send + Sync {
    fn sigma(&self, f: &FluidField) -> f64;
}

/// The default closure: turbulence shrinks the spread, see [`sigma_eq`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurbulentSigma {
    pub sigma0: f64,
    pub c_k: f64,
}

impl SigmaClosure for TurbulentSigma {
    fn sigma(&self, f: &FluidField) -> f64 {
        sigma_eq(f, self.sigma0, self.c_k)
    }
}

impl<F: Fn(&FluidField) -> f64 + Send + Sync> SigmaClosure for F {
    fn sigma(&self, f: &FluidField) -> f64 {
        self(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turb(k: f64, eps: f64) -> FluidField {
        FluidField {
            k,
            eps,
            ..Default::default()
        }
    }

    #[test]
    fn uniform_field_examples() {
        let col = uniform_field(FluidField::default(), vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(col.fields().len(), 3);
        assert!(col.fields().iter().all(|f| *f == FluidField::default()));

        let col = uniform_field(turb(0.01, 0.001), vec![0.0, 0.5, 1.0]).unwrap();
        assert!(col
            .fields()
            .iter()
            .all(|f| eddy_viscosity(f, DEFAULT_C_MU).unwrap() > 0.0));

        assert!(uniform_field(turb(0.0, -1.0), vec![0.0]).is_err());
    }

    #[test]
    fn temperature_floor_is_absolute_zero() {
        let mut f = FluidField {
            temperature: -10.0,
            ..Default::default()
        };
        assert!(f.validate().is_ok());
        f.temperature = -300.0;
        assert!(f.validate().is_err());
    }

    #[test]
    fn eddy_viscosity_examples() {
        assert_eq!(eddy_viscosity(&turb(0.0, 1.0), 90.0).unwrap(), 0.0);
        assert_eq!(eddy_viscosity(&turb(1.0, 1.0), 90.0).unwrap(), 90.0);
        assert!((eddy_viscosity(&turb(0.1, 0.01), 90.0).unwrap() - 90.0).abs() < 1e-12);
        assert!(eddy_viscosity(&turb(1.0, 0.0), 90.0).is_err());
    }

    #[test]
    fn eddy_viscosity_is_quadratic_in_k() {
        let a = eddy_viscosity(&turb(0.3, 0.02), 90.0).unwrap();
        let b = eddy_viscosity(&turb(0.9, 0.02), 90.0).unwrap();
        assert!((b - 9.0 * a).abs() <= 1e-12 * b);
    }

    #[test]
    fn sigma_eq_examples() {
        assert_eq!(sigma_eq(&turb(0.0, 1.0), 2.5, 4.0), 2.5);
        assert_eq!(sigma_eq(&turb(1.0, 1.0), 3.0, 2.0), 1.0);
        let mut last = f64::INFINITY;
        for k in [0.0, 0.1, 1.0, 10.0, 1e3] {
            let s = sigma_eq(&turb(k, 1.0), 1.0, 0.7);
            assert!(s > 0.0 && s <= 1.0 && s <= last);
            last = s;
        }
    }

    #[test]
    fn column_interpolates_linearly() {
        let col = ColumnField::new(vec![0.0, 2.0], vec![turb(0.0, 1.0), turb(2.0, 1.0)]).unwrap();
        assert_eq!(col.at(1.0).k, 1.0);
        assert_eq!(col.at(-1.0).k, 0.0);
        assert_eq!(col.at(5.0).k, 2.0);
        assert!(ColumnField::new(vec![1.0, 1.0], vec![turb(0.0, 1.0); 2]).is_err());
    }
}
