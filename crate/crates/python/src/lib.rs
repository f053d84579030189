//! Python bindings. Densities cross the boundary as plain lists of bin
//! values alongside the grid edges.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use flocbal::discrete::{self, CoeffTable, Mode};
use flocbal::fluid::FluidField;
use flocbal::grid::{self as fgrid, BinDensity, LambdaGrid, Spacing};
use flocbal::kernels::{self, Aggregation, Daughter, Fragmentation, KernelSet};
use flocbal::relaxation::{RelaxParams, Relaxation, Scheme};
use flocbal::scenario::{self, RunOptions};
use flocbal::FlocError;

fn py_err(e: FlocError) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn spacing(name: &str) -> PyResult<Spacing> {
    match name {
        "geometric" => Ok(Spacing::Geometric),
        "uniform" => Ok(Spacing::Uniform),
        other => Err(PyValueError::new_err(format!("unknown spacing {other:?}"))),
    }
}

/// Cell edges of a uniform or geometric grid.
#[pyfunction]
#[pyo3(signature = (lambda_min, lambda_max, bins, spacing="geometric"))]
fn grid_edges(lambda_min: f64, lambda_max: f64, bins: usize, spacing: &str) -> PyResult<Vec<f64>> {
    let g =
        LambdaGrid::new(lambda_min, lambda_max, bins, self::spacing(spacing)?).map_err(py_err)?;
    Ok(g.edges().to_vec())
}

fn density(edges: Vec<f64>, values: Vec<f64>) -> PyResult<BinDensity> {
    let g = Arc::new(LambdaGrid::from_edges(edges).map_err(py_err)?);
    BinDensity::new(g, values).map_err(py_err)
}

/// Equilibrium size density.
#[pyfunction]
fn d_eq(lam: f64, lambda_min: f64, sigma: f64) -> f64 {
    flocbal::relaxation::d_eq(lam, lambda_min, sigma)
}

/// `Σ |Λ_i| ρ_i`.
#[pyfunction]
fn total_mass(edges: Vec<f64>, values: Vec<f64>) -> PyResult<f64> {
    Ok(density(edges, values)?.total_mass())
}

/// Relax a bin density toward equilibrium and return the values at `t_end`.
#[pyfunction]
#[pyo3(signature = (edges, values, t_eq, sigma, t_end, dt, scheme="rk4"))]
fn relax(
    edges: Vec<f64>,
    values: Vec<f64>,
    t_eq: f64,
    sigma: f64,
    t_end: f64,
    dt: f64,
    scheme: &str,
) -> PyResult<Vec<f64>> {
    let rho = density(edges, values)?;
    let scheme = match scheme {
        "rk4" => Scheme::Rk4,
        "euler" => Scheme::Euler,
        other => return Err(PyValueError::new_err(format!("unknown scheme {other:?}"))),
    };
    let params = RelaxParams::new(t_eq, rho.grid().lambda_min(), sigma).map_err(py_err)?;
    let op = Relaxation::new(&params, rho.grid(), 4).map_err(py_err)?;
    let out = op.integrate(&rho, t_end, dt, scheme).map_err(py_err)?;
    Ok(out.into_values())
}

/// Aggregation and fragmentation kernels.
#[pyclass(name = "Kernels", frozen)]
struct PyKernels {
    inner: KernelSet,
}

#[pymethods]
impl PyKernels {
    #[new]
    #[pyo3(signature = (
        d=3.0, lambda_min=1.0, aggregation="none", beta0=0.0, nu_w=1e-6,
        fragmentation="none", k_f=0.0, p=1.0, daughter="uniform_length", n_d=1.0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        d: f64,
        lambda_min: f64,
        aggregation: &str,
        beta0: f64,
        nu_w: f64,
        fragmentation: &str,
        k_f: f64,
        p: f64,
        daughter: &str,
        n_d: f64,
    ) -> PyResult<Self> {
        let agg = match aggregation {
            "none" => Aggregation::None,
            "constant" => Aggregation::Constant { beta0 },
            "sum" => Aggregation::Sum { beta0 },
            "shear" => Aggregation::Shear { beta0, nu_w },
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown aggregation family {other:?}"
                )))
            }
        };
        let frag = match fragmentation {
            "none" => Fragmentation::None,
            "constant" => Fragmentation::Constant { k_f },
            "power" => Fragmentation::Power { k_f, p },
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown fragmentation family {other:?}"
                )))
            }
        };
        let dau = match daughter {
            "uniform_length" => Daughter::UniformLength,
            "uniform_mass" => Daughter::UniformMass,
            other => return Err(PyValueError::new_err(format!("unknown daughter {other:?}"))),
        };
        let inner = KernelSet::new(d, n_d, lambda_min, agg, frag, dau).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn mass(&self, lam: f64) -> f64 {
        self.inner.mass_of(lam)
    }

    fn agg_size(&self, lam: f64, other: f64) -> f64 {
        self.inner.agg_size(lam, other)
    }

    /// True when every structural check passes on the probe edges.
    #[pyo3(signature = (edges, k=0.0, eps=0.0))]
    fn validate(&self, edges: Vec<f64>, k: f64, eps: f64) -> PyResult<bool> {
        let g = LambdaGrid::from_edges(edges).map_err(py_err)?;
        let f = FluidField {
            k,
            eps,
            ..Default::default()
        };
        Ok(kernels::validate(&self.inner, &f, &g).passed())
    }

    /// Number concentration `∫ ρ/m`.
    fn number(&self, edges: Vec<f64>, values: Vec<f64>) -> PyResult<f64> {
        Ok(fgrid::number_total(&density(edges, values)?, &self.inner))
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Precomputed sectional coefficients for one grid and fluid state.
#[pyclass(name = "Table", frozen)]
struct PyTable {
    inner: CoeffTable,
}

#[pymethods]
impl PyTable {
    #[new]
    #[pyo3(signature = (kernels, edges, k=0.0, eps=0.0, quad_order=4, mode="corrected"))]
    fn new(
        kernels: &PyKernels,
        edges: Vec<f64>,
        k: f64,
        eps: f64,
        quad_order: usize,
        mode: &str,
    ) -> PyResult<Self> {
        let mode = match mode {
            "corrected" => Mode::Corrected,
            "raw" => Mode::Raw,
            other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
        };
        let g = Arc::new(LambdaGrid::from_edges(edges).map_err(py_err)?);
        let f = FluidField {
            k,
            eps,
            ..Default::default()
        };
        let inner =
            CoeffTable::precompute(&kernels.inner, &f, &g, quad_order, mode).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn edges(&self) -> Vec<f64> {
        self.inner.grid().edges().to_vec()
    }

    /// Right-hand side of the sectional system.
    fn rhs(&self, values: Vec<f64>) -> PyResult<Vec<f64>> {
        let rho = BinDensity::new(self.inner.grid().clone(), values).map_err(py_err)?;
        Ok(discrete::apply_gbar(&self.inner, &rho).map_err(py_err)?.rhs)
    }

    /// Positivity-preserving explicit step.
    fn step(&self, py: Python<'_>, values: Vec<f64>, dt: f64) -> PyResult<Vec<f64>> {
        let rho = BinDensity::new(self.inner.grid().clone(), values).map_err(py_err)?;
        let out = py
            .detach(|| discrete::euler_step(&self.inner, &rho, dt))
            .map_err(py_err)?;
        Ok(out.density.into_values())
    }

    /// Largest relative conservation residual over random densities.
    #[pyo3(signature = (trials=100, seed=0))]
    fn conservation(&self, trials: usize, seed: u64) -> f64 {
        discrete::check_conservation(&self.inner, trials, seed).max_residual
    }
}

/// Run a scenario file and return the process exit code it maps to.
#[pyfunction]
#[pyo3(signature = (config, out, check_conservation=false))]
fn run(py: Python<'_>, config: PathBuf, out: PathBuf, check_conservation: bool) -> PyResult<i32> {
    let opts = RunOptions {
        check_conservation,
        ..Default::default()
    };
    match py.detach(|| scenario::run(&config, &out, opts)) {
        Ok(o) => Ok(o.exit_code()),
        Err(e) => Ok(e.exit_code()),
    }
}

#[pymodule]
#[pyo3(name = "flocbal")]
fn flocbal_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(grid_edges, m)?)?;
    m.add_function(wrap_pyfunction!(d_eq, m)?)?;
    m.add_function(wrap_pyfunction!(total_mass, m)?)?;
    m.add_function(wrap_pyfunction!(relax, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<PyKernels>()?;
    m.add_class::<PyTable>()?;
    Ok(())
}
