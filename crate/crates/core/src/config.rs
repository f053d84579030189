//! Scenario configuration: one TOML file describes one run.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use crate::bioagg::BioParams;
use crate::column::SettlingLaw;
use crate::discrete::Mode;
use crate::error::{FlocError, Result};
use crate::fluid::{ColumnField, FluidField, DEFAULT_C_MU};
use crate::grid::{LambdaGrid, Spacing};
use crate::kernels::{Aggregation, Daughter, Fragmentation, KernelSet};
use crate::quadrature::DEFAULT_ORDER;
use crate::relaxation::Scheme;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub grid: GridCfg,
    #[serde(default)]
    pub kernels: KernelsCfg,
    pub relaxation: Option<RelaxCfg>,
    #[serde(default)]
    pub fluid: FluidField,
    #[serde(default)]
    pub initial: InitialCfg,
    pub scenario: ScenarioCfg,
    pub column: Option<ColumnCfg>,
    #[serde(default)]
    pub output: OutputCfg,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCfg {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub bins: usize,
    #[serde(default = "geometric")]
    pub spacing: Spacing,
}

fn geometric() -> Spacing {
    Spacing::Geometric
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggCfg {
    None,
    Constant { beta0: f64 },
    Sum { beta0: f64 },
    Shear { beta0: f64, nu_w: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FragCfg {
    None,
    Constant { k_f: f64 },
    Power { k_f: f64, p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaughterCfg {
    UniformLength,
    UniformMass,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelsCfg {
    #[serde(default = "one")]
    pub d: f64,
    #[serde(default = "one", rename = "N_d")]
    pub n_d: f64,
    #[serde(default = "no_agg")]
    pub aggregation: AggCfg,
    #[serde(default = "no_frag")]
    pub fragmentation: FragCfg,
    #[serde(default = "uniform_length")]
    pub daughter: DaughterCfg,
    #[serde(default = "default_order")]
    pub quad_order: usize,
    #[serde(default = "corrected")]
    pub mode: Mode,
    /// Coefficient cache file, relative to the config file.
    pub cache: Option<PathBuf>,
}

impl Default for KernelsCfg {
    fn default() -> Self {
        Self {
            d: 1.0,
            n_d: 1.0,
            aggregation: AggCfg::None,
            fragmentation: FragCfg::None,
            daughter: DaughterCfg::UniformLength,
            quad_order: DEFAULT_ORDER,
            mode: Mode::Corrected,
            cache: None,
        }
    }
}

fn one() -> f64 {
    1.0
}
fn no_agg() -> AggCfg {
    AggCfg::None
}
fn no_frag() -> FragCfg {
    FragCfg::None
}
fn uniform_length() -> DaughterCfg {
    DaughterCfg::UniformLength
}
fn default_order() -> usize {
    DEFAULT_ORDER
}
fn corrected() -> Mode {
    Mode::Corrected
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightCfg {
    None,
    Bio {
        lambda_bio: f64,
        #[serde(rename = "M_min")]
        m_min: f64,
        #[serde(rename = "M_bio")]
        m_bio: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxCfg {
    #[serde(rename = "T_eq")]
    pub t_eq: f64,
    pub sigma0: f64,
    #[serde(default)]
    pub c_k: f64,
    #[serde(default = "no_weight")]
    pub weight: WeightCfg,
}

fn no_weight() -> WeightCfg {
    WeightCfg::None
}

/// Initial mass density in `λ`, scaled to the given total mass.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCfg {
    Uniform {
        mass: f64,
    },
    /// `∝ exp(-(λ-λ_min)/scale)`
    Exponential {
        mass: f64,
        scale: f64,
    },
    /// `∝ exp(-(ln(λ/median))²/(2 width²))`
    Lognormal {
        mass: f64,
        median: f64,
        width: f64,
    },
    /// Bin values given directly.
    Values {
        values: Vec<f64>,
    },
}

impl Default for InitialCfg {
    fn default() -> Self {
        InitialCfg::Uniform { mass: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    ZeroDRelax,
    ZeroDAggfrag,
    Column,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Relax,
    RelaxWeighted,
    Gbar,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioCfg {
    pub mode: RunMode,
    pub t_end: f64,
    pub dt: f64,
    pub operator: Option<Operator>,
    /// Integrator for the relaxation operators.
    #[serde(default = "rk4")]
    pub scheme: Scheme,
}

fn rk4() -> Scheme {
    Scheme::Rk4
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnCfg {
    pub nz: usize,
    pub depth: f64,
    pub settling: SettlingLaw,
    /// CSV `z,u,v,w,S,T,k,eps,pH,O`, relative to the config file. The
    /// `[fluid]` state is used at every height when absent.
    pub field_file: Option<PathBuf>,
    #[serde(default = "default_c_mu")]
    pub c_mu: f64,
    /// Per-bin multiplier on the eddy viscosity.
    #[serde(default)]
    pub nu_scale: Vec<f64>,
}

fn default_c_mu() -> f64 {
    DEFAULT_C_MU
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputCfg {
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub seed: u64,
    /// Relative drift of the conserved budget that fails the run.
    #[serde(default = "default_budget_tol")]
    pub budget_tol: f64,
    /// Threshold for `--check-conservation`.
    #[serde(default = "default_conservation_tol")]
    pub conservation_tol: f64,
}

impl Default for OutputCfg {
    fn default() -> Self {
        Self {
            stride: default_stride(),
            seed: 0,
            budget_tol: default_budget_tol(),
            conservation_tol: default_conservation_tol(),
        }
    }
}

fn default_stride() -> usize {
    10
}
fn default_budget_tol() -> f64 {
    1e-9
}
fn default_conservation_tol() -> f64 {
    1e-12
}

impl Config {
    pub fn from_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| FlocError::Parse {
            path: origin.into(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FlocError::io(path, e))?;
        Self::from_str(&text, path)
    }

    /// Operator in effect: the configured one, or the mode's natural one.
    pub fn operator(&self) -> Operator {
        self.scenario.operator.unwrap_or(match self.scenario.mode {
            RunMode::ZeroDRelax => Operator::Relax,
            _ => Operator::Gbar,
        })
    }

    /// Every problem found, each naming its key. Empty means valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut bad = |key: &str, why: &str| v.push(format!("{key}: {why}"));
        let g = &self.grid;
        if !(g.lambda_min > 0.0) {
            bad("grid.lambda_min", "must be positive");
        }
        if !(g.lambda_max > g.lambda_min) {
            bad("grid.lambda_max", "must exceed grid.lambda_min");
        }
        if g.bins == 0 {
            bad("grid.bins", "must be at least 1");
        }
        if g.spacing == Spacing::Explicit {
            bad("grid.spacing", "use uniform or geometric");
        }
        let k = &self.kernels;
        if !(k.d >= 1.0) || !k.d.is_finite() {
            bad("kernels.d", "must be at least 1");
        }
        if !(k.n_d > 0.0) {
            bad("kernels.N_d", "must be positive");
        }
        if k.quad_order == 0 {
            bad("kernels.quad_order", "must be at least 1");
        }
        match k.aggregation {
            AggCfg::Constant { beta0 } | AggCfg::Sum { beta0 } if !(beta0 >= 0.0) => {
                bad("kernels.aggregation.beta0", "must be nonnegative")
            }
            AggCfg::Shear { beta0, nu_w } => {
                if !(beta0 >= 0.0) {
                    bad("kernels.aggregation.beta0", "must be nonnegative");
                }
                if !(nu_w > 0.0) {
                    bad("kernels.aggregation.nu_w", "must be positive");
                }
            }
            _ => {}
        }
        match k.fragmentation {
            FragCfg::Constant { k_f } | FragCfg::Power { k_f, .. } if !(k_f >= 0.0) => {
                bad("kernels.fragmentation.k_f", "must be nonnegative")
            }
            _ => {}
        }
        if let Err(e) = self.fluid.validate() {
            bad("fluid", &e.to_string());
        }
        if let Some(r) = &self.relaxation {
            if !(r.t_eq > 0.0) {
                bad("relaxation.T_eq", "must be positive");
            }
            if !(r.sigma0 > 0.0) {
                bad("relaxation.sigma0", "must be positive");
            }
            if !(r.c_k >= 0.0) {
                bad("relaxation.c_k", "must be nonnegative");
            }
            if let WeightCfg::Bio {
                lambda_bio,
                m_min,
                m_bio,
            } = r.weight
            {
                if let Err(e) = BioParams::new(
                    g.lambda_min.max(f64::MIN_POSITIVE),
                    lambda_bio,
                    m_min,
                    m_bio,
                    k.d.max(1.0),
                ) {
                    bad("relaxation.weight.bio", &e.to_string());
                }
            }
        }
        match &self.initial {
            InitialCfg::Uniform { mass } => {
                if !(*mass >= 0.0) {
                    bad("initial.mass", "must be nonnegative");
                }
            }
            InitialCfg::Exponential { mass, scale } => {
                if !(*mass >= 0.0) {
                    bad("initial.mass", "must be nonnegative");
                }
                if !(*scale > 0.0) {
                    bad("initial.scale", "must be positive");
                }
            }
            InitialCfg::Lognormal {
                mass,
                median,
                width,
            } => {
                if !(*mass >= 0.0) {
                    bad("initial.mass", "must be nonnegative");
                }
                if !(*median > 0.0) {
                    bad("initial.median", "must be positive");
                }
                if !(*width > 0.0) {
                    bad("initial.width", "must be positive");
                }
            }
            InitialCfg::Values { values } => {
                if values.len() != g.bins {
                    bad("initial.values", "need one value per bin");
                }
                if values.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                    bad("initial.values", "must be finite and nonnegative");
                }
            }
        }
        let s = &self.scenario;
        if !(s.t_end >= 0.0) || !s.t_end.is_finite() {
            bad("scenario.t_end", "must be nonnegative");
        }
        if !(s.dt > 0.0) || !s.dt.is_finite() {
            bad("scenario.dt", "must be positive");
        }
        let op = self.operator();
        match (s.mode, op) {
            (RunMode::ZeroDRelax, Operator::Gbar) => bad(
                "scenario.operator",
                "zero_d_relax needs relax or relax_weighted",
            ),
            (RunMode::ZeroDAggfrag, Operator::Relax | Operator::RelaxWeighted) => {
                bad("scenario.operator", "zero_d_aggfrag needs gbar")
            }
            _ => {}
        }
        if matches!(op, Operator::Relax | Operator::RelaxWeighted) {
            match &self.relaxation {
                None => bad("relaxation", "section required by the relaxation operator"),
                Some(r) => {
                    if op == Operator::RelaxWeighted && r.weight == WeightCfg::None {
                        bad("relaxation.weight", "relax_weighted needs a weight");
                    }
                    if s.scheme == Scheme::Euler && s.dt > 2.0 * r.t_eq {
                        bad("scenario.dt", "explicit Euler needs dt <= 2 T_eq");
                    }
                }
            }
        }
        if s.mode == RunMode::Column {
            match &self.column {
                None => bad("column", "section required in column mode"),
                Some(c) => {
                    if c.nz == 0 {
                        bad("column.nz", "must be at least 1");
                    }
                    if !(c.depth > 0.0) {
                        bad("column.depth", "must be positive");
                    }
                    if let Err(e) = c.settling.validate() {
                        bad("column.settling", &e.to_string());
                    }
                    if !(c.c_mu >= 0.0) {
                        bad("column.c_mu", "must be nonnegative");
                    }
                    if !c.nu_scale.is_empty() && c.nu_scale.len() != g.bins {
                        bad("column.nu_scale", "need one multiplier per bin");
                    }
                    if c.nu_scale.iter().any(|x| !(*x >= 0.0)) {
                        bad("column.nu_scale", "must be nonnegative");
                    }
                }
            }
        }
        let o = &self.output;
        if o.stride == 0 {
            bad("output.stride", "must be at least 1");
        }
        if !(o.budget_tol >= 0.0) {
            bad("output.budget_tol", "must be nonnegative");
        }
        if !(o.conservation_tol >= 0.0) {
            bad("output.conservation_tol", "must be nonnegative");
        }
        v
    }

    pub fn build_grid(&self) -> Result<Arc<LambdaGrid>> {
        let g = &self.grid;
        Ok(Arc::new(LambdaGrid::new(
            g.lambda_min,
            g.lambda_max,
            g.bins,
            g.spacing,
        )?))
    }

    pub fn build_kernels(&self) -> Result<KernelSet> {
        let k = &self.kernels;
        let agg = match k.aggregation {
            AggCfg::None => Aggregation::None,
            AggCfg::Constant { beta0 } => Aggregation::Constant { beta0 },
            AggCfg::Sum { beta0 } => Aggregation::Sum { beta0 },
            AggCfg::Shear { beta0, nu_w } => Aggregation::Shear { beta0, nu_w },
        };
        let frag = match k.fragmentation {
            FragCfg::None => Fragmentation::None,
            FragCfg::Constant { k_f } => Fragmentation::Constant { k_f },
            FragCfg::Power { k_f, p } => Fragmentation::Power { k_f, p },
        };
        let daughter = match k.daughter {
            DaughterCfg::UniformLength => Daughter::UniformLength,
            DaughterCfg::UniformMass => Daughter::UniformMass,
        };
        KernelSet::new(k.d, k.n_d, self.grid.lambda_min, agg, frag, daughter)
    }

    pub fn bio(&self) -> Result<Option<BioParams>> {
        match self.relaxation.as_ref().map(|r| r.weight) {
            Some(WeightCfg::Bio {
                lambda_bio,
                m_min,
                m_bio,
            }) => Ok(Some(BioParams::new(
                self.grid.lambda_min,
                lambda_bio,
                m_min,
                m_bio,
                self.kernels.d,
            )?)),
            _ => Ok(None),
        }
    }

    /// Fluid column: from `field_file` when set, else `[fluid]` everywhere.
    pub fn column_field(&self, base: &Path) -> Result<Option<ColumnField>> {
        let Some(c) = &self.column else {
            return Ok(None);
        };
        match &c.field_file {
            Some(p) => Ok(Some(ColumnField::from_csv(base.join(p))?)),
            None => Ok(Some(crate::fluid::uniform_field(
                self.fluid,
                vec![0.0, c.depth],
            )?)),
        }
    }

    /// Initial mass density `λ ↦ ρ₀(λ)` before scaling, and the target mass.
    pub fn initial_shape(&self) -> (Box<dyn Fn(f64) -> f64>, Option<f64>) {
        let lmin = self.grid.lambda_min;
        match self.initial.clone() {
            InitialCfg::Uniform { mass } => (Box::new(|_| 1.0), Some(mass)),
            InitialCfg::Exponential { mass, scale } => {
                (Box::new(move |x| (-(x - lmin) / scale).exp()), Some(mass))
            }
            InitialCfg::Lognormal {
                mass,
                median,
                width,
            } => (
                Box::new(move |x| {
                    let z = (x / median).ln() / width;
                    (-0.5 * z * z).exp()
                }),
                Some(mass),
            ),
            InitialCfg::Values { .. } => (Box::new(|_| 0.0), None),
        }
    }
}
