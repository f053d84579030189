//! Scenario runner behind the `flocbal` binary.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::column::{ColumnModel, ColumnState};
use crate::config::{Config, Operator, RunMode};
use crate::discrete::{check_conservation, euler_step, CoeffTable, ConservationReport, Mode};
use crate::error::FlocError;
use crate::fluid::{sigma_eq, FluidField};
use crate::grid::{number_total, project, weighted_mass_with_means, BinDensity, LambdaGrid};
use crate::kernels::{validate, KernelSet};
use crate::relaxation::{RelaxParams, Relaxation};

pub const SERIES_HEADER: [&str; 6] = [
    "t",
    "mass_total",
    "number_total",
    "weighted_mass",
    "deposited",
    "leak_redirected",
];

pub const DIST_HEADER: [&str; 4] = ["bin", "lambda_lo", "lambda_hi", "rho"];

/// Random densities drawn by `--check-conservation`.
pub const CONSERVATION_TRIALS: usize = 100;

/// Why a run stopped; maps onto the process exit code.
#[derive(Debug)]
pub enum RunError {
    Config(String),
    Numerical(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "config error: {m}"),
            RunError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<FlocError> for RunError {
    fn from(e: FlocError) -> Self {
        if e.is_numerical() {
            RunError::Numerical(e.to_string())
        } else {
            RunError::Config(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Config(format!("{}: {e}", path.display()))
}

/// Command-line overrides.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub check_conservation: bool,
    pub quad_order: Option<usize>,
    pub mode: Option<Mode>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: usize,
    /// Relative drift of the conserved budget at the worst output row.
    pub budget_drift: f64,
    pub budget_ok: bool,
    pub conservation: Option<ConservationReport>,
    pub conservation_ok: bool,
    pub report: String,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.budget_ok && self.conservation_ok {
            0
        } else {
            3
        }
    }
}

/// Parse and check a config file; every violation is listed.
pub fn validate_config(path: impl AsRef<Path>) -> Result<Vec<String>, RunError> {
    let path = path.as_ref();
    if let Err(e) = fs::metadata(path) {
        return Err(io_err(path, e));
    }
    match Config::load(path) {
        Ok(c) => Ok(c.violations()),
        Err(FlocError::Io { path, source }) => Err(io_err(&path, source)),
        Err(e) => Ok(vec![e.to_string()]),
    }
}

enum State {
    Bins { rho: BinDensity, redirected: f64 },
    Column(ColumnState),
}

/// Everything a run needs after the config is resolved.
struct Setup {
    cfg: Config,
    grid: Arc<LambdaGrid>,
    ks: KernelSet,
    op: Operator,
    order: usize,
    mode: Mode,
    /// Cell means of the weight, when one is configured.
    weight_means: Option<Vec<f64>>,
}

pub fn run(
    config_path: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    opts: RunOptions,
) -> Result<RunOutcome, RunError> {
    let config_path = config_path.as_ref();
    let out_dir = out_dir.as_ref();
    let cfg = Config::load(config_path).map_err(|e| match e {
        FlocError::Io { path, source } => io_err(&path, source),
        other => RunError::Config(other.to_string()),
    })?;
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(RunError::Config(violations.join("; ")));
    }
    if opts.quad_order == Some(0) {
        return Err(RunError::Config("--quad-order: must be at least 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let base = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let grid = cfg.build_grid()?;
    let ks = cfg.build_kernels()?;
    let order = opts.quad_order.unwrap_or(cfg.kernels.quad_order);
    let weight_means = match cfg.bio()? {
        Some(b) => Some(grid.cell_means(order, b.weight())?),
        None => None,
    };
    let setup = Setup {
        op: cfg.operator(),
        mode: opts.mode.unwrap_or(cfg.kernels.mode),
        cfg,
        grid,
        ks,
        order,
        weight_means,
    };

    let mut report = String::new();
    let result = execute(&setup, &base, out_dir, opts, &mut report);
    if let Err(e) = &result {
        let _ = writeln!(report, "\nrun aborted: {e}");
    }
    let report_path = out_dir.join("report.txt");
    fs::write(&report_path, &report).map_err(|e| io_err(&report_path, e))?;
    let mut outcome = result?;
    outcome.report = report;
    Ok(outcome)
}

fn execute(
    s: &Setup,
    base: &Path,
    out_dir: &Path,
    opts: RunOptions,
    report: &mut String,
) -> Result<RunOutcome, RunError> {
    let cfg = &s.cfg;
    let _ = writeln!(report, "flocbal run report");
    let _ = writeln!(
        report,
        "scenario: {:?}, operator {:?}, t_end {}, dt {}",
        cfg.scenario.mode, s.op, cfg.scenario.t_end, cfg.scenario.dt
    );
    let _ = writeln!(
        report,
        "grid: {} bins on [{}, {}] ({:?})",
        s.grid.len(),
        s.grid.lambda_min(),
        s.grid.lambda_max(),
        s.grid.spacing()
    );
    let _ = writeln!(report, "kernels: {:?}", s.ks);
    let _ = writeln!(
        report,
        "quadrature order {}, table mode {:?}",
        s.order, s.mode
    );
    let _ = writeln!(report, "\nformula corrections applied:");
    let _ = writeln!(
        report,
        "  - equilibrium density uses exp(-(lambda - lambda_min)/sigma); a growing exponential cannot be normalized"
    );
    let _ = writeln!(
        report,
        "  - large-fragment gain coefficients carry the factor (lambda'^d - lambda^d)^((1-d)/d) once, not twice"
    );

    let column_field = cfg.column_field(base)?;
    let rho0 = initial_density(s)?;
    let initial_state = match (cfg.scenario.mode, &cfg.column) {
        (RunMode::Column, Some(c)) => {
            let mut st = ColumnState::uniform(c.depth, c.nz, &rho0)?;
            st.time = 0.0;
            State::Column(st)
        }
        _ => State::Bins {
            rho: rho0,
            redirected: 0.0,
        },
    };

    // fluid state per height cell (or a single one in 0-D)
    let fluids: Vec<FluidField> = match (&initial_state, &column_field) {
        (State::Column(st), Some(f)) => st.z_centers().iter().map(|&z| f.at(z)).collect(),
        _ => vec![cfg.fluid],
    };
    let distinct = distinct_fluids(&fluids);

    // coefficient tables, one per distinct fluid state
    let mut tables: Vec<Arc<CoeffTable>> = Vec::new();
    if s.op == Operator::Gbar || opts.check_conservation {
        for (i, f) in distinct.iter().enumerate() {
            let tab = match (&cfg.kernels.cache, distinct.len()) {
                (Some(p), 1) => CoeffTable::load_or_precompute(
                    base.join(p),
                    &s.ks,
                    f,
                    &s.grid,
                    s.order,
                    s.mode,
                )?,
                _ => CoeffTable::precompute(&s.ks, f, &s.grid, s.order, s.mode)?,
            };
            if i == 0 || s.op == Operator::Gbar {
                tables.push(Arc::new(tab));
            }
        }
    }

    if s.op == Operator::Gbar {
        let _ = writeln!(report);
        for (i, f) in distinct.iter().enumerate() {
            let v = validate(&s.ks, f, &s.grid);
            let _ = write!(report, "fluid state {i}: {v}");
        }
    }

    let mut conservation = None;
    let mut conservation_ok = true;
    if opts.check_conservation {
        let mut worst: Option<ConservationReport> = None;
        for t in &tables {
            let r = check_conservation(t, CONSERVATION_TRIALS, cfg.output.seed);
            if worst
                .as_ref()
                .is_none_or(|w| r.max_residual > w.max_residual)
            {
                worst = Some(r);
            }
        }
        if let Some(r) = worst {
            conservation_ok = r.max_residual <= cfg.output.conservation_tol;
            let line = format!(
                "conservation check ({:?}, {} trials, seed {}): max residual {:.3e}, mean {:.3e}, threshold {:.1e}: {}",
                r.mode,
                r.trials,
                cfg.output.seed,
                r.max_residual,
                r.mean_residual,
                cfg.output.conservation_tol,
                if conservation_ok { "pass" } else { "FAIL" }
            );
            println!("{line}");
            let _ = writeln!(report, "\n{line}");
            conservation = Some(r);
        }
    }

    // per-height relaxation operators
    let relaxations: Vec<Relaxation> = if matches!(s.op, Operator::Relax | Operator::RelaxWeighted)
    {
        let r = cfg
            .relaxation
            .as_ref()
            .ok_or_else(|| RunError::Config("relaxation: missing".into()))?;
        distinct
            .iter()
            .map(|f| {
                let mut p =
                    RelaxParams::new(r.t_eq, s.grid.lambda_min(), sigma_eq(f, r.sigma0, r.c_k))?;
                if s.op == Operator::RelaxWeighted {
                    if let Some(b) = cfg.bio()? {
                        p = p.with_weight(Arc::new(b.weight()));
                    }
                }
                Relaxation::new(&p, &s.grid, s.order)
            })
            .collect::<crate::Result<_>>()?
    } else {
        Vec::new()
    };
    let node_index: Vec<usize> = fluids
        .iter()
        .map(|f| distinct.iter().position(|d| d == f).unwrap_or(0))
        .collect();

    let model = match (&column_field, &cfg.column) {
        (Some(field), Some(c)) if cfg.scenario.mode == RunMode::Column => {
            let mut m = ColumnModel::new(field.clone(), c.settling)?;
            m.c_mu = c.c_mu;
            m.nu_scale = c.nu_scale.clone();
            Some(m)
        }
        _ => None,
    };
    let node_tables: Vec<Arc<CoeffTable>> = if tables.len() <= 1 {
        tables.clone()
    } else {
        node_index.iter().map(|&i| tables[i].clone()).collect()
    };

    // time loop
    let t_end = cfg.scenario.t_end;
    let dt = cfg.scenario.dt;
    let steps = (t_end / dt - 1e-9).ceil().max(0.0) as u64;
    let stride = cfg.output.stride as u64;
    let series_path = out_dir.join("series.csv");
    let mut series = csv::Writer::from_path(&series_path).map_err(|e| io_err(&series_path, e))?;
    series
        .write_record(SERIES_HEADER)
        .map_err(|e| io_err(&series_path, e))?;

    let mut state = initial_state;
    let mut t = 0.0;
    let budget0 = budget(s, &state);
    let mut worst_drift = 0.0f64;
    let mut rows = 0;
    for step in 0..=steps {
        if step > 0 {
            let h = if step == steps { t_end - t } else { dt };
            advance(
                s,
                &mut state,
                h,
                &relaxations,
                &node_index,
                &node_tables,
                model.as_ref(),
            )?;
            t = if step == steps { t_end } else { t + h };
        }
        if step % stride == 0 || step == steps {
            let row = observe(s, &state, t);
            series.serialize(row).map_err(|e| io_err(&series_path, e))?;
            series.flush().map_err(|e| io_err(&series_path, e))?;
            write_dist(s, &state, t, out_dir)?;
            rows += 1;
            let b = budget(s, &state);
            let drift = if budget0 != 0.0 {
                ((b - budget0) / budget0).abs()
            } else {
                b.abs()
            };
            worst_drift = worst_drift.max(drift);
        }
    }
    let budget_ok = worst_drift <= cfg.output.budget_tol;
    let what = if s.op == Operator::RelaxWeighted {
        "weighted mass"
    } else {
        "suspended + deposited mass"
    };
    let _ = writeln!(
        report,
        "\nbudget ({what}): max relative drift {worst_drift:.3e}, tolerance {:.1e}: {}",
        cfg.output.budget_tol,
        if budget_ok { "pass" } else { "FAIL" }
    );
    let (deposited, redirected) = match &state {
        State::Bins { redirected, .. } => (0.0, *redirected),
        State::Column(c) => (c.deposited, c.redirected),
    };
    let _ = writeln!(
        report,
        "deposited {deposited:e}, redirected into the top bin {redirected:e}"
    );
    let _ = writeln!(report, "rows written: {rows}");
    Ok(RunOutcome {
        rows,
        budget_drift: worst_drift,
        budget_ok,
        conservation,
        conservation_ok,
        report: String::new(),
    })
}

fn distinct_fluids(fluids: &[FluidField]) -> Vec<FluidField> {
    let mut out: Vec<FluidField> = Vec::new();
    for f in fluids {
        if !out.contains(f) {
            out.push(*f);
        }
    }
    out
}

fn initial_density(s: &Setup) -> Result<BinDensity, RunError> {
    if let crate::config::InitialCfg::Values { values } = &s.cfg.initial {
        return Ok(BinDensity::new(s.grid.clone(), values.clone())?);
    }
    let (shape, mass) = s.cfg.initial_shape();
    let p = project(shape, &s.grid, s.order)?;
    let total = p.density.total_mass();
    let mass = mass.unwrap_or(total);
    if mass == 0.0 {
        return Ok(BinDensity::zeros(s.grid.clone()));
    }
    if !(total > 0.0) {
        return Err(RunError::Config(
            "initial: shape has no mass on the grid".into(),
        ));
    }
    let scale = mass / total;
    Ok(p.density
        .with_values(p.density.values().iter().map(|v| v * scale).collect())?)
}

fn advance(
    s: &Setup,
    state: &mut State,
    h: f64,
    relaxations: &[Relaxation],
    node_index: &[usize],
    tables: &[Arc<CoeffTable>],
    model: Option<&ColumnModel>,
) -> Result<(), RunError> {
    let scheme = s.cfg.scenario.scheme;
    match state {
        State::Bins { rho, redirected } => {
            if s.op == Operator::Gbar {
                let out = euler_step(&tables[0], rho, h)?;
                *redirected += out.redirected;
                *rho = out.density;
            } else {
                *rho = relaxations[0].integrate(rho, h, h, scheme)?;
            }
        }
        State::Column(col) => {
            let model = model.ok_or_else(|| RunError::Config("column: missing".into()))?;
            if s.op == Operator::Gbar {
                *col = model.split_step(col, tables, h)?;
            } else {
                let mut next = model.transport_step(col, h)?;
                let n = next.bins();
                let mut values = next.values().to_vec();
                for k in 0..next.nz() {
                    let r = &relaxations[node_index[k]];
                    let out = r.integrate(&next.node_density(k)?, h, h, scheme)?;
                    values[k * n..(k + 1) * n].copy_from_slice(out.values());
                }
                let (dep, red, time) = (next.deposited, next.redirected, next.time);
                next = ColumnState::new(next.z_edges().to_vec(), next.grid().clone(), values)?;
                next.deposited = dep;
                next.redirected = red;
                next.time = time;
                *col = next;
            }
        }
    }
    Ok(())
}

type Row = (f64, f64, f64, f64, f64, f64);

fn node_row(s: &Setup, rho: &BinDensity) -> (f64, f64, f64) {
    let mass = rho.total_mass();
    let number = number_total(rho, &s.ks);
    let weighted = match &s.weight_means {
        Some(m) => weighted_mass_with_means(rho, m),
        None => mass,
    };
    (mass, number, weighted)
}

fn observe(s: &Setup, state: &State, t: f64) -> Row {
    match state {
        State::Bins { rho, redirected } => {
            let (m, n, w) = node_row(s, rho);
            (t, m, n, w, 0.0, *redirected)
        }
        State::Column(col) => {
            let (mut m, mut n, mut w) = (0.0, 0.0, 0.0);
            let z = col.z_edges();
            for k in 0..col.nz() {
                let dz = z[k + 1] - z[k];
                let rho = BinDensity::new(col.grid().clone(), col.row(k).to_vec())
                    .expect("column rows are valid densities");
                let (a, b, c) = node_row(s, &rho);
                m += dz * a;
                n += dz * b;
                w += dz * c;
            }
            (t, m, n, w, col.deposited, col.redirected)
        }
    }
}

fn budget(s: &Setup, state: &State) -> f64 {
    let (_, m, _, w, dep, _) = observe(s, state, 0.0);
    if s.op == Operator::RelaxWeighted {
        w
    } else {
        m + dep
    }
}

/// Snapshot file name for time `t`.
pub fn dist_name(t: f64) -> String {
    format!("dist_{t}.csv")
}

fn write_dist(s: &Setup, state: &State, t: f64, out_dir: &Path) -> Result<(), RunError> {
    let path: PathBuf = out_dir.join(dist_name(t));
    let values: Vec<f64> = match state {
        State::Bins { rho, .. } => rho.values().to_vec(),
        State::Column(col) => {
            // depth average
            let z = col.z_edges();
            let depth = z[z.len() - 1] - z[0];
            let mut acc = vec![0.0; col.bins()];
            for k in 0..col.nz() {
                let dz = z[k + 1] - z[k];
                for (a, v) in acc.iter_mut().zip(col.row(k)) {
                    *a += dz * v / depth;
                }
            }
            acc
        }
    };
    let file = File::create(&path).map_err(|e| io_err(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(DIST_HEADER).map_err(|e| io_err(&path, e))?;
    for (i, v) in values.iter().enumerate() {
        let (lo, hi) = s.grid.cell(i);
        w.serialize((i, lo, hi, *v)).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(())
}
