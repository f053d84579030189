//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs as a plain binary (`harness = false`).

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flocbal::aggfrag::{mass_balance, ContinuousDensity};
use flocbal::bioagg::BioParams;
use flocbal::column::{settling_velocity, ColumnModel, ColumnState, SettlingLaw};
use flocbal::discrete::{check_conservation, euler_step, CoeffTable, Mode};
use flocbal::fluid::{uniform_field, FluidField};
use flocbal::grid::{number_total, project, BinDensity, LambdaGrid, Spacing};
use flocbal::kernels::{
    validate, Aggregation, Daughter, Fragmentation, KernelSet, NORMALIZATION_TOL,
    TILDE_NORMALIZATION_TOL,
};
use flocbal::oracle::{dense_ode_oracle, particle_mc_oracle};
use flocbal::quadrature::{Adaptive, GaussRule, QuadSpec};
use flocbal::relaxation::{d_eq, RelaxParams, Relaxation, Scheme};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fluid() -> FluidField {
    FluidField {
        k: 0.01,
        eps: 1e-2,
        ..Default::default()
    }
}

fn geometric(lo: f64, hi: f64, n: usize) -> Arc<LambdaGrid> {
    Arc::new(LambdaGrid::new(lo, hi, n, Spacing::Geometric).unwrap())
}

fn rel_max_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

fn secs(d: Duration) -> String {
    format!("{:.3}s", d.as_secs_f64())
}

fn relaxation_oracle() -> Outcome {
    let start = Instant::now();
    let t_eq = 1.0;
    let g = Arc::new(LambdaGrid::new(5.0, 125.0, 128, Spacing::Uniform).unwrap());
    let params = RelaxParams::new(t_eq, 5.0, 3.0).unwrap();
    let op = Relaxation::new(&params, &g, 4).unwrap();
    let rho0 = project(|x| (-(x - 40.0).powi(2) / 200.0).exp(), &g, 4)
        .unwrap()
        .density;
    let num = op
        .integrate(&rho0, 5.0 * t_eq, t_eq / 100.0, Scheme::Rk4)
        .unwrap();
    let exact = op.exact(&rho0, 5.0 * t_eq).unwrap();
    let elapsed = start.elapsed();
    let err = rel_max_err(num.values(), exact.values());
    let drift = ((num.total_mass() - rho0.total_mass()) / rho0.total_mass()).abs();
    check(
        err <= 1e-8 && drift <= 1e-12 && elapsed < Duration::from_secs(1),
        format!(
            "max rel err {err:.2e}, mass drift {drift:.2e}, {}",
            secs(elapsed)
        ),
    )
}

fn weighted_invariant() -> Outcome {
    let t_eq = 2.0;
    let bio = BioParams::new(5.0, 1.0, 1.0, 0.5, 1.0).unwrap();
    let g = geometric(5.0, 200.0, 96);
    let params = RelaxParams::new(t_eq, 5.0, 4.0)
        .unwrap()
        .with_weight(Arc::new(bio.weight()));
    let op = Relaxation::new(&params, &g, 4).unwrap();
    let f = op.weight_means().unwrap().to_vec();
    let w = |rho: &BinDensity| -> f64 {
        rho.values()
            .iter()
            .enumerate()
            .map(|(i, r)| r * f[i] * g.width(i))
            .sum()
    };
    let rho0 = project(|x| (-(x - 60.0).abs() / 15.0).exp(), &g, 4)
        .unwrap()
        .density;
    let out = op
        .integrate(&rho0, 5.0 * t_eq, t_eq / 100.0, Scheme::Rk4)
        .unwrap();
    let drift = ((w(&out) - w(&rho0)) / w(&rho0)).abs();
    check(drift <= 1e-10, format!("weighted mass drift {drift:.2e}"))
}

fn bio_additivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst1 = 0.0f64;
    for _ in 0..1000 {
        let p = BioParams::new(
            rng.random_range(0.5..10.0),
            rng.random_range(0.0..5.0),
            rng.random_range(0.5..3.0),
            rng.random_range(0.0..3.0),
            1.0,
        )
        .unwrap();
        let a = p.lambda_min * rng.random_range(1.0..50.0);
        let b = p.lambda_min * rng.random_range(1.0..50.0);
        let c = p.aggregate_length(a, b).unwrap();
        let fm = |x: f64| p.f_bio(x).unwrap() * p.mass(x).unwrap();
        let (lhs, rhs) = (fm(c), fm(a) + fm(b));
        worst1 = worst1.max(((lhs - rhs) / rhs).abs());
    }
    let mut worst_d = 0.0f64;
    for d in [2.0, 3.0] {
        for _ in 0..500 {
            let p = BioParams::new(
                rng.random_range(0.5..10.0),
                rng.random_range(0.0..5.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..3.0),
                d,
            )
            .unwrap();
            let a = p.lambda_min * rng.random_range(1.0..20.0);
            let b = p.lambda_min * rng.random_range(1.0..20.0);
            let c = p.aggregate_length(a, b).unwrap();
            let sed = |x: f64| p.theta(x).unwrap() * x.powf(d);
            let (lhs, rhs) = (sed(c), sed(a) + sed(b));
            worst_d = worst_d.max(((lhs - rhs) / rhs).abs());
        }
    }
    check(
        worst1 <= 1e-14 && worst_d <= 1e-10,
        format!("d=1 worst {worst1:.2e}, d=2,3 worst {worst_d:.2e}"),
    )
}

fn equilibrium_shape() -> Outcome {
    let quad = Adaptive::new(QuadSpec::with_tol(1e-13)).unwrap();
    let rule = GaussRule::new(4).unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    for (lmin, sigma) in [(5.0, 1.0), (5.0, 3.0)] {
        let hi = lmin + 40.0 * sigma;
        let integral = quad.integrate(lmin, hi, |x| d_eq(x, lmin, sigma)).unwrap();
        let panels = 2000;
        let h = (hi - lmin) / panels as f64;
        let nodes: Vec<f64> = (0..panels)
            .flat_map(|p| {
                let a = lmin + p as f64 * h;
                rule.mapped(a, a + h).map(|(x, _)| x).collect::<Vec<_>>()
            })
            .collect();
        let k = (0..nodes.len())
            .max_by(|&i, &j| d_eq(nodes[i], lmin, sigma).total_cmp(&d_eq(nodes[j], lmin, sigma)))
            .unwrap();
        let gap = (nodes[k + 1] - nodes[k]).max(nodes[k] - nodes[k - 1]);
        let off = (nodes[k] - (lmin + sigma)).abs();
        ok &= (integral - 1.0).abs() <= 1e-10 && off <= gap;
        details.push(format!(
            "({lmin},{sigma}): integral-1 {:.1e}, mode offset {off:.1e} (node gap {gap:.1e})",
            integral - 1.0
        ));
    }
    check(ok, details.join("; "))
}

fn builtin_families(d: f64) -> Vec<KernelSet> {
    let aggs = [
        Aggregation::None,
        Aggregation::Constant { beta0: 0.5 },
        Aggregation::Sum { beta0: 0.1 },
        Aggregation::Shear {
            beta0: 1e-3,
            nu_w: 1e-6,
        },
    ];
    let frags = [
        Fragmentation::None,
        Fragmentation::Constant { k_f: 0.2 },
        Fragmentation::Power { k_f: 0.1, p: 1.5 },
    ];
    let mut out = Vec::new();
    for a in &aggs {
        for f in &frags {
            for dau in [Daughter::UniformLength, Daughter::UniformMass] {
                out.push(KernelSet::new(d, 1.0, 1.0, a.clone(), f.clone(), dau).unwrap());
            }
        }
    }
    out
}

fn kernel_structure() -> Outcome {
    let probe = LambdaGrid::new(1.0, 100.0, 24, Spacing::Geometric).unwrap();
    let (mut sets, mut worst_n, mut worst_t) = (0, 0.0f64, 0.0f64);
    for d in [1.0, 2.0, 3.0] {
        for ks in builtin_families(d) {
            let r = validate(&ks, &fluid(), &probe);
            if !r.passed() {
                return Err(format!("d={d} {ks:?}: {r}"));
            }
            sets += 1;
            worst_n = worst_n.max(r.max_normalization_error);
            worst_t = worst_t.max(r.max_tilde_normalization_error);
        }
    }
    check(
        worst_n <= NORMALIZATION_TOL && worst_t <= TILDE_NORMALIZATION_TOL,
        format!(
            "{sets} kernel sets, max |int B_e - 1| {worst_n:.1e}, max |int B~_e - 1| {worst_t:.1e}"
        ),
    )
}

fn continuous_conservation() -> Outcome {
    let tol = 1e-8;
    let mut worst = 0.0f64;
    for d in [1.0, 3.0] {
        let configs = [
            (Aggregation::None, Fragmentation::Power { k_f: 0.5, p: 1.0 }),
            (Aggregation::Sum { beta0: 0.2 }, Fragmentation::None),
            (
                Aggregation::Constant { beta0: 1.0 },
                Fragmentation::Constant { k_f: 0.5 },
            ),
        ];
        for (agg, frag) in configs {
            let ks = KernelSet::new(d, 1.0, 1.0, agg, frag, Daughter::UniformLength).unwrap();
            let lmax = 20.0;
            let top = lmax / 2f64.powf(1.0 / d);
            let rho = ContinuousDensity::new(
                move |x: f64| {
                    let s = (x - 1.0) / (top - 1.0);
                    (s * (1.0 - s)).max(0.0) * (-x / 4.0).exp()
                },
                1.0,
                lmax,
            )
            .unwrap()
            .with_support(1.0, top)
            .unwrap();
            let mb = mass_balance(&ks, &fluid(), &rho, QuadSpec::with_tol(tol))
                .map_err(|e| format!("d={d}: {e}"))?;
            worst = worst.max(mb.abs());
        }
    }
    check(
        worst <= 10.0 * tol,
        format!(
            "max |int G| {worst:.2e} over 6 configurations (bound {:.0e})",
            10.0 * tol
        ),
    )
}

fn discrete_conservation() -> Outcome {
    let start = Instant::now();
    let ks = KernelSet::new(
        3.0,
        1.0,
        1.0,
        Aggregation::Shear {
            beta0: 1e-3,
            nu_w: 1e-6,
        },
        Fragmentation::Power { k_f: 0.1, p: 1.0 },
        Daughter::UniformLength,
    )
    .unwrap();
    let g = geometric(1.0, 50.0, 64);
    let corrected = CoeffTable::precompute(&ks, &fluid(), &g, 4, Mode::Corrected).unwrap();
    let corr = check_conservation(&corrected, 100, 1).max_residual;
    let raw: Vec<f64> = [1, 2, 4]
        .iter()
        .map(|&p| {
            let tab = CoeffTable::precompute(&ks, &fluid(), &g, p, Mode::Raw).unwrap();
            check_conservation(&tab, 100, 1).max_residual
        })
        .collect();
    let elapsed = start.elapsed();
    let decreasing = raw.windows(2).all(|w| w[1] < w[0]);
    check(
        corr <= 1e-12 && decreasing && elapsed < Duration::from_secs(5),
        format!(
            "corrected {corr:.2e}, raw by order 1/2/4: {:.2e} {:.2e} {:.2e}, {}",
            raw[0],
            raw[1],
            raw[2],
            secs(elapsed)
        ),
    )
}

fn constant_kernel() -> Outcome {
    let beta0 = 1.0;
    let ks = KernelSet::constant_aggregation(1.0, 1.0, 1.0, beta0).unwrap();
    let g = geometric(1.0, 1000.0, 128);
    let tab = CoeffTable::precompute(&ks, &fluid(), &g, 4, Mode::Corrected).unwrap();
    let p = project(|x| x * (-(x - 1.0)).exp(), &g, 4).unwrap().density;
    let n_start = number_total(&p, &ks);
    let mut rho = p
        .with_values(p.values().iter().map(|v| v / n_start).collect())
        .unwrap();
    let n0 = number_total(&rho, &ks);
    let m0 = rho.total_mass();
    let dt = 0.005;
    let (mut t, mut worst, mut ratio) = (0.0, 0.0f64, 1.0);
    while ratio > 0.5 {
        rho = euler_step(&tab, &rho, dt)
            .map_err(|e| e.to_string())?
            .density;
        t += dt;
        let n = number_total(&rho, &ks);
        let want = n0 / (1.0 + beta0 * n0 * t / 2.0);
        worst = worst.max(((n - want) / want).abs());
        ratio = n / n0;
    }
    let drift = ((rho.total_mass() - m0) / m0).abs();
    check(
        worst <= 0.01 && drift <= 1e-10,
        format!("max rel error in N {worst:.2e} down to N/N0 = {ratio:.3}, mass drift {drift:.2e}"),
    )
}

fn march(tab: &CoeffTable, rho: &BinDensity, t_end: f64, steps: usize) -> BinDensity {
    let dt = t_end / steps as f64;
    let mut r = rho.clone();
    for _ in 0..steps {
        r = euler_step(tab, &r, dt).unwrap().density;
    }
    r
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let agg = if rng.random::<bool>() {
        Aggregation::Constant {
            beta0: rng.random_range(0.05..0.2),
        }
    } else {
        Aggregation::Sum {
            beta0: rng.random_range(0.005..0.02),
        }
    };
    let frag = if rng.random::<bool>() {
        Fragmentation::Constant {
            k_f: rng.random_range(0.05..0.2),
        }
    } else {
        Fragmentation::Power {
            k_f: rng.random_range(0.5..2.0),
            p: rng.random_range(0.5..1.5),
        }
    };
    let ks = KernelSet::new(1.0, 1.0, 1.0, agg, frag, Daughter::UniformLength).unwrap();
    let g = geometric(1.0, 16.0, 8);
    let tab = CoeffTable::precompute(&ks, &fluid(), &g, 4, Mode::Corrected).unwrap();
    let rho0 = BinDensity::new(g, (0..8).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
    let t_end = 1.0;
    let reference = dense_ode_oracle(&tab, &rho0, t_end, 1e-12).map_err(|e| e.to_string())?;
    let errs: Vec<f64> = [200, 400, 800]
        .iter()
        .map(|&n| rel_max_err(march(&tab, &rho0, t_end, n).values(), reference.values()))
        .collect();
    let order = (errs[0] / errs[1]).log2().min((errs[1] / errs[2]).log2());
    check(
        order >= 0.9 && errs[2] <= 1e-4,
        format!(
            "{:?} + {:?}: errors {:.2e} {:.2e} {:.2e}, observed order {order:.3}",
            ks.aggregation(),
            ks.fragmentation(),
            errs[0],
            errs[1],
            errs[2]
        ),
    )
}

fn stochastic_cross_check() -> Outcome {
    let start = Instant::now();
    let ks = KernelSet::constant_aggregation(1.0, 1.0, 1.0, 1.0).unwrap();
    let bins = 24;
    let g = geometric(1.0, 64.0, bins);
    let p = project(|x| (-(x - 1.0)).exp(), &g, 4).unwrap().density;
    let n0 = number_total(&p, &ks);
    let rho = p
        .with_values(p.values().iter().map(|v| v / n0).collect())
        .unwrap();
    let t_end = 1.0;
    // deterministic reference on a 4x refined grid, summed back per bin
    let r = 4;
    let fine = Arc::new(g.refine(r).unwrap());
    let rho_fine = BinDensity::new(
        fine.clone(),
        (0..bins * r).map(|j| rho.values()[j / r]).collect(),
    )
    .unwrap();
    let tab = CoeffTable::precompute(&ks, &fluid(), &fine, 4, Mode::Corrected).unwrap();
    let det = dense_ode_oracle(&tab, &rho_fine, t_end, 1e-10).map_err(|e| e.to_string())?;
    let md = det.total_mass();
    let det_frac: Vec<f64> = (0..bins)
        .map(|i| {
            (0..r)
                .map(|s| det.values()[i * r + s] * fine.width(i * r + s))
                .sum::<f64>()
                / md
        })
        .collect();
    let mc =
        particle_mc_oracle(&ks, &fluid(), 100_000, &rho, t_end, 2024).map_err(|e| e.to_string())?;
    let mm = mc.density.total_mass();
    let (mut worst, mut counted) = (0.0f64, 0);
    for (i, &want) in det_frac.iter().enumerate() {
        if want >= 0.02 {
            let f = mc.density.values()[i] * g.width(i) / mm;
            worst = worst.max(((f - want) / want).abs());
            counted += 1;
        }
    }
    let elapsed = start.elapsed();
    check(
        worst <= 0.05 && elapsed < Duration::from_secs(30),
        format!(
            "{counted} bins above 2% mass, worst rel diff {worst:.3}, {} events, {}",
            mc.aggregations,
            secs(elapsed)
        ),
    )
}

fn column_budget() -> Outcome {
    // budget under settling, mixing and aggregation with fragmentation
    let ks = KernelSet::new(
        3.0,
        1.0,
        1.0,
        Aggregation::Constant { beta0: 0.05 },
        Fragmentation::Constant { k_f: 0.01 },
        Daughter::UniformLength,
    )
    .unwrap();
    let g = geometric(1.0, 16.0, 12);
    let f = FluidField {
        k: 1e-3,
        eps: 1e-3,
        ..Default::default()
    };
    let tab = Arc::new(CoeffTable::precompute(&ks, &f, &g, 4, Mode::Corrected).unwrap());
    let profile = project(|x| (-(x - 1.0) / 2.0).exp(), &g, 4)
        .unwrap()
        .density;
    let law = SettlingLaw::new(2e-4, 2.0, 20.0, 4.65).unwrap();
    let model = ColumnModel::new(uniform_field(f, vec![0.0, 2.0]).unwrap(), law).unwrap();
    let mut state = ColumnState::uniform(2.0, 30, &profile).unwrap();
    let b0 = state.budget();
    for _ in 0..1000 {
        state = model
            .split_step(&state, std::slice::from_ref(&tab), 1.0)
            .map_err(|e| e.to_string())?;
    }
    let drift = ((state.budget() - b0) / b0).abs();
    let settled = state.deposited / b0;

    // pure settling of one narrow size class into still water
    let g1 = Arc::new(LambdaGrid::new(2.0, 2.01, 1, Spacing::Uniform).unwrap());
    let c0 = 2.0;
    let depth = 1.0;
    let col = BinDensity::new(g1.clone(), vec![c0 / g1.width(0)]).unwrap();
    let still = FluidField::default();
    let settle = SettlingLaw::new(1e-3, 2.0, 20.0, 4.65).unwrap();
    let m1 = ColumnModel::new(uniform_field(still, vec![0.0, depth]).unwrap(), settle).unwrap();
    let nz = 400;
    let mut s = ColumnState::uniform(depth, nz, &col).unwrap();
    let ws = settling_velocity(&settle, g1.lambda_min(), g1.midpoint(0), c0);
    let t_end = 0.4 * depth / ws;
    let steps = 200;
    for _ in 0..steps {
        s = m1
            .transport_step(&s, t_end / steps as f64)
            .map_err(|e| e.to_string())?;
    }
    // first height (from the top) where the concentration reaches half of c0
    let zc = s.z_centers();
    let mut front = None;
    for k in (1..nz).rev() {
        let (hi, lo) = (s.concentration(k), s.concentration(k - 1));
        if hi < 0.5 * c0 && lo >= 0.5 * c0 {
            let w = (0.5 * c0 - hi) / (lo - hi);
            front = Some(zc[k] + w * (zc[k - 1] - zc[k]));
            break;
        }
    }
    let front = front.ok_or("no settling front found")?;
    let speed = (depth - front) / t_end;
    let speed_err = ((speed - ws) / ws).abs();
    check(
        drift <= 1e-9 && speed_err <= 0.05,
        format!(
            "budget drift {drift:.2e} over 1000 steps ({:.1}% deposited), front speed {speed:.4e} vs W_s {ws:.4e} ({:.2}%)",
            100.0 * settled,
            100.0 * speed_err
        ),
    )
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn determinism() -> Outcome {
    let configs = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut names: Vec<PathBuf> = std::fs::read_dir(&configs)
        .map_err(|e| format!("{}: {e}", configs.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err("no configs found".into());
    }
    let tmp = tempfile::tempdir().unwrap();
    let mut files = 0;
    for cfg in &names {
        let mut runs = Vec::new();
        for r in 0..2 {
            let out = tmp.path().join(format!(
                "{}-{r}",
                cfg.file_stem().unwrap().to_string_lossy()
            ));
            let status = Command::new(env!("CARGO_BIN_EXE_flocbal"))
                .arg("run")
                .arg(cfg)
                .arg("--out")
                .arg(&out)
                .output()
                .unwrap();
            if !status.status.success() {
                return Err(format!(
                    "{} exited with {:?}: {}",
                    cfg.display(),
                    status.status.code(),
                    String::from_utf8_lossy(&status.stderr)
                ));
            }
            runs.push(csv_files(&out));
        }
        if runs[0].is_empty() || runs[0] != runs[1] {
            return Err(format!(
                "{}: CSV outputs differ between runs",
                cfg.display()
            ));
        }
        files += runs[0].len();
    }
    Ok(format!(
        "{} configs, {files} CSV files byte-identical across two runs",
        names.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("relaxation matches closed form", relaxation_oracle),
        ("weighted invariant", weighted_invariant),
        ("biological additivity", bio_additivity),
        ("equilibrium normalization and mode", equilibrium_shape),
        ("kernel structure", kernel_structure),
        ("continuous conservation", continuous_conservation),
        ("discrete conservation", discrete_conservation),
        ("constant-kernel aggregation", constant_kernel),
        ("oracle equivalence", oracle_equivalence),
        ("stochastic cross-check", stochastic_cross_check),
        ("column budget and settling front", column_budget),
        ("determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
