//! Brute-force references for the discrete scheme: a dense adaptive ODE
//! solve of the bin system, and a stochastic particle simulation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::discrete::CoeffTable;
use crate::error::{FlocError, Result};
use crate::fluid::FluidField;
use crate::grid::BinDensity;
use crate::kernels::KernelSet;

// Dormand–Prince 5(4) tableau; the system is autonomous so the nodes
// are not needed.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrate `dρ/dt = Ḡ(ρ)` to `t_end` with local error per step below
/// `tol` in the mixed norm `|e_i| / (tol·(max|y| + |y_i|))`.
pub fn dense_ode_oracle(
    tab: &CoeffTable,
    rho0: &BinDensity,
    t_end: f64,
    tol: f64,
) -> Result<BinDensity> {
    if rho0.grid().edges() != tab.grid().edges() {
        return Err(FlocError::GridMismatch(
            "density and table grids differ".into(),
        ));
    }
    if !(tol > 0.0) {
        return Err(FlocError::param("tol", "must be positive"));
    }
    if !(t_end >= 0.0) {
        return Err(FlocError::param("t_end", "must be nonnegative"));
    }
    let n = tab.len();
    let mut y = rho0.values().to_vec();
    let mut k = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut y5 = vec![0.0; n];
    tab.apply_slice(&y, &mut k[0]);
    if t_end == 0.0 || k[0].iter().all(|v| *v == 0.0) {
        return rho0.with_values(y);
    }
    let scale0 = y
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let rate = k[0].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut h = (0.01 * scale0 / rate).min(t_end);
    let mut t = 0.0;
    while t < t_end {
        h = h.min(t_end - t);
        if h <= 1e-14 * t_end.max(t) {
            return Err(FlocError::StepUnderflow { t, h });
        }
        for s in 1..7 {
            for i in 0..n {
                let mut acc = y[i];
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += h * A[s][j] * kj[i];
                }
                stage[i] = acc;
            }
            tab.apply_slice(&stage, &mut k[s]);
            if s == 6 {
                y5.copy_from_slice(&stage);
            }
        }
        // the seventh stage sits at the 5th-order solution (FSAL)
        let ymax = y.iter().chain(&y5).fold(0.0f64, |m, v| m.max(v.abs()));
        let mut err = 0.0f64;
        for i in 0..n {
            let mut e = 0.0;
            for s in 0..7 {
                e += (B5[s] - B4[s]) * k[s][i];
            }
            let sc = tol * (ymax + y5[i].abs()).max(f64::MIN_POSITIVE);
            err = err.max((h * e).abs() / sc);
        }
        if err <= 1.0 {
            t = if t_end - (t + h) <= 1e-14 * t_end {
                t_end
            } else {
                t + h
            };
            y.copy_from_slice(&y5);
            k.swap(0, 6);
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
    }
    rho0.with_values(y)
}

/// Result of one stochastic run.
#[derive(Debug, Clone)]
pub struct McOutcome {
    /// Binwise mass density; particles past `λ_max` count in the top bin.
    pub density: BinDensity,
    /// Particles per unit mass concentration, `N / ∫ ρ₀ dλ`. Every particle
    /// carries mass concentration `1/v_eff`.
    pub v_eff: f64,
    /// Number concentration `Σ 1/(v_eff m(λ_p))` taken from the particles
    /// themselves rather than the bins.
    pub number: f64,
    pub aggregations: u64,
    pub fragmentations: u64,
    pub particles: usize,
}

/// Prefix sums over per-particle weights with O(log n) update and search.
struct Fenwick {
    tree: Vec<f64>,
    raw: Vec<f64>,
}

impl Fenwick {
    fn new(raw: Vec<f64>) -> Self {
        let n = raw.len();
        let mut tree = vec![0.0; n + 1];
        for (i, w) in raw.iter().enumerate() {
            let mut k = i + 1;
            while k <= n {
                tree[k] += w;
                k += k & k.wrapping_neg();
            }
        }
        Fenwick { tree, raw }
    }

    fn set(&mut self, i: usize, w: f64) {
        let delta = w - self.raw[i];
        self.raw[i] = w;
        let mut k = i + 1;
        while k < self.tree.len() {
            self.tree[k] += delta;
            k += k & k.wrapping_neg();
        }
    }

    fn total(&self) -> f64 {
        let mut k = self.tree.len() - 1;
        let mut s = 0.0;
        while k > 0 {
            s += self.tree[k];
            k &= k - 1;
        }
        s
    }

    /// Index whose cumulative range contains `u`, for `0 ≤ u < total`.
    fn find(&self, mut u: f64) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= u {
                pos = next;
                u -= self.tree[next];
            }
            step >>= 1;
        }
        pos.min(n - 1)
    }
}

/// Mass-flow particle simulation. `n` particles are drawn from the mass
/// density `ρ₀`, so each carries the same mass concentration `w = M/n` and
/// the population size never changes. A particle at `x` jumps to
/// `agg(x, y)` at rate `B_a(x, y)·w/m(y)` against every partner `y`, which
/// leaves the partner in place; on breakup it keeps one piece, chosen with
/// probability proportional to mass. In the mean-field limit this is the
/// continuous mass-density equation, and mass is conserved exactly since
/// every particle always stands for `w`.
pub fn particle_mc_oracle(
    ks: &KernelSet,
    fluid: &FluidField,
    n: usize,
    rho0: &BinDensity,
    t_end: f64,
    seed: u64,
) -> Result<McOutcome> {
    if n < 1000 {
        return Err(FlocError::param("N", "need at least 1000 particles"));
    }
    let grid = rho0.grid().clone();
    if (grid.lambda_min() - ks.lambda_min()).abs() > 1e-12 * ks.lambda_min() {
        return Err(FlocError::GridMismatch(
            "grid and kernels disagree on lambda_min".into(),
        ));
    }
    let mass = rho0.total_mass();
    if !(mass > 0.0) {
        return Err(FlocError::param("rho0", "needs positive mass"));
    }
    let w = mass / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // bins by mass, then uniform in λ since ρ is flat inside a bin
    let mut cdf = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    for (i, r) in rho0.values().iter().enumerate() {
        acc += r * grid.width(i);
        cdf.push(acc);
    }
    let mut sizes: Vec<f64> = (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            let i = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
            let (lo, hi) = grid.cell(i);
            (lo + rng.random::<f64>() * (hi - lo)).clamp(lo, hi)
        })
        .collect();
    let mut inv_mass = Fenwick::new(sizes.iter().map(|x| 1.0 / ks.mass_of(*x)).collect());

    let mut agg_major = 0.0f64;
    let mut frag_major = 0.0f64;
    let mut biggest = sizes.iter().fold(0.0f64, |m, x| m.max(*x));
    if ks.has_aggregation() {
        let lmin = ks.lambda_min();
        agg_major = ks
            .b_a(fluid, biggest, biggest)
            .max(ks.b_a(fluid, lmin, lmin));
    }
    if ks.has_fragmentation() {
        for &x in &sizes {
            frag_major = frag_major.max(ks.b_f(fluid, x));
        }
    }

    let np = n as f64;
    let (mut t, mut n_agg, mut n_frag) = (0.0, 0u64, 0u64);
    loop {
        // the i == j term is included in the bound and always rejected
        let ra = agg_major * w * np * inv_mass.total();
        let rf = frag_major * np;
        let total = ra + rf;
        if !total.is_finite() {
            return Err(FlocError::RateOverflow(format!("total rate {total}")));
        }
        if total <= 0.0 {
            break;
        }
        t += -(1.0 - rng.random::<f64>()).ln() / total;
        if t > t_end {
            break;
        }
        if rng.random::<f64>() * total < ra {
            let i = rng.random_range(0..n);
            let j = inv_mass.find(rng.random::<f64>() * inv_mass.total());
            if i == j {
                continue;
            }
            let b = ks.b_a(fluid, sizes[i], sizes[j]);
            if b > agg_major {
                // majorant assumed monotone; widen it and move on
                agg_major = b;
            }
            if rng.random::<f64>() * agg_major < b {
                let merged = ks.agg_size(sizes[i], sizes[j]);
                sizes[i] = merged;
                inv_mass.set(i, 1.0 / ks.mass_of(merged));
                if merged > biggest {
                    biggest = merged;
                    agg_major = agg_major.max(ks.b_a(fluid, biggest, biggest));
                }
                if ks.has_fragmentation() {
                    frag_major = frag_major.max(ks.b_f(fluid, merged));
                }
                n_agg += 1;
            }
        } else {
            let i = rng.random_range(0..n);
            let x = sizes[i];
            let b = ks.b_f(fluid, x);
            if rng.random::<f64>() * frag_major < b {
                let small = ks.sample_fragment(fluid, x, rng.random::<f64>())?;
                let large = ks.complement(x, small);
                let keep_small = rng.random::<f64>() * ks.mass_of(x) < ks.mass_of(small);
                sizes[i] = if keep_small { small } else { large };
                inv_mass.set(i, 1.0 / ks.mass_of(sizes[i]));
                n_frag += 1;
            }
        }
    }

    let mut values = vec![0.0; grid.len()];
    let top = grid.len() - 1;
    for &x in &sizes {
        let i = grid
            .bin_index(x)
            .unwrap_or(if x < grid.lambda_min() { 0 } else { top });
        values[i] += w;
    }
    for (i, v) in values.iter_mut().enumerate() {
        *v /= grid.width(i);
    }
    Ok(McOutcome {
        density: rho0.with_values(values)?,
        v_eff: 1.0 / w,
        number: w * inv_mass.total(),
        aggregations: n_agg,
        fragmentations: n_frag,
        particles: n,
    })
}
