//! Sectional (piecewise-constant) aggregation–fragmentation operator.
//!
//! For `ρ = Σ_i ρ^i 1_{Λ_i}` the operator reduces to
//!
//! ```text
//! Ḡ_i = -B_lf^i ρ^i - Σ_j B_la^{ij} |Λ_j| ρ^i ρ^j + Σ_j B_gf^{ij} |Λ_j| ρ^j
//!       + Σ_{k,l ≤ i} B_ga^{ikl} ρ^k ρ^l   (+ top-bin overflow, see below)
//! ```
//!
//! with cell-averaged coefficients
//!
//! * `B_lf^i = ⟨B_f⟩_{Λ_i}`
//! * `B_la^{ij} = (1/|Λ_i||Λ_j|) ∫_{Λ_i}∫_{Λ_j} B_a(λ, λ')/m(λ')`
//! * `B_gf^{ij} = (1/|Λ_i||Λ_j|) ∫_{Λ_i}∫_{Λ_j} B_f(λ') m(λ)/m(λ') [B_e(λ', λ) + B̃_e(λ', λ)]`
//! * `B_ga^{ikl} = (1/|Λ_i|) ∫_{Λ_i} ½ m(λ) ∫_{Λ_kl(λ)} B_a(λ', λ'')/(m(λ') m(λ'')) λ''^{1-d} λ^{d-1}`
//!
//! where `λ'' = (λ^d - λ'^d)^{1/d}` and `Λ_kl(λ) = {λ' ∈ Λ_k : λ'' ∈ Λ_l}` is an
//! interval computed exactly for every outer node.
//!
//! Aggregates larger than `λ_max` are not dropped: their mass goes to the top
//! cell through `R^{kl} = ½ (L^{kl} + L^{lk})`, where
//! `L^{kl} = ∫_{Λ_k}∫_{Λ_l} 1[λ^d + λ'^d > λ_max^d] B_a(λ, λ')/m(λ')`.
//!
//! In corrected mode each fragmentation column and each ordered aggregation
//! pair is rescaled by one factor so that gains match losses, which makes
//! `Σ_i |Λ_i| Ḡ_i = 0` hold to rounding for every density.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlocError, Result};
use crate::fluid::FluidField;
use crate::grid::{BinDensity, LambdaGrid};
use crate::kernels::KernelSet;
use crate::quadrature::{exact_mean, mean_nodes, GaussRule};

/// Halvings allowed before a step is declared non-positive.
pub const MAX_HALVINGS: u32 = 30;

const MAGIC: &[u8; 4] = b"FBCT";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Raw,
    Corrected,
}

#[derive(Debug, Clone)]
pub struct CoeffTable {
    grid: Arc<LambdaGrid>,
    widths: Vec<f64>,
    d: f64,
    hash: u64,
    mode: Mode,
    b_lf: Vec<f64>,
    b_la: Vec<f64>,
    b_gf: Vec<f64>,
    b_ga: Vec<f64>,
    redirect: Vec<f64>,
    ga_sparse: Vec<(u32, u32, u32, f64)>,
    redirect_sparse: Vec<(u32, u32, f64)>,
}

/// Tables compare by grid edges and coefficient bits; the spacing tag of
/// the grid is not part of the cache format.
impl PartialEq for CoeffTable {
    fn eq(&self, other: &Self) -> bool {
        self.grid.edges() == other.grid.edges()
            && self.d == other.d
            && self.hash == other.hash
            && self.mode == other.mode
            && self.b_lf == other.b_lf
            && self.b_la == other.b_la
            && self.b_gf == other.b_gf
            && self.b_ga == other.b_ga
            && self.redirect == other.redirect
    }
}

/// Table key: kernel families and parameters, fluid state, quadrature order.
pub fn table_hash(ks: &KernelSet, fluid: &FluidField, quad_order: usize) -> u64 {
    let mut h = ks.family_hash();
    let mut mix = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for v in [
        fluid.u,
        fluid.v,
        fluid.w,
        fluid.salinity,
        fluid.temperature,
        fluid.k,
        fluid.eps,
        fluid.ph,
        fluid.organic,
    ] {
        mix(v.to_bits());
    }
    mix(quad_order as u64);
    h
}

struct Builder<'a> {
    ks: &'a KernelSet,
    fluid: &'a FluidField,
    grid: &'a LambdaGrid,
    rule: GaussRule,
    widths: Vec<f64>,
    /// Where `B_f` switches on; outer cells are split there.
    guard: f64,
}

impl Builder<'_> {
    fn n(&self) -> usize {
        self.grid.len()
    }

    fn outer(&self, i: usize) -> Vec<(f64, f64)> {
        let (lo, hi) = self.grid.cell(i);
        mean_nodes(&self.rule, lo, hi, &[self.guard])
    }

    fn b_lf(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| exact_mean(&self.outer(i), |x| self.ks.b_f(self.fluid, x)))
            .collect()
    }

    fn b_la(&self) -> Result<Vec<f64>> {
        let n = self.n();
        let rows: Vec<Result<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let nodes = self.outer(i);
                (0..n)
                    .map(|j| {
                        let (a, b) = self.grid.cell(j);
                        let mut err = None;
                        let mean = exact_mean(&nodes, |x| {
                            self.ks
                                .b_a_over_mass_integral(self.fluid, x, a, b)
                                .unwrap_or_else(|e| {
                                    err.get_or_insert(e);
                                    0.0
                                })
                        });
                        match err {
                            Some(e) => Err(e),
                            None => Ok(mean / self.widths[j]),
                        }
                    })
                    .collect()
            })
            .collect();
        let mut out = Vec::with_capacity(n * n);
        for r in rows {
            out.extend(r?);
        }
        Ok(out)
    }

    /// `L^{kl}`: aggregation loss of pair `(k, l)` whose product exceeds `λ_max`.
    fn overflow_loss(&self) -> Result<Vec<f64>> {
        let n = self.n();
        let top = self.grid.lambda_max();
        let rows: Vec<Result<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let nodes = self.outer(k);
                let mut row = vec![0.0; n];
                for (l, slot) in row.iter_mut().enumerate() {
                    let (a, b) = self.grid.cell(l);
                    let mut acc = 0.0;
                    for &(x, w) in &nodes {
                        let cut = self.ks.complement(top, x).max(a);
                        if cut < b {
                            acc += w * self.ks.b_a_over_mass_integral(self.fluid, x, cut, b)?;
                        }
                    }
                    *slot = acc * self.widths[k];
                }
                Ok(row)
            })
            .collect();
        let mut out = Vec::with_capacity(n * n);
        for r in rows {
            out.extend(r?);
        }
        Ok(out)
    }

    /// Column `j` of `B_gf`, built on the same outer nodes as `B_lf^j`.
    fn b_gf_column(&self, j: usize) -> Vec<f64> {
        let n = self.n();
        let ks = self.ks;
        let f = self.fluid;
        let lmin = ks.lambda_min();
        let mut col = vec![0.0; n];
        for (x, w) in self.outer(j) {
            let bf = ks.b_f(f, x);
            if bf == 0.0 {
                continue;
            }
            let scale = w * bf / ks.mass_of(x);
            let split = ks.fragment_max(x);
            let reach = ks.complement(x, lmin);
            for (i, slot) in col.iter_mut().enumerate().take(j + 1) {
                let (a, b) = self.grid.cell(i);
                // smaller piece in [λ_min, (x^d/2)^{1/d}]
                let (s0, s1) = (a.max(lmin), b.min(split));
                let small = self
                    .rule
                    .integrate(s0, s1, |y| ks.mass_of(y) * ks.b_e(f, x, y));
                // larger piece in [(x^d/2)^{1/d}, (x^d - λ_min^d)^{1/d}]
                let (l0, l1) = (a.max(split), b.min(reach));
                let large = self
                    .rule
                    .integrate(l0, l1, |y| ks.mass_of(y) * ks.b_e_tilde_unchecked(f, x, y));
                *slot += scale * (small + large) / self.widths[i];
            }
        }
        col
    }

    fn b_gf(&self) -> Vec<f64> {
        let n = self.n();
        let cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|j| self.b_gf_column(j))
            .collect();
        let mut out = vec![0.0; n * n];
        for (j, col) in cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                out[i * n + j] = *v;
            }
        }
        out
    }

    /// Nonzero `B_ga^{ikl}` for one target cell `i`, in `(k, l)` order.
    fn b_ga_slice(&self, i: usize) -> Vec<(u32, u32, f64)> {
        let n = self.n();
        let ks = self.ks;
        let f = self.fluid;
        let lmin = ks.lambda_min();
        let edges = self.grid.edges();
        let mut acc = vec![0.0; n * n];
        for (lam, w) in self.outer(i) {
            let half_mass = 0.5 * ks.mass_of(lam);
            // λ' ranges over [λ_min, (λ^d - λ_min^d)^{1/d}] so both pieces are ≥ λ_min
            let x_top = ks.complement(lam, lmin);
            for k in 0..=i {
                let (ka, kb) = (edges[k], edges[k + 1].min(x_top));
                if !(kb > ka) {
                    break;
                }
                // partner sizes swept while λ' crosses Λ_k
                let y_hi = ks.complement(lam, ka);
                let y_lo = ks.complement(lam, kb);
                let l_first = self.grid.bin_index(y_lo.max(lmin)).unwrap_or(0);
                let l_last = self
                    .grid
                    .bin_index(y_hi.min(self.grid.lambda_max()))
                    .unwrap_or(n - 1);
                for l in l_first..=l_last {
                    let a = ks.complement(lam, edges[l + 1]).max(ka);
                    let b = ks.complement(lam, edges[l]).min(kb);
                    if !(b > a) {
                        continue;
                    }
                    let v = self.rule.integrate(a, b, |x| {
                        let y = ks.complement(lam, x);
                        ks.b_a(f, x, y) / (ks.mass_of(x) * ks.mass_of(y)) * ks.jacobian(y, lam)
                    });
                    acc[k * n + l] += w * half_mass * v;
                }
            }
        }
        acc.iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(kl, v)| ((kl / n) as u32, (kl % n) as u32, *v))
            .collect()
    }
}

impl CoeffTable {
    /// Compute all coefficient families on `grid` with `quad_order`-point
    /// Gauss–Legendre per (sub)cell.
    pub fn precompute(
        ks: &KernelSet,
        fluid: &FluidField,
        grid: &Arc<LambdaGrid>,
        quad_order: usize,
        mode: Mode,
    ) -> Result<Self> {
        if (grid.lambda_min() - ks.lambda_min()).abs() > 1e-12 * ks.lambda_min() {
            return Err(FlocError::GridMismatch(format!(
                "grid starts at {} but kernels use lambda_min = {}",
                grid.lambda_min(),
                ks.lambda_min()
            )));
        }
        let n = grid.len();
        let b = Builder {
            ks,
            fluid,
            grid,
            rule: GaussRule::new(quad_order)?,
            widths: grid.widths(),
            guard: 2f64.powf(1.0 / ks.d()) * ks.lambda_min(),
        };

        let b_lf = b.b_lf();
        let (b_la, b_gf, ga_rows, loss_over) = if ks.has_aggregation() {
            let ga_rows: Vec<Vec<(u32, u32, f64)>> =
                (0..n).into_par_iter().map(|i| b.b_ga_slice(i)).collect();
            (b.b_la()?, b.b_gf(), ga_rows, b.overflow_loss()?)
        } else {
            (
                vec![0.0; n * n],
                b.b_gf(),
                vec![Vec::new(); n],
                vec![0.0; n * n],
            )
        };
        let mut b_ga = vec![0.0; n * n * n];
        for (i, row) in ga_rows.iter().enumerate() {
            for &(k, l, v) in row {
                b_ga[(i * n + k as usize) * n + l as usize] = v;
            }
        }
        let mut redirect = vec![0.0; n * n];
        for k in 0..n {
            for l in 0..n {
                redirect[k * n + l] = 0.5 * (loss_over[k * n + l] + loss_over[l * n + k]);
            }
        }

        let mut table = Self {
            grid: grid.clone(),
            widths: b.widths.clone(),
            d: ks.d(),
            hash: table_hash(ks, fluid, quad_order),
            mode,
            b_lf,
            b_la,
            b_gf,
            b_ga,
            redirect,
            ga_sparse: Vec::new(),
            redirect_sparse: Vec::new(),
        };
        if mode == Mode::Corrected {
            table.correct(ks);
        }
        table.rebuild_sparse();
        Ok(table)
    }

    fn correct(&mut self, ks: &KernelSet) {
        let n = self.len();
        let w = &self.widths;
        for j in 0..n {
            let target = self.b_lf[j];
            let have: f64 = (0..n).map(|i| w[i] * self.b_gf[i * n + j]).sum();
            if have > 0.0 {
                let s = target / have;
                for i in 0..n {
                    self.b_gf[i * n + j] *= s;
                }
            } else if target > 0.0 {
                // nothing resolved: keep the mass where it was
                self.b_gf[j * n + j] = target / w[j];
            }
        }
        for k in 0..n {
            for l in 0..n {
                let target = 0.5 * w[k] * w[l] * (self.b_la[k * n + l] + self.b_la[l * n + k]);
                let have: f64 = (0..n)
                    .map(|i| w[i] * self.b_ga[(i * n + k) * n + l])
                    .sum::<f64>()
                    + self.redirect[k * n + l];
                if have > 0.0 {
                    let s = target / have;
                    for i in 0..n {
                        self.b_ga[(i * n + k) * n + l] *= s;
                    }
                    self.redirect[k * n + l] *= s;
                } else if target > 0.0 {
                    let size = ks.agg_size(self.grid.midpoint(k), self.grid.midpoint(l));
                    match self.grid.bin_index(size) {
                        Some(i) => self.b_ga[(i * n + k) * n + l] = target / w[i],
                        None => self.redirect[k * n + l] = target,
                    }
                }
            }
        }
    }

    fn rebuild_sparse(&mut self) {
        let n = self.len();
        self.ga_sparse = self
            .b_ga
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(idx, v)| {
                let i = idx / (n * n);
                let k = (idx / n) % n;
                let l = idx % n;
                (i as u32, k as u32, l as u32, *v)
            })
            .collect();
        self.redirect_sparse = self
            .redirect
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(idx, v)| ((idx / n) as u32, (idx % n) as u32, *v))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn grid(&self) -> &Arc<LambdaGrid> {
        &self.grid
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn b_lf(&self, i: usize) -> f64 {
        self.b_lf[i]
    }

    pub fn b_la(&self, i: usize, j: usize) -> f64 {
        self.b_la[i * self.len() + j]
    }

    pub fn b_gf(&self, i: usize, j: usize) -> f64 {
        self.b_gf[i * self.len() + j]
    }

    pub fn b_ga(&self, i: usize, k: usize, l: usize) -> f64 {
        let n = self.len();
        self.b_ga[(i * n + k) * n + l]
    }

    /// Overflow coefficient of the ordered pair `(k, l)` (mass rate per `ρ^k ρ^l`).
    pub fn redirect(&self, k: usize, l: usize) -> f64 {
        self.redirect[k * self.len() + l]
    }

    /// Number of nonzero aggregation-gain entries.
    pub fn ga_nonzeros(&self) -> usize {
        self.ga_sparse.len()
    }

    /// `Ḡ(ρ)` into `out`; returns the mass rate redirected into the top cell.
    pub(crate) fn apply_slice(&self, rho: &[f64], out: &mut [f64]) -> f64 {
        let n = self.len();
        let w = &self.widths;
        let wr: Vec<f64> = rho.iter().zip(w).map(|(r, w)| r * w).collect();
        for i in 0..n {
            let row_la = &self.b_la[i * n..(i + 1) * n];
            let row_gf = &self.b_gf[i * n..(i + 1) * n];
            let mut la = 0.0;
            let mut gf = 0.0;
            for j in 0..n {
                la += row_la[j] * wr[j];
                gf += row_gf[j] * wr[j];
            }
            out[i] = -self.b_lf[i] * rho[i] - la * rho[i] + gf;
        }
        for &(i, k, l, c) in &self.ga_sparse {
            out[i as usize] += c * rho[k as usize] * rho[l as usize];
        }
        let mut redirected = 0.0;
        for &(k, l, c) in &self.redirect_sparse {
            redirected += c * rho[k as usize] * rho[l as usize];
        }
        out[n - 1] += redirected / w[n - 1];
        redirected
    }

    /// Save in the binary cache format; see [`CoeffTable::load`].
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| FlocError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let n = self.len();
        let mut buf: Vec<u8> = Vec::with_capacity(32 + 8 * (n + 1 + n * (3 + 3 * n + n * n)));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&self.d.to_le_bytes());
        buf.extend_from_slice(&self.hash.to_le_bytes());
        let mode: u32 = match self.mode {
            Mode::Raw => 0,
            Mode::Corrected => 1,
        };
        buf.extend_from_slice(&mode.to_le_bytes());
        for arr in [
            self.grid.edges(),
            &self.b_lf[..],
            &self.b_la[..],
            &self.b_gf[..],
            &self.b_ga[..],
            &self.redirect[..],
        ] {
            for v in arr {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| FlocError::io(path, e))?;
        w.flush().map_err(|e| FlocError::io(path, e))
    }

    /// Read a table written by [`CoeffTable::save`].
    ///
    /// Layout (little-endian): `"FBCT"`, version `u32`, `I: u64`, `d: f64`,
    /// hash `u64`, mode `u32`, then the `f64` arrays edges (`I+1`), `B_lf`
    /// (`I`), `B_la` (`I×I`), `B_gf` (`I×I`), `B_ga` (`I×I×I`), overflow
    /// (`I×I`), all row-major.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| FlocError::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| FlocError::io(path, e))?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        if cur.take(4)? != MAGIC {
            return Err(FlocError::CacheFormat("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(FlocError::CacheFormat(format!(
                "unsupported version {version}"
            )));
        }
        let n = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        if n == 0 || n > 1 << 12 {
            return Err(FlocError::CacheFormat(format!(
                "implausible cell count {n}"
            )));
        }
        let d = cur.f64()?;
        let hash = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let mode = match u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) {
            0 => Mode::Raw,
            1 => Mode::Corrected,
            m => return Err(FlocError::CacheFormat(format!("unknown mode {m}"))),
        };
        let edges = cur.f64s(n + 1)?;
        let b_lf = cur.f64s(n)?;
        let b_la = cur.f64s(n * n)?;
        let b_gf = cur.f64s(n * n)?;
        let b_ga = cur.f64s(n * n * n)?;
        let redirect = cur.f64s(n * n)?;
        if cur.pos != bytes.len() {
            return Err(FlocError::CacheFormat("trailing bytes".into()));
        }
        let grid = Arc::new(
            LambdaGrid::from_edges(edges).map_err(|e| FlocError::CacheFormat(e.to_string()))?,
        );
        let mut t = Self {
            widths: grid.widths(),
            grid,
            d,
            hash,
            mode,
            b_lf,
            b_la,
            b_gf,
            b_ga,
            redirect,
            ga_sparse: Vec::new(),
            redirect_sparse: Vec::new(),
        };
        t.rebuild_sparse();
        Ok(t)
    }

    /// Load a cached table if it matches the given setup, else precompute
    /// and write it.
    pub fn load_or_precompute(
        path: impl AsRef<Path>,
        ks: &KernelSet,
        fluid: &FluidField,
        grid: &Arc<LambdaGrid>,
        quad_order: usize,
        mode: Mode,
    ) -> Result<Self> {
        let path = path.as_ref();
        if let Ok(t) = Self::load(path) {
            if t.hash == table_hash(ks, fluid, quad_order)
                && t.mode == mode
                && t.grid.edges() == grid.edges()
            {
                return Ok(t);
            }
        }
        let t = Self::precompute(ks, fluid, grid, quad_order, mode)?;
        t.save(path)?;
        Ok(t)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, k: usize) -> Result<&[u8]> {
        let end = self.pos + k;
        if end > self.bytes.len() {
            return Err(FlocError::CacheFormat("file truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, k: usize) -> Result<Vec<f64>> {
        (0..k).map(|_| self.f64()).collect()
    }
}

fn check_grid(tab: &CoeffTable, rho: &BinDensity) -> Result<()> {
    if rho.grid().edges() != tab.grid.edges() {
        return Err(FlocError::GridMismatch(
            "density and coefficient table use different grids".into(),
        ));
    }
    Ok(())
}

/// Right-hand side and the mass rate sent to the top cell by overflow.
#[derive(Debug, Clone, PartialEq)]
pub struct GbarRhs {
    pub rhs: Vec<f64>,
    pub redirected: f64,
}

pub fn apply_gbar(tab: &CoeffTable, rho: &BinDensity) -> Result<GbarRhs> {
    check_grid(tab, rho)?;
    let mut rhs = vec![0.0; tab.len()];
    let redirected = tab.apply_slice(rho.values(), &mut rhs);
    Ok(GbarRhs { rhs, redirected })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub density: BinDensity,
    /// Largest halving count used for any sub-step.
    pub halvings: u32,
    pub substeps: u64,
    /// Mass moved into the top cell by overflow during the step.
    pub redirected: f64,
}

/// Explicit Euler over `dt`, halving the sub-step whenever a cell would
/// turn negative and then marching on with the reduced step.
pub fn euler_step(tab: &CoeffTable, rho: &BinDensity, dt: f64) -> Result<StepOutcome> {
    check_grid(tab, rho)?;
    if !(dt > 0.0) {
        return Err(FlocError::param("dt", "must be positive"));
    }
    let (values, halvings, substeps, redirected) = euler_slice(tab, rho.values(), dt)?;
    Ok(StepOutcome {
        density: rho.with_values(values)?,
        halvings,
        substeps,
        redirected,
    })
}

pub(crate) fn euler_slice(
    tab: &CoeffTable,
    rho: &[f64],
    dt: f64,
) -> Result<(Vec<f64>, u32, u64, f64)> {
    let n = rho.len();
    let mut y = rho.to_vec();
    let mut rhs = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut t = 0.0;
    let mut halvings = 0u32;
    let mut substeps = 0u64;
    let mut redirected = 0.0;
    while t < dt {
        let red = tab.apply_slice(&y, &mut rhs);
        loop {
            let h = (dt * 0.5f64.powi(halvings as i32)).min(dt - t);
            let mut ok = true;
            for i in 0..n {
                trial[i] = y[i] + h * rhs[i];
                if trial[i] < 0.0 {
                    ok = false;
                }
            }
            if ok {
                std::mem::swap(&mut y, &mut trial);
                redirected += h * red;
                substeps += 1;
                // snap to dt to avoid a sliver step from rounding
                t = if dt - (t + h) <= 1e-12 * dt {
                    dt
                } else {
                    t + h
                };
                break;
            }
            halvings += 1;
            if halvings > MAX_HALVINGS {
                return Err(FlocError::PositivityFailure {
                    halvings: MAX_HALVINGS,
                });
            }
        }
    }
    Ok((y, halvings, substeps, redirected))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConservationReport {
    pub trials: usize,
    /// Largest `|Σ |Λ_i| Ḡ_i| / Σ |Λ_i| |Ḡ_i|` over the trials.
    pub max_residual: f64,
    pub mean_residual: f64,
    pub mode: Mode,
}

/// Evaluate the discrete conservation residual on random densities with
/// entries uniform in `[0, 1)`.
pub fn check_conservation(tab: &CoeffTable, trials: usize, seed: u64) -> ConservationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tab.len();
    let mut rhs = vec![0.0; n];
    let (mut max, mut sum) = (0.0f64, 0.0);
    for _ in 0..trials {
        let rho: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        tab.apply_slice(&rho, &mut rhs);
        let net: f64 = rhs.iter().zip(&tab.widths).map(|(g, w)| g * w).sum();
        let scale: f64 = rhs
            .iter()
            .zip(&tab.widths)
            .map(|(g, w)| (g * w).abs())
            .sum();
        let r = if scale > 0.0 { net.abs() / scale } else { 0.0 };
        max = max.max(r);
        sum += r;
    }
    ConservationReport {
        trials,
        max_residual: max,
        mean_residual: if trials > 0 { sum / trials as f64 } else { 0.0 },
        mode: tab.mode,
    }
}
