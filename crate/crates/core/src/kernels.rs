//! Mass law, size maps and the aggregation / fragmentation kernel triple.
//!
//! Particles of size `λ` carry mass `N_d λ^d`. Two particles merge into
//! `(λ^d + λ'^d)^{1/d}`; a fragmenting particle of size `λ` yields a small
//! piece `λ' ≤ (λ^d/2)^{1/d}` drawn from the daughter density `B_e(λ, ·)`
//! and its complement `(λ^d - λ'^d)^{1/d}`.
//!
//! Built-in families honour the structural constraints by construction:
//! symmetric `B_a`, daughter support inside `[λ_min, (λ^d/2)^{1/d}]` with
//! unit mass, and `B_f = 0` wherever no admissible fragment exists.

use std::fmt;
use std::sync::Arc;

use crate::error::{FlocError, Result};
use crate::fluid::FluidField;
use crate::grid::LambdaGrid;
use crate::quadrature::{Adaptive, QuadSpec};

pub type AggFn = Arc<dyn Fn(&FluidField, f64, f64) -> f64 + Send + Sync>;
pub type FragFn = Arc<dyn Fn(&FluidField, f64) -> f64 + Send + Sync>;
pub type DaughterFn = Arc<dyn Fn(&FluidField, f64, f64) -> f64 + Send + Sync>;

/// Pairwise aggregation rate `B_a(F, λ, λ')` (1/s).
#[derive(Clone)]
pub enum Aggregation {
    None,
    /// `β₀`
    Constant {
        beta0: f64,
    },
    /// `β₀ (λ^d + λ'^d)`
    Sum {
        beta0: f64,
    },
    /// `β₀ (λ + λ')³ √(ε/ν_w)`
    Shear {
        beta0: f64,
        nu_w: f64,
    },
    Custom {
        label: String,
        rate: AggFn,
    },
}

/// Fragmentation frequency `B_f(F, λ)` (1/s), before the admissibility guard.
#[derive(Clone)]
pub enum Fragmentation {
    None,
    /// `k_f`
    Constant {
        k_f: f64,
    },
    /// `k_f (λ/λ_min)^p √ε`
    Power {
        k_f: f64,
        p: f64,
    },
    Custom {
        label: String,
        rate: FragFn,
    },
}

/// Density of the smaller fragment size, `B_e(F, λ, λ')` (1/length).
#[derive(Clone)]
pub enum Daughter {
    /// Uniform in `λ'` on `[λ_min, (λ^d/2)^{1/d}]`.
    UniformLength,
    /// Uniform in `λ'^d` (fragment mass) on the same interval.
    UniformMass,
    Custom {
        label: String,
        density: DaughterFn,
    },
}

impl fmt::Debug for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "None"),
            Self::Constant { beta0 } => write!(f, "Constant {{ beta0: {beta0} }}"),
            Self::Sum { beta0 } => write!(f, "Sum {{ beta0: {beta0} }}"),
            Self::Shear { beta0, nu_w } => write!(f, "Shear {{ beta0: {beta0}, nu_w: {nu_w} }}"),
            Self::Custom { label, .. } => write!(f, "Custom({label})"),
        }
    }
}

impl fmt::Debug for Fragmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "None"),
            Self::Constant { k_f } => write!(f, "Constant {{ k_f: {k_f} }}"),
            Self::Power { k_f, p } => write!(f, "Power {{ k_f: {k_f}, p: {p} }}"),
            Self::Custom { label, .. } => write!(f, "Custom({label})"),
        }
    }
}

impl fmt::Debug for Daughter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UniformLength => write!(f, "UniformLength"),
            Self::UniformMass => write!(f, "UniformMass"),
            Self::Custom { label, .. } => write!(f, "Custom({label})"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct KernelSet {
    d: f64,
    n_d: f64,
    lambda_min: f64,
    agg: Aggregation,
    frag: Fragmentation,
    daughter: Daughter,
}

impl KernelSet {
    pub fn new(
        d: f64,
        n_d: f64,
        lambda_min: f64,
        agg: Aggregation,
        frag: Fragmentation,
        daughter: Daughter,
    ) -> Result<Self> {
        if !(d >= 1.0) || !d.is_finite() {
            return Err(FlocError::param("d", "dimension must be at least 1"));
        }
        if !(n_d > 0.0) || !n_d.is_finite() {
            return Err(FlocError::param("N_d", "mass constant must be positive"));
        }
        if !(lambda_min > 0.0) {
            return Err(FlocError::param("lambda_min", "must be positive"));
        }
        match &agg {
            Aggregation::Constant { beta0 } | Aggregation::Sum { beta0 } if !(*beta0 >= 0.0) => {
                return Err(FlocError::param("beta0", "must be nonnegative"))
            }
            Aggregation::Shear { beta0, nu_w } if !(*beta0 >= 0.0) || !(*nu_w > 0.0) => {
                return Err(FlocError::param(
                    "beta0/nu_w",
                    "beta0 >= 0 and nu_w > 0 required",
                ))
            }
            _ => {}
        }
        match &frag {
            Fragmentation::Constant { k_f } | Fragmentation::Power { k_f, .. }
                if !(*k_f >= 0.0) =>
            {
                return Err(FlocError::param("k_f", "must be nonnegative"))
            }
            _ => {}
        }
        Ok(Self {
            d,
            n_d,
            lambda_min,
            agg,
            frag,
            daughter,
        })
    }

    /// Aggregation-only set with a constant kernel.
    pub fn constant_aggregation(d: f64, n_d: f64, lambda_min: f64, beta0: f64) -> Result<Self> {
        Self::new(
            d,
            n_d,
            lambda_min,
            Aggregation::Constant { beta0 },
            Fragmentation::None,
            Daughter::UniformLength,
        )
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn n_d(&self) -> f64 {
        self.n_d
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn aggregation(&self) -> &Aggregation {
        &self.agg
    }

    pub fn fragmentation(&self) -> &Fragmentation {
        &self.frag
    }

    pub fn daughter(&self) -> &Daughter {
        &self.daughter
    }

    pub fn has_aggregation(&self) -> bool {
        !matches!(self.agg, Aggregation::None)
    }

    pub fn has_fragmentation(&self) -> bool {
        !matches!(self.frag, Fragmentation::None)
    }

    #[inline]
    fn pow_d(&self, x: f64) -> f64 {
        if self.d == 1.0 {
            x
        } else {
            x.powf(self.d)
        }
    }

    #[inline]
    fn root_d(&self, x: f64) -> f64 {
        if self.d == 1.0 {
            x
        } else {
            x.powf(1.0 / self.d)
        }
    }

    /// `N_d λ^d`.
    pub fn mass_of(&self, lambda: f64) -> f64 {
        self.n_d * self.pow_d(lambda)
    }

    /// `∫_a^b dλ / m(λ)` in closed form.
    pub fn inverse_mass_integral(&self, a: f64, b: f64) -> f64 {
        if self.d == 1.0 {
            (b / a).ln() / self.n_d
        } else {
            let e = 1.0 - self.d;
            (b.powf(e) - a.powf(e)) / (e * self.n_d)
        }
    }

    /// Size of the aggregate of `λ` and `λ'`: `(λ^d + λ'^d)^{1/d}`.
    pub fn agg_size(&self, lambda: f64, other: f64) -> f64 {
        self.root_d(self.pow_d(lambda) + self.pow_d(other))
    }

    /// Complementary fragment `(λ^d - λ'^d)^{1/d}`.
    pub fn frag_complement(&self, lambda: f64, piece: f64) -> Result<f64> {
        if !(piece <= lambda) || piece < 0.0 {
            return Err(FlocError::domain(piece, "fragment larger than its parent"));
        }
        Ok(self.complement(lambda, piece))
    }

    /// `(λ^d - λ'^d)^{1/d}` without the range check; negative radicands give 0.
    #[inline]
    pub(crate) fn complement(&self, lambda: f64, piece: f64) -> f64 {
        self.root_d((self.pow_d(lambda) - self.pow_d(piece)).max(0.0))
    }

    /// Largest admissible small fragment `(λ^d/2)^{1/d}`.
    pub fn fragment_max(&self, lambda: f64) -> f64 {
        self.root_d(0.5 * self.pow_d(lambda))
    }

    /// Whether a particle of size `λ` has any admissible fragmentation.
    pub fn can_fragment(&self, lambda: f64) -> bool {
        self.pow_d(lambda) > 2.0 * self.pow_d(self.lambda_min)
    }

    pub fn b_a(&self, f: &FluidField, lambda: f64, other: f64) -> f64 {
        match &self.agg {
            Aggregation::None => 0.0,
            Aggregation::Constant { beta0 } => *beta0,
            Aggregation::Sum { beta0 } => beta0 * (self.pow_d(lambda) + self.pow_d(other)),
            Aggregation::Shear { beta0, nu_w } => {
                let s = lambda + other;
                beta0 * s * s * s * (f.eps / nu_w).sqrt()
            }
            Aggregation::Custom { rate, .. } => rate(f, lambda, other),
        }
    }

    /// `∫_a^b B_a(λ, x)/m(x) dx`, in closed form for the built-in families.
    pub fn b_a_over_mass_integral(
        &self,
        f: &FluidField,
        lambda: f64,
        a: f64,
        b: f64,
    ) -> Result<f64> {
        if !(b > a) {
            return Ok(0.0);
        }
        let power = |q: f64| -> f64 {
            if (q + 1.0).abs() < 1e-12 {
                (b / a).ln()
            } else {
                (b.powf(q + 1.0) - a.powf(q + 1.0)) / (q + 1.0)
            }
        };
        Ok(match &self.agg {
            Aggregation::None => 0.0,
            Aggregation::Constant { beta0 } => beta0 * self.inverse_mass_integral(a, b),
            Aggregation::Sum { beta0 } => {
                beta0 * (self.pow_d(lambda) * self.inverse_mass_integral(a, b) + (b - a) / self.n_d)
            }
            Aggregation::Shear { beta0, nu_w } => {
                // (λ + x)³ expanded, each power of x integrated against x^{-d}
                let c = beta0 * (f.eps / nu_w).sqrt() / self.n_d;
                let binom = [1.0, 3.0, 3.0, 1.0];
                c * (0..4)
                    .map(|r| binom[r] * lambda.powi(3 - r as i32) * power(r as f64 - self.d))
                    .sum::<f64>()
            }
            Aggregation::Custom { rate, .. } => {
                let q = Adaptive::new(QuadSpec::with_tol(1e-14))?;
                let scale = (rate(f, lambda, a) / self.mass_of(a)).abs() * (b - a);
                q.integrate_tol(a, b, 1e-13 * scale.max(f64::MIN_POSITIVE), &mut |x| {
                    rate(f, lambda, x) / self.mass_of(x)
                })?
            }
        })
    }

    /// Fragmentation frequency including the guard `B_f = 0` for
    /// `λ^d ≤ 2 λ_min^d`.
    pub fn b_f(&self, f: &FluidField, lambda: f64) -> f64 {
        if !self.can_fragment(lambda) {
            return 0.0;
        }
        match &self.frag {
            Fragmentation::None => 0.0,
            Fragmentation::Constant { k_f } => *k_f,
            Fragmentation::Power { k_f, p } => {
                k_f * (lambda / self.lambda_min).powf(*p) * f.eps.sqrt()
            }
            Fragmentation::Custom { rate, .. } => rate(f, lambda),
        }
    }

    pub fn b_e(&self, f: &FluidField, lambda: f64, piece: f64) -> f64 {
        let hi = self.fragment_max(lambda);
        match &self.daughter {
            Daughter::Custom { density, .. } => density(f, lambda, piece),
            _ if piece < self.lambda_min || piece > hi || hi <= self.lambda_min => 0.0,
            Daughter::UniformLength => 1.0 / (hi - self.lambda_min),
            Daughter::UniformMass => {
                let span = 0.5 * self.pow_d(lambda) - self.pow_d(self.lambda_min);
                self.d * self.pow_d(piece) / piece / span
            }
        }
    }

    /// Density of the larger fragment size,
    /// `B̃_e(λ, λ'') = B_e(λ, (λ^d-λ''^d)^{1/d}) (λ^d-λ''^d)^{(1-d)/d} λ''^{d-1}`.
    pub fn b_e_tilde(&self, f: &FluidField, lambda: f64, large: f64) -> Result<f64> {
        let lo = self.fragment_max(lambda);
        let tol = 1e-14 * lambda;
        if large < lo - tol || large > lambda + tol {
            return Err(FlocError::domain(
                large,
                "larger fragment outside [(λ^d/2)^(1/d), λ]",
            ));
        }
        Ok(self.b_e_tilde_unchecked(f, lambda, large))
    }

    #[inline]
    pub(crate) fn b_e_tilde_unchecked(&self, f: &FluidField, lambda: f64, large: f64) -> f64 {
        let small = self.complement(lambda, large);
        let be = self.b_e(f, lambda, small);
        if be == 0.0 {
            return 0.0;
        }
        be * self.jacobian(small, large)
    }

    /// `|dλ_small/dλ_large| = λ_small^{1-d} λ_large^{d-1}` along `λ_small^d + λ_large^d = const`.
    #[inline]
    pub(crate) fn jacobian(&self, small: f64, large: f64) -> f64 {
        if self.d == 1.0 {
            1.0
        } else {
            (large / small).powf(self.d - 1.0)
        }
    }

    /// Draw the smaller fragment of a particle of size `λ` from `B_e` by
    /// inverting its distribution function at `u ∈ [0, 1)`.
    pub fn sample_fragment(&self, f: &FluidField, lambda: f64, u: f64) -> Result<f64> {
        let lo = self.lambda_min;
        let hi = self.fragment_max(lambda);
        if hi <= lo {
            return Err(FlocError::domain(lambda, "particle too small to fragment"));
        }
        match &self.daughter {
            Daughter::UniformLength => Ok(lo + u * (hi - lo)),
            Daughter::UniformMass => {
                let (a, b) = (self.pow_d(lo), self.pow_d(hi));
                Ok(self.root_d(a + u * (b - a)))
            }
            Daughter::Custom { .. } => {
                let q = Adaptive::new(QuadSpec::with_tol(1e-12))?;
                let total = q.integrate(lo, hi, |x| self.b_e(f, lambda, x))?;
                let target = u * total;
                let (mut a, mut b) = (lo, hi);
                for _ in 0..80 {
                    let mid = 0.5 * (a + b);
                    let cdf = q.integrate(lo, mid, |x| self.b_e(f, lambda, x))?;
                    if cdf < target {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                Ok(0.5 * (a + b))
            }
        }
    }

    /// Stable 64-bit fingerprint of the families, parameters and mass law.
    pub fn family_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.f64(self.d);
        h.f64(self.n_d);
        h.f64(self.lambda_min);
        match &self.agg {
            Aggregation::None => h.tag(b"agg:none"),
            Aggregation::Constant { beta0 } => {
                h.tag(b"agg:constant");
                h.f64(*beta0);
            }
            Aggregation::Sum { beta0 } => {
                h.tag(b"agg:sum");
                h.f64(*beta0);
            }
            Aggregation::Shear { beta0, nu_w } => {
                h.tag(b"agg:shear");
                h.f64(*beta0);
                h.f64(*nu_w);
            }
            Aggregation::Custom { label, .. } => {
                h.tag(b"agg:custom");
                h.tag(label.as_bytes());
            }
        }
        match &self.frag {
            Fragmentation::None => h.tag(b"frag:none"),
            Fragmentation::Constant { k_f } => {
                h.tag(b"frag:constant");
                h.f64(*k_f);
            }
            Fragmentation::Power { k_f, p } => {
                h.tag(b"frag:power");
                h.f64(*k_f);
                h.f64(*p);
            }
            Fragmentation::Custom { label, .. } => {
                h.tag(b"frag:custom");
                h.tag(label.as_bytes());
            }
        }
        match &self.daughter {
            Daughter::UniformLength => h.tag(b"daughter:uniform_length"),
            Daughter::UniformMass => h.tag(b"daughter:uniform_mass"),
            Daughter::Custom { label, .. } => {
                h.tag(b"daughter:custom");
                h.tag(label.as_bytes());
            }
        }
        h.finish()
    }
}

struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn bytes(&mut self, data: &[u8]) {
        for b in data {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn tag(&mut self, data: &[u8]) {
        self.bytes(&(data.len() as u64).to_le_bytes());
        self.bytes(data);
    }

    fn f64(&mut self, x: f64) {
        self.bytes(&x.to_bits().to_le_bytes());
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// Threshold on `|∫ B_e - 1|`.
pub const NORMALIZATION_TOL: f64 = 1e-10;
/// Threshold on `|∫ B̃_e - 1|`.
pub const TILDE_NORMALIZATION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Asymmetric {
        lambda: f64,
        other: f64,
        forward: f64,
        backward: f64,
    },
    NegativeRate {
        lambda: f64,
        other: f64,
        value: f64,
    },
    SupportLeak {
        lambda: f64,
        piece: f64,
        value: f64,
    },
    GuardLeak {
        lambda: f64,
        value: f64,
    },
    Normalization {
        lambda: f64,
        integral: f64,
    },
    TildeNormalization {
        lambda: f64,
        integral: f64,
    },
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub pairs_checked: usize,
    pub max_normalization_error: f64,
    pub max_tilde_normalization_error: f64,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "kernel validation: {} ({} symmetric pairs checked)",
            if self.passed() { "pass" } else { "FAIL" },
            self.pairs_checked
        )?;
        writeln!(
            f,
            "  max |int B_e - 1|       = {:.3e}",
            self.max_normalization_error
        )?;
        writeln!(
            f,
            "  max |int B~_e - 1|      = {:.3e}",
            self.max_tilde_normalization_error
        )?;
        for v in &self.violations {
            writeln!(f, "  violation: {v:?}")?;
        }
        Ok(())
    }
}

/// Check symmetry, support, guard and normalization on the probe points
/// (edges and midpoints of `probe_grid`). Violations are returned as data.
pub fn validate(ks: &KernelSet, fluid: &FluidField, probe_grid: &LambdaGrid) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut probes: Vec<f64> = probe_grid.edges().to_vec();
    probes.extend((0..probe_grid.len()).map(|i| probe_grid.midpoint(i)));
    probes.sort_by(f64::total_cmp);

    for (a_idx, &a) in probes.iter().enumerate() {
        for &b in &probes[a_idx..] {
            let fw = ks.b_a(fluid, a, b);
            let bw = ks.b_a(fluid, b, a);
            report.pairs_checked += 1;
            if fw.to_bits() != bw.to_bits() {
                report.violations.push(Violation::Asymmetric {
                    lambda: a,
                    other: b,
                    forward: fw,
                    backward: bw,
                });
            }
            if fw < 0.0 {
                report.violations.push(Violation::NegativeRate {
                    lambda: a,
                    other: b,
                    value: fw,
                });
            }
        }
    }

    let q = Adaptive::new(QuadSpec::with_tol(1e-13)).expect("static quadrature spec");
    let lmin = ks.lambda_min();
    for &lambda in &probes {
        let bf = ks.b_f(fluid, lambda);
        if !ks.can_fragment(lambda) {
            if bf != 0.0 {
                report
                    .violations
                    .push(Violation::GuardLeak { lambda, value: bf });
            }
            continue;
        }
        let hi = ks.fragment_max(lambda);
        let mut outside: Vec<f64> = probes
            .iter()
            .copied()
            .filter(|p| *p < lmin || *p > hi)
            .collect();
        outside.extend([
            lmin * (1.0 - 1e-9),
            0.5 * lmin,
            hi * (1.0 + 1e-9),
            0.5 * (hi + lambda),
            lambda,
        ]);
        for piece in outside {
            let v = ks.b_e(fluid, lambda, piece);
            if v != 0.0 {
                report.violations.push(Violation::SupportLeak {
                    lambda,
                    piece,
                    value: v,
                });
            }
        }
        if bf <= 0.0 {
            continue;
        }
        match q.integrate(lmin, hi, |x| ks.b_e(fluid, lambda, x)) {
            Ok(total) => {
                let err = (total - 1.0).abs();
                report.max_normalization_error = report.max_normalization_error.max(err);
                if err > NORMALIZATION_TOL {
                    report.violations.push(Violation::Normalization {
                        lambda,
                        integral: total,
                    });
                }
            }
            Err(_) => report.violations.push(Violation::Normalization {
                lambda,
                integral: f64::NAN,
            }),
        }
        // B̃_e vanishes once the small piece drops below λ_min
        let cut = ks.complement(lambda, lmin);
        let tilde = q.integrate_with_breaks(hi, lambda, &[cut], 1e-11, |x| {
            ks.b_e_tilde_unchecked(fluid, lambda, x)
        });
        match tilde {
            Ok(total) => {
                let err = (total - 1.0).abs();
                report.max_tilde_normalization_error =
                    report.max_tilde_normalization_error.max(err);
                if err > TILDE_NORMALIZATION_TOL {
                    report.violations.push(Violation::TildeNormalization {
                        lambda,
                        integral: total,
                    });
                }
            }
            Err(_) => report.violations.push(Violation::TildeNormalization {
                lambda,
                integral: f64::NAN,
            }),
        }
    }
    report
}
