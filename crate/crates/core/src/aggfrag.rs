//! Continuous aggregation–fragmentation operator evaluated by quadrature.
//!
//! ```text
//! G(λ) = -ρ(λ) B_f(λ)
//!        - ρ(λ) ∫ ρ(λ')/m(λ') B_a(λ, λ') dλ'
//!        + m(λ) ∫ ρ(λ')/m(λ') B_f(λ') [B_e(λ', λ) + B̃_e(λ', λ)] dλ'
//!        + ½ m(λ) ∫_{λ'≤λ} ρ(λ')ρ(λ'')/(m(λ')m(λ'')) B_a(λ', λ'') λ''^{1-d} λ^{d-1} dλ'
//! ```
//! with `λ'' = (λ^d - λ'^d)^{1/d}`. Every integration range is cut down
//! analytically to where the integrand can be nonzero. Because no particle is
//! smaller than `λ_min`, `λ''` stays away from zero and the aggregation-gain
//! Jacobian is bounded.

use std::fmt;
use std::sync::Arc;

use crate::error::{FlocError, Result};
use crate::fluid::FluidField;
use crate::grid::BinDensity;
use crate::kernels::KernelSet;
use crate::quadrature::{Adaptive, QuadSpec};

/// Density given as a function on `[λ_min, λ_max]`, zero outside its support.
#[derive(Clone)]
pub struct ContinuousDensity {
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    domain: (f64, f64),
    support: (f64, f64),
    breaks: Vec<f64>,
}

impl fmt::Debug for ContinuousDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContinuousDensity")
            .field("domain", &self.domain)
            .field("support", &self.support)
            .field("breaks", &self.breaks.len())
            .finish()
    }
}

impl ContinuousDensity {
    pub fn new(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        lambda_min: f64,
        lambda_max: f64,
    ) -> Result<Self> {
        if !(lambda_min > 0.0) || !(lambda_max > lambda_min) {
            return Err(FlocError::param(
                "lambda_max",
                "need 0 < lambda_min < lambda_max",
            ));
        }
        Ok(Self {
            f: Arc::new(f),
            domain: (lambda_min, lambda_max),
            support: (lambda_min, lambda_max),
            breaks: Vec::new(),
        })
    }

    /// Restrict the support to `[lo, hi]` inside the domain.
    pub fn with_support(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= self.domain.0) || !(hi <= self.domain.1) || !(hi > lo) {
            return Err(FlocError::param(
                "support",
                "must be a nonempty subinterval of the domain",
            ));
        }
        self.support = (lo, hi);
        Ok(self)
    }

    /// Points where the density is not smooth.
    pub fn with_breaks(mut self, breaks: Vec<f64>) -> Self {
        self.breaks = breaks;
        self
    }

    /// Step function of a bin density, with its edges as breakpoints.
    pub fn from_bins(rho: &BinDensity) -> Self {
        let g = rho.grid().clone();
        let r = rho.clone();
        Self {
            f: Arc::new(move |x| r.eval(x)),
            domain: (g.lambda_min(), g.lambda_max()),
            support: (g.lambda_min(), g.lambda_max()),
            breaks: g.edges().to_vec(),
        }
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn eval(&self, lambda: f64) -> f64 {
        if lambda < self.support.0 || lambda > self.support.1 {
            0.0
        } else {
            (self.f)(lambda)
        }
    }

    /// Support edges plus interior breakpoints.
    fn kinks(&self) -> Vec<f64> {
        let mut k = vec![self.support.0, self.support.1];
        k.extend(
            self.breaks
                .iter()
                .copied()
                .filter(|b| *b > self.support.0 && *b < self.support.1),
        );
        k
    }
}

/// The five pieces of `G(λ)`; losses are reported as positive numbers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Terms {
    pub loss_frag: f64,
    pub loss_agg: f64,
    pub gain_frag_small: f64,
    pub gain_frag_large: f64,
    pub gain_agg: f64,
}

impl Terms {
    pub fn gain_frag(&self) -> f64 {
        self.gain_frag_small + self.gain_frag_large
    }

    pub fn total(&self) -> f64 {
        -self.loss_frag - self.loss_agg + self.gain_frag() + self.gain_agg
    }
}

/// `G` bound to one kernel set, fluid state and density.
pub struct ContinuousOperator<'a> {
    ks: &'a KernelSet,
    fluid: &'a FluidField,
    rho: &'a ContinuousDensity,
    quad: Adaptive,
    inner_tol: f64,
    kinks: Vec<f64>,
}

impl<'a> ContinuousOperator<'a> {
    /// Inner integrals get `0.1·tol/|Λ|` so that their errors, integrated
    /// over `Λ`, stay a tenth of `tol`.
    pub fn new(
        ks: &'a KernelSet,
        fluid: &'a FluidField,
        rho: &'a ContinuousDensity,
        quad: QuadSpec,
    ) -> Result<Self> {
        if (rho.domain.0 - ks.lambda_min()).abs() > 1e-12 * ks.lambda_min() {
            return Err(FlocError::GridMismatch(format!(
                "density starts at {} but kernels use lambda_min = {}",
                rho.domain.0,
                ks.lambda_min()
            )));
        }
        let width = rho.domain.1 - rho.domain.0;
        let mut kinks = rho.kinks();
        if ks.has_fragmentation() {
            // B_f switches on here
            kinks.push(2f64.powf(1.0 / ks.d()) * ks.lambda_min());
        }
        Ok(Self {
            ks,
            fluid,
            rho,
            quad: Adaptive::new(quad)?,
            inner_tol: 0.1 * quad.tol / width,
            kinks,
        })
    }

    fn n(&self, x: f64) -> f64 {
        self.rho.eval(x) / self.ks.mass_of(x)
    }

    /// Inner integral whose result gets multiplied by `scale`; the tolerance
    /// is divided by it so the product keeps the budget.
    fn inner<F: FnMut(f64) -> f64>(
        &self,
        a: f64,
        b: f64,
        breaks: &[f64],
        scale: f64,
        f: F,
    ) -> Result<f64> {
        let tol = self.inner_tol / scale.abs().max(f64::MIN_POSITIVE);
        self.quad.integrate_with_breaks(a, b, breaks, tol, f)
    }

    pub fn loss_frag(&self, lambda: f64) -> f64 {
        self.rho.eval(lambda) * self.ks.b_f(self.fluid, lambda)
    }

    pub fn loss_agg(&self, lambda: f64) -> Result<f64> {
        let r = self.rho.eval(lambda);
        if r == 0.0 || !self.ks.has_aggregation() {
            return Ok(0.0);
        }
        let (lo, hi) = self.rho.support;
        let inner = self.inner(lo, hi, &self.kinks, r, |x| {
            self.n(x) * self.ks.b_a(self.fluid, lambda, x)
        })?;
        Ok(r * inner)
    }

    /// Fragmentations whose smaller piece has size `λ`: parents in
    /// `[2^{1/d} λ, λ_max]`.
    pub fn gain_frag_small(&self, lambda: f64) -> Result<f64> {
        if !self.ks.has_fragmentation() || lambda < self.ks.lambda_min() {
            return Ok(0.0);
        }
        let (lo, hi) = self.rho.support;
        let a = (2f64.powf(1.0 / self.ks.d()) * lambda).max(lo);
        let inner = self.inner(a, hi, &self.kinks, self.ks.mass_of(lambda), |x| {
            self.n(x) * self.ks.b_f(self.fluid, x) * self.ks.b_e(self.fluid, x, lambda)
        })?;
        Ok(self.ks.mass_of(lambda) * inner)
    }

    /// Fragmentations whose larger piece has size `λ`: parents in
    /// `[(λ^d + λ_min^d)^{1/d}, 2^{1/d} λ]`.
    pub fn gain_frag_large(&self, lambda: f64) -> Result<f64> {
        if !self.ks.has_fragmentation() {
            return Ok(0.0);
        }
        let (lo, hi) = self.rho.support;
        let a = self.ks.agg_size(lambda, self.ks.lambda_min()).max(lo);
        let b = (2f64.powf(1.0 / self.ks.d()) * lambda).min(hi);
        let inner = self.inner(a, b, &self.kinks, self.ks.mass_of(lambda), |x| {
            let small = self.ks.complement(x, lambda);
            let be = self.ks.b_e(self.fluid, x, small);
            if be == 0.0 {
                return 0.0;
            }
            self.n(x) * self.ks.b_f(self.fluid, x) * be * self.ks.jacobian(small, lambda)
        })?;
        Ok(self.ks.mass_of(lambda) * inner)
    }

    /// Pairs `(λ', λ'')` with `λ'^d + λ''^d = λ^d`, both inside the support.
    pub fn gain_agg(&self, lambda: f64) -> Result<f64> {
        if !self.ks.has_aggregation() {
            return Ok(0.0);
        }
        let (lo, hi) = self.rho.support;
        let ks = self.ks;
        let a = lo.max(ks.complement(lambda, hi));
        let b = hi.min(ks.complement(lambda, lo));
        if !(b > a) {
            return Ok(0.0);
        }
        let mut breaks = self.kinks.clone();
        breaks.extend(self.kinks.iter().map(|k| ks.complement(lambda, *k)));
        let inner = self.inner(a, b, &breaks, 0.5 * ks.mass_of(lambda), |x| {
            let other = ks.complement(lambda, x);
            let n2 = self.n(other);
            if n2 == 0.0 {
                return 0.0;
            }
            self.n(x) * n2 * ks.b_a(self.fluid, x, other) * ks.jacobian(other, lambda)
        })?;
        Ok(0.5 * ks.mass_of(lambda) * inner)
    }

    pub fn terms(&self, lambda: f64) -> Result<Terms> {
        Ok(Terms {
            loss_frag: self.loss_frag(lambda),
            loss_agg: self.loss_agg(lambda)?,
            gain_frag_small: self.gain_frag_small(lambda)?,
            gain_frag_large: self.gain_frag_large(lambda)?,
            gain_agg: self.gain_agg(lambda)?,
        })
    }

    pub fn eval(&self, lambda: f64) -> Result<f64> {
        Ok(self.terms(lambda)?.total())
    }

    /// Points in `λ` where `G` may have a kink: the density kinks and
    /// their images under the fragment and aggregate maps.
    fn outer_breaks(&self) -> Vec<f64> {
        let ks = self.ks;
        let root2 = 2f64.powf(1.0 / ks.d());
        let mut out = self.kinks.clone();
        for &k in &self.kinks {
            out.push(k / root2);
            out.push(ks.complement(k, ks.lambda_min()));
        }
        if ks.has_aggregation() && self.kinks.len() <= 256 {
            for (i, &a) in self.kinks.iter().enumerate() {
                for &b in &self.kinks[i..] {
                    out.push(ks.agg_size(a, b));
                }
            }
        }
        out
    }

    /// Integral of `G` over `[a, b]` split at the kinks, each term collected
    /// separately.
    pub fn integrate_terms(&self, a: f64, b: f64, tol: f64) -> Result<Terms> {
        let breaks = self.outer_breaks();
        let mut failure = None;
        let mut acc = |pick: fn(&Terms) -> f64| -> f64 {
            let r = self
                .quad
                .integrate_with_breaks(a, b, &breaks, tol / 5.0, |x| match self.terms(x) {
                    Ok(t) => pick(&t),
                    Err(e) => {
                        failure.get_or_insert(e);
                        0.0
                    }
                });
            r.unwrap_or_else(|e| {
                failure.get_or_insert(e);
                0.0
            })
        };
        let out = Terms {
            loss_frag: acc(|t| t.loss_frag),
            loss_agg: acc(|t| t.loss_agg),
            gain_frag_small: acc(|t| t.gain_frag_small),
            gain_frag_large: acc(|t| t.gain_frag_large),
            gain_agg: acc(|t| t.gain_agg),
        };
        match failure {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

/// `G(λ)` for one size.
pub fn g_continuous(
    ks: &KernelSet,
    fluid: &FluidField,
    rho: &ContinuousDensity,
    lambda: f64,
    quad: QuadSpec,
) -> Result<f64> {
    ContinuousOperator::new(ks, fluid, rho, quad)?.eval(lambda)
}

/// The separate terms of `G(λ)`.
pub fn g_terms(
    ks: &KernelSet,
    fluid: &FluidField,
    rho: &ContinuousDensity,
    lambda: f64,
    quad: QuadSpec,
) -> Result<Terms> {
    ContinuousOperator::new(ks, fluid, rho, quad)?.terms(lambda)
}

/// `∫_Λ G dλ`. Zero up to `quad.tol` when nothing aggregates past `λ_max`;
/// otherwise about `-leakage`.
pub fn mass_balance(
    ks: &KernelSet,
    fluid: &FluidField,
    rho: &ContinuousDensity,
    quad: QuadSpec,
) -> Result<f64> {
    let op = ContinuousOperator::new(ks, fluid, rho, quad)?;
    let (a, b) = rho.domain;
    let breaks = op.outer_breaks();
    let mut failure = None;
    let total = op
        .quad
        .integrate_with_breaks(a, b, &breaks, 0.5 * quad.tol, |x| {
            op.eval(x).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                0.0
            })
        })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(total),
    }
}

/// Aggregation gain landing above `λ_max`, i.e. mass lost by truncation.
pub fn leakage(
    ks: &KernelSet,
    fluid: &FluidField,
    rho: &ContinuousDensity,
    quad: QuadSpec,
) -> Result<f64> {
    let op = ContinuousOperator::new(ks, fluid, rho, quad)?;
    let top = rho.domain.1;
    let (_, hi) = rho.support;
    let reach = ks.agg_size(hi, hi);
    if !(reach > top) || !ks.has_aggregation() {
        return Ok(0.0);
    }
    let breaks = op.outer_breaks();
    let mut failure = None;
    let total = op
        .quad
        .integrate_with_breaks(top, reach, &breaks, 0.5 * quad.tol, |x| {
            op.gain_agg(x).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                0.0
            })
        })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(total),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{Aggregation, Daughter, Fragmentation};

    fn fluid() -> FluidField {
        FluidField {
            k: 0.01,
            eps: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_density_gives_zero() {
        let ks = KernelSet::new(
            1.0,
            1.0,
            1.0,
            Aggregation::Constant { beta0: 1.0 },
            Fragmentation::Constant { k_f: 1.0 },
            Daughter::UniformLength,
        )
        .unwrap();
        let rho = ContinuousDensity::new(|_| 0.0, 1.0, 10.0).unwrap();
        for l in [1.0, 2.5, 7.0, 10.0] {
            assert_eq!(
                g_continuous(&ks, &fluid(), &rho, l, QuadSpec::default()).unwrap(),
                0.0
            );
        }
        assert_eq!(
            mass_balance(&ks, &fluid(), &rho, QuadSpec::default()).unwrap(),
            0.0
        );
    }

    #[test]
    fn one_dimensional_uniform_gain_by_hand() {
        // B_f = 1, uniform B_e, ρ = 1 on [1, 10]; at λ = 2 the small-piece
        // branch sees parents λ' ∈ [4, 10] with B_e = 1/(λ'/2 - 1)
        let ks = KernelSet::new(
            1.0,
            1.0,
            1.0,
            Aggregation::None,
            Fragmentation::Constant { k_f: 1.0 },
            Daughter::UniformLength,
        )
        .unwrap();
        let rho = ContinuousDensity::new(|_| 1.0, 1.0, 10.0).unwrap();
        let t = g_terms(&ks, &fluid(), &rho, 2.0, QuadSpec::with_tol(1e-12)).unwrap();
        // ∫_4^10 2/(x (x/2 - 1)) dx = 4 ∫ 1/(x(x-2)) = 2 ln((x-2)/x) |_4^10
        let want = 2.0 * 2.0 * ((8.0f64 / 10.0).ln() - (2.0f64 / 4.0).ln()) / 2.0;
        assert!((t.gain_frag_small - want).abs() < 1e-10, "{t:?} {want}");
        // large-piece branch: parents in [3, 4]
        let want_l = 2.0 * 2.0 * ((2.0f64 / 4.0).ln() - (1.0f64 / 3.0).ln()) / 2.0;
        assert!((t.gain_frag_large - want_l).abs() < 1e-10);
        assert_eq!(t.loss_agg, 0.0);
        assert_eq!(t.loss_frag, 0.0);
    }

    #[test]
    fn mismatched_lambda_min_rejected() {
        let ks = KernelSet::constant_aggregation(1.0, 1.0, 1.0, 1.0).unwrap();
        let rho = ContinuousDensity::new(|_| 1.0, 2.0, 10.0).unwrap();
        assert!(g_continuous(&ks, &fluid(), &rho, 3.0, QuadSpec::default()).is_err());
    }
}
