//! Gauss–Legendre rules and an adaptive bisection driver.
//!
//! Fixed-order rules are used for per-cell projections and coefficient
//! tables; the adaptive driver serves the continuous operator, where the
//! integrands are piecewise smooth and every known kink is passed in as a
//! breakpoint.

use std::num::NonZeroUsize;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use gauss_quad::legendre::GaussLegendre;

use crate::error::{FlocError, Result};

/// Cap on panels in one adaptive integral.
const MAX_PANELS: usize = 100_000;

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    depth: usize,
    left: f64,
    right: f64,
    err: f64,
}

/// Heap entry: error estimate, ties broken by panel index.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Ranked(f64, usize);

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

/// Default per-cell quadrature order.
pub const DEFAULT_ORDER: usize = 4;

/// Nodes and weights of a Gauss–Legendre rule on the reference interval [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussRule {
    pub fn new(order: usize) -> Result<Self> {
        let degree = NonZeroUsize::new(order)
            .ok_or_else(|| FlocError::param("quad_order", "must be at least 1"))?;
        let rule = GaussLegendre::new(degree);
        let (nodes, weights) = rule.iter().map(|(x, w)| (*x, *w)).unzip();
        Ok(Self { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes and weights mapped onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        if b <= a {
            return 0.0;
        }
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

/// Weighted nodes whose weights sum to (about) one: a discrete mean.
pub(crate) type MeanNodes = Vec<(f64, f64)>;

/// Nodes for the mean over `[lo, hi]`, with the rule applied separately on
/// each side of every split point inside the interval.
pub(crate) fn mean_nodes(rule: &GaussRule, lo: f64, hi: f64, splits: &[f64]) -> MeanNodes {
    let width = hi - lo;
    let pts = partition(lo, hi, splits);
    let mut out = Vec::with_capacity(rule.order() * (pts.len() - 1));
    for w in pts.windows(2) {
        out.extend(rule.mapped(w[0], w[1]).map(|(x, wt)| (x, wt / width)));
    }
    out
}

/// `Σ ŵ f(x)` taken relative to the first sample and divided by `Σ ŵ`, so a
/// constant `f` yields exactly that constant.
pub(crate) fn exact_mean<F: FnMut(f64) -> f64>(nodes: &[(f64, f64)], mut f: F) -> f64 {
    let vals: Vec<f64> = nodes.iter().map(|(x, _)| f(*x)).collect();
    let wsum: f64 = nodes.iter().map(|n| n.1).sum();
    let base = vals[0];
    base + nodes
        .iter()
        .zip(&vals)
        .map(|((_, w), v)| w / wsum * (v - base))
        .sum::<f64>()
}

/// Tolerance and refinement limits for adaptive integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadSpec {
    /// Absolute error target for one integral.
    pub tol: f64,
    /// Gauss–Legendre order used on each panel.
    pub order: usize,
    /// Maximum bisection depth before reporting non-convergence.
    pub max_refine: usize,
}

impl Default for QuadSpec {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            order: 10,
            max_refine: 48,
        }
    }
}

impl QuadSpec {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

/// Adaptive integrator bound to one rule.
#[derive(Debug, Clone)]
pub struct Adaptive {
    rule: GaussRule,
    spec: QuadSpec,
}

impl Adaptive {
    pub fn new(spec: QuadSpec) -> Result<Self> {
        if !(spec.tol > 0.0) {
            return Err(FlocError::param("quad.tol", "must be positive"));
        }
        Ok(Self {
            rule: GaussRule::new(spec.order)?,
            spec,
        })
    }

    pub fn spec(&self) -> QuadSpec {
        self.spec
    }

    /// Integrate `f` over `[a, b]` to the absolute tolerance `tol`.
    ///
    /// Global strategy: the panel with the largest error estimate (rule on
    /// the panel against the rule on its two halves) is bisected until the
    /// summed estimate drops below `tol`. Unlike a per-panel share of `tol`,
    /// this converges at integrable endpoint singularities.
    pub fn integrate_tol<F: FnMut(f64) -> f64>(
        &self,
        a: f64,
        b: f64,
        tol: f64,
        f: &mut F,
    ) -> Result<f64> {
        if !(b > a) {
            return Ok(0.0);
        }
        let coarse = self.rule.integrate(a, b, &mut *f);
        let root = self.panel(a, b, 0, coarse, f);
        let mut err_total = root.err;
        let mut magnitude = root.left.abs() + root.right.abs();
        let mut panels = vec![root];
        let mut heap = BinaryHeap::from([Ranked(root.err, 0)]);
        while err_total > tol.max(64.0 * f64::EPSILON * magnitude) {
            let Some(Ranked(_, idx)) = heap.pop() else {
                break;
            };
            let p = panels[idx];
            if p.b - p.a <= 32.0 * f64::EPSILON * p.a.abs().max(p.b.abs()) {
                // nothing finer is representable; accept the panel
                err_total -= p.err;
                continue;
            }
            if p.depth + 1 >= self.spec.max_refine || panels.len() >= MAX_PANELS {
                return Err(FlocError::QuadratureNonConvergence {
                    a: p.a,
                    b: p.b,
                    levels: p.depth + 1,
                });
            }
            let mid = 0.5 * (p.a + p.b);
            let l = self.panel(p.a, mid, p.depth + 1, p.left, f);
            let r = self.panel(mid, p.b, p.depth + 1, p.right, f);
            err_total += l.err + r.err - p.err;
            magnitude += l.left.abs() + l.right.abs() + r.left.abs() + r.right.abs()
                - p.left.abs()
                - p.right.abs();
            panels[idx] = l;
            heap.push(Ranked(l.err, idx));
            heap.push(Ranked(r.err, panels.len()));
            panels.push(r);
        }
        // sum in position order so the result does not depend on heap history
        panels.sort_by(|x, y| x.a.total_cmp(&y.a));
        Ok(panels.iter().map(|p| p.left + p.right).sum())
    }

    fn panel<F: FnMut(f64) -> f64>(
        &self,
        a: f64,
        b: f64,
        depth: usize,
        coarse: f64,
        f: &mut F,
    ) -> Panel {
        let mid = 0.5 * (a + b);
        let left = self.rule.integrate(a, mid, &mut *f);
        let right = self.rule.integrate(mid, b, &mut *f);
        Panel {
            a,
            b,
            depth,
            left,
            right,
            err: (left + right - coarse).abs(),
        }
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> Result<f64> {
        self.integrate_tol(a, b, self.spec.tol, &mut f)
    }

    /// Integrate over `[a, b]`, splitting at every breakpoint strictly inside it.
    pub fn integrate_with_breaks<F: FnMut(f64) -> f64>(
        &self,
        a: f64,
        b: f64,
        breaks: &[f64],
        tol: f64,
        mut f: F,
    ) -> Result<f64> {
        if !(b > a) {
            return Ok(0.0);
        }
        let pieces = partition(a, b, breaks);
        let width = b - a;
        let mut total = 0.0;
        for w in pieces.windows(2) {
            total += self.integrate_tol(w[0], w[1], tol * (w[1] - w[0]) / width, &mut f)?;
        }
        Ok(total)
    }
}

/// Sorted, deduplicated partition of `[a, b]` by the breakpoints inside it.
pub(crate) fn partition(a: f64, b: f64, breaks: &[f64]) -> Vec<f64> {
    let mut pts: Vec<f64> = Vec::with_capacity(breaks.len() + 2);
    pts.push(a);
    pts.extend(
        breaks
            .iter()
            .copied()
            .filter(|x| x.is_finite() && *x > a && *x < b),
    );
    pts.push(b);
    pts.sort_by(f64::total_cmp);
    let scale = (b - a).abs().max(a.abs()).max(b.abs());
    pts.dedup_by(|x, y| (*x - *y).abs() <= 1e-14 * scale);
    if *pts.last().unwrap() != b {
        // dedup may have merged b into a neighbour
        let n = pts.len();
        pts[n - 1] = b;
    }
    pts
}
