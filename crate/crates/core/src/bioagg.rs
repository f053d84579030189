//! Particles built from elementary sediment units glued by biological units.
//!
//! A chain of `n` sediment units of length `λ_min` joined by `n - 1`
//! biological links of length `λ_bio` has length `n λ_min + (n-1) λ_bio`.
//! The sediment fraction `θ(λ)` of such a chain fixes its mass and the
//! weight `f(λ)` for which `f m` is additive under aggregation.

use crate::error::{FlocError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BioParams {
    pub lambda_min: f64,
    pub lambda_bio: f64,
    /// Mass per unit length^d of sediment.
    pub m_min: f64,
    /// Mass per unit length^d of biological matter.
    pub m_bio: f64,
    pub d: f64,
}

impl BioParams {
    pub fn new(lambda_min: f64, lambda_bio: f64, m_min: f64, m_bio: f64, d: f64) -> Result<Self> {
        if !(lambda_min > 0.0) {
            return Err(FlocError::param("lambda_min", "must be positive"));
        }
        if !(lambda_bio >= 0.0) {
            return Err(FlocError::param("lambda_bio", "must be nonnegative"));
        }
        if !(m_min > 0.0) {
            return Err(FlocError::param("M_min", "must be positive"));
        }
        if !(m_bio >= 0.0) {
            return Err(FlocError::param("M_bio", "must be nonnegative"));
        }
        if !(d >= 1.0) || !d.is_finite() {
            return Err(FlocError::param("d", "must be at least 1"));
        }
        Ok(Self {
            lambda_min,
            lambda_bio,
            m_min,
            m_bio,
            d,
        })
    }

    fn check(&self, lambda: f64) -> Result<()> {
        if lambda >= self.lambda_min {
            Ok(())
        } else {
            Err(FlocError::domain(
                lambda,
                "length below the elementary size",
            ))
        }
    }

    /// Real-valued count of sediment units `(λ + λ_bio)/(λ_min + λ_bio)`.
    pub fn n_of_lambda(&self, lambda: f64) -> Result<f64> {
        self.check(lambda)?;
        Ok((lambda + self.lambda_bio) / (self.lambda_min + self.lambda_bio))
    }

    /// Sediment fraction of a particle of length `λ`, in `(0, 1]`.
    pub fn theta(&self, lambda: f64) -> Result<f64> {
        self.check(lambda)?;
        Ok(self.theta_unchecked(lambda))
    }

    fn theta_unchecked(&self, lambda: f64) -> f64 {
        (lambda + self.lambda_bio) * self.lambda_min
            / ((self.lambda_min + self.lambda_bio) * lambda)
    }

    /// `θ λ^d M_min + (1-θ) λ^d M_bio`.
    pub fn mass(&self, lambda: f64) -> Result<f64> {
        let theta = self.theta(lambda)?;
        let vol = lambda.powf(self.d);
        Ok(theta * vol * self.m_min + (1.0 - theta) * vol * self.m_bio)
    }

    /// Sediment content `θ(λ) λ^d`, the quantity conserved by aggregation.
    fn sediment_content(&self, lambda: f64) -> f64 {
        self.theta_unchecked(lambda) * lambda.powf(self.d)
    }

    /// Length of the particle formed when `λ` and `λ'` join.
    ///
    /// For `d = 1` this is `λ + λ' + λ_bio`. Otherwise the sediment content
    /// `θ(λ'') λ''^d = θ(λ)λ^d + θ(λ')λ'^d` is solved for `λ''` by bisection.
    pub fn aggregate_length(&self, lambda: f64, other: f64) -> Result<f64> {
        self.check(lambda)?;
        self.check(other)?;
        if self.d == 1.0 {
            return Ok(lambda + other + self.lambda_bio);
        }
        let target = self.sediment_content(lambda) + self.sediment_content(other);
        let mut lo = lambda.max(other);
        let mut hi = (lambda.powf(self.d) + other.powf(self.d)).powf(1.0 / self.d)
            + self.lambda_bio
            + f64::EPSILON * lo;
        while self.sediment_content(hi) < target {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.sediment_content(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// `θ M_min / (θ M_min + (1-θ) M_bio)`; equals 1 at `λ_min` and
    /// decreases with `λ`.
    pub fn f_bio(&self, lambda: f64) -> Result<f64> {
        let theta = self.theta(lambda)?;
        let sed = theta * self.m_min;
        Ok(sed / (sed + (1.0 - theta) * self.m_bio))
    }

    /// First-order form `1 - ((λ-λ_min)/λ)(λ_bio M_bio)/(λ_min M_min)`,
    /// valid when biological links are short and light.
    pub fn f_bio_approx(&self, lambda: f64) -> Result<f64> {
        self.check(lambda)?;
        Ok(1.0
            - (lambda - self.lambda_min) / lambda * (self.lambda_bio * self.m_bio)
                / (self.lambda_min * self.m_min))
    }

    /// `f_bio` as a plain weight, extended by 1 below `λ_min`.
    pub fn weight(self) -> impl Fn(f64) -> f64 + Send + Sync + Clone {
        move |lambda| self.f_bio(lambda).unwrap_or(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(lmin: f64, lbio: f64, mmin: f64, mbio: f64) -> BioParams {
        BioParams::new(lmin, lbio, mmin, mbio, 1.0).unwrap()
    }

    #[test]
    fn unit_count_examples() {
        let b = p(5.0, 1.0, 1.0, 1.0);
        assert_eq!(b.n_of_lambda(5.0).unwrap(), 1.0);
        // six sediment units and five links
        assert_eq!(b.n_of_lambda(35.0).unwrap(), 6.0);
        assert_eq!(b.n_of_lambda(11.0).unwrap(), 2.0);
        assert!(b.n_of_lambda(4.0).is_err());
    }

    #[test]
    fn theta_examples() {
        let b = p(5.0, 1.0, 1.0, 1.0);
        assert_eq!(b.theta(5.0).unwrap(), 1.0);
        assert!((b.theta(11.0).unwrap() - 10.0 / 11.0).abs() < 1e-15);
        let far = b.theta(1e12).unwrap();
        assert!((far - 5.0 / 6.0).abs() < 1e-10);
    }

    #[test]
    fn mass_examples() {
        let b = p(5.0, 1.0, 1.0, 1.0);
        assert!((b.mass(5.0).unwrap() - 5.0).abs() < 1e-14);
        assert!((b.mass(11.0).unwrap() - 11.0).abs() < 1e-14);
        let b = p(5.0, 1.0, 2.0, 0.0);
        let th = b.theta(20.0).unwrap();
        assert!((b.mass(20.0).unwrap() - th * 20.0 * 2.0).abs() < 1e-13);
    }

    #[test]
    fn aggregate_length_examples() {
        let b = p(5.0, 0.0, 1.0, 1.0);
        assert_eq!(b.aggregate_length(6.0, 7.0).unwrap(), 13.0);
        let b = p(5.0, 1.0, 1.0, 1.0);
        let joined = b.aggregate_length(5.0, 5.0).unwrap();
        assert_eq!(joined, 11.0);
        let lhs = b.theta(joined).unwrap() * joined;
        assert!((lhs - 10.0).abs() < 1e-13);
        assert!(b.aggregate_length(4.0, 5.0).is_err());
    }

    #[test]
    fn f_bio_examples() {
        let b = p(5.0, 1.0, 1.0, 1.0);
        assert_eq!(b.f_bio(5.0).unwrap(), 1.0);
        assert!((b.f_bio(11.0).unwrap() - 10.0 / 11.0).abs() < 1e-15);
        let light = p(5.0, 1.0, 1.0, 0.0);
        for l in [5.0, 7.0, 100.0] {
            assert_eq!(light.f_bio(l).unwrap(), 1.0);
        }
    }

    #[test]
    fn f_bio_matches_closed_form_in_one_dimension() {
        let b = p(3.0, 0.4, 2.0, 0.7);
        for l in [3.0, 3.5, 10.0, 77.0] {
            let closed = 1.0 / (1.0 + (l - 3.0) / (l + 0.4) * (0.4 * 0.7) / (3.0 * 2.0));
            assert!((b.f_bio(l).unwrap() - closed).abs() < 1e-15);
        }
    }

    #[test]
    fn f_bio_approx_examples() {
        let b = p(5.0, 1.0, 1.0, 1.0);
        assert_eq!(b.f_bio_approx(5.0).unwrap(), 1.0);
        let b = p(5.0, 0.05, 1.0, 0.5);
        let exact = b.f_bio(10.0).unwrap();
        assert!((b.f_bio_approx(10.0).unwrap() - exact).abs() <= 0.01 * exact);
        let b = p(5.0, 0.0, 1.0, 0.5);
        assert_eq!(b.f_bio_approx(42.0).unwrap(), 1.0);
    }

    #[test]
    fn f_bio_is_monotone_and_bounded() {
        let b = p(2.0, 0.3, 1.0, 0.8);
        let mut last = 1.0;
        for i in 0..200 {
            let l = 2.0 + i as f64 * 0.5;
            let f = b.f_bio(l).unwrap();
            assert!(f > 0.0 && f <= 1.0 && f <= last);
            last = f;
        }
    }

    #[test]
    fn equal_densities_make_weighted_mass_the_sediment_content() {
        let b = BioParams::new(1.5, 0.2, 3.0, 3.0, 2.0).unwrap();
        for l in [1.5, 2.0, 9.0] {
            let fm = b.f_bio(l).unwrap() * b.mass(l).unwrap();
            let want = b.theta(l).unwrap() * l.powf(2.0) * 3.0;
            assert!((fm - want).abs() <= 1e-14 * want);
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(BioParams::new(0.0, 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(BioParams::new(1.0, -1.0, 1.0, 1.0, 1.0).is_err());
        assert!(BioParams::new(1.0, 1.0, 0.0, 1.0, 1.0).is_err());
        assert!(BioParams::new(1.0, 1.0, 1.0, -1.0, 1.0).is_err());
        assert!(BioParams::new(1.0, 1.0, 1.0, 1.0, 0.5).is_err());
    }
}
