//! Sampling distributions, truncated-normal priors, censored likelihoods and
//! the multivariate-normal posterior approximation.
//!
//! Every log-density here returns `-inf` outside its support and never NaN
//! for valid parameters.

pub mod mvn;
pub mod special;

pub use mvn::{fit_mvn, fit_mvn_columns, mvn_transform, MvnApprox};

use crate::error::{Error, Result};
use special::{gamma_p, gamma_q, ln_diff_exp, ln_gamma, ln_norm_cdf, ln_norm_pdf, norm_cdf};

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "{name} must be finite and positive, got {v}"
        )))
    }
}

/// Negative binomial in mean/shape form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NbParams {
    pub mu: f64,
    pub alpha: f64,
}

impl NbParams {
    pub fn new(mu: f64, alpha: f64) -> Result<Self> {
        check_positive("mu", mu)?;
        check_positive("alpha", alpha)?;
        Ok(Self { mu, alpha })
    }

    /// Standard deviation `sqrt(mu + mu^2 / alpha)`.
    pub fn sd(&self) -> f64 {
        (self.mu + self.mu * self.mu / self.alpha).sqrt()
    }
}

/// Log of the negative binomial pmf with mean `mu` and shape `alpha`.
pub fn nb_logpmf(y: u64, p: &NbParams) -> f64 {
    let y = y as f64;
    let NbParams { mu, alpha } = *p;
    let log_total = (mu + alpha).ln();
    ln_gamma(y + alpha) - ln_gamma(alpha) - ln_gamma(y + 1.0)
        + alpha * (alpha.ln() - log_total)
        + y * (mu.ln() - log_total)
}

/// Gamma in shape/rate form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl GammaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        check_positive("alpha", alpha)?;
        check_positive("beta", beta)?;
        Ok(Self { alpha, beta })
    }

    pub fn mean(&self) -> f64 {
        self.alpha / self.beta
    }

    pub fn sd(&self) -> f64 {
        (self.alpha / (self.beta * self.beta)).sqrt()
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x < 0.0 || !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        if x == 0.0 {
            return match self.alpha {
                a if a < 1.0 => f64::INFINITY,
                a if a == 1.0 => self.beta.ln(),
                _ => f64::NEG_INFINITY,
            };
        }
        self.alpha * self.beta.ln() + (self.alpha - 1.0) * x.ln()
            - self.beta * x
            - ln_gamma(self.alpha)
    }
}

/// Shape/rate from mean and standard deviation: `alpha = mu²/sigma²`, `beta = mu/sigma²`.
pub fn gamma_convert(mu: f64, sigma: f64) -> Result<GammaParams> {
    check_positive("mu", mu)?;
    check_positive("sigma", sigma)?;
    let var = sigma * sigma;
    GammaParams::new(mu * mu / var, mu / var)
}

/// A distribution whose CDF and survival function can both be evaluated
/// without cancellation.
pub trait Cdf {
    fn cdf(&self, x: f64) -> f64;
    fn sf(&self, x: f64) -> f64;
}

impl Cdf for GammaParams {
    fn cdf(&self, x: f64) -> f64 {
        gamma_p(self.alpha, self.beta * x)
    }

    fn sf(&self, x: f64) -> f64 {
        gamma_q(self.alpha, self.beta * x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normal {
    pub mu: f64,
    pub sigma: f64,
}

impl Normal {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::Domain(format!("mu must be finite, got {mu}")));
        }
        check_positive("sigma", sigma)?;
        Ok(Self { mu, sigma })
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        ln_norm_pdf((x - self.mu) / self.sigma) - self.sigma.ln()
    }
}

impl Cdf for Normal {
    fn cdf(&self, x: f64) -> f64 {
        norm_cdf((x - self.mu) / self.sigma)
    }

    fn sf(&self, x: f64) -> f64 {
        norm_cdf((self.mu - x) / self.sigma)
    }
}

/// `ln(F(upper) − F(lower))` without range checks. Picks the tail that keeps
/// the subtraction well conditioned.
pub(crate) fn interval_log_mass<C: Cdf>(lower: f64, upper: f64, dist: &C) -> f64 {
    let lo_cdf = dist.cdf(lower);
    let mass = if lo_cdf > 0.5 {
        dist.sf(lower) - dist.sf(upper)
    } else {
        dist.cdf(upper) - lo_cdf
    };
    if mass > 0.0 {
        mass.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Interval-censored log-likelihood `ln(F(w_u) − F(w_l))`.
///
/// Zero-width intervals yield `-inf`: exact observations belong on the
/// density path, not here.
pub fn interval_censored_loglik<C: Cdf>(w_l: f64, w_u: f64, dist: &C) -> Result<f64> {
    if w_l.is_nan() || w_u.is_nan() || w_l > w_u {
        return Err(Error::Bounds {
            lower: w_l,
            upper: w_u,
        });
    }
    Ok(interval_log_mass(w_l, w_u, dist))
}

/// Normal distribution truncated to `[lo, hi]` (either end may be infinite).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncNormSpec {
    pub mu: f64,
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
    log_norm: f64,
}

impl TruncNormSpec {
    pub fn new(mu: f64, sigma: f64, lo: f64, hi: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::Domain(format!("mu must be finite, got {mu}")));
        }
        check_positive("sigma", sigma)?;
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(Error::Truncation { lo, hi });
        }
        let a = (lo - mu) / sigma;
        let b = (hi - mu) / sigma;
        let log_norm = if a > 0.0 {
            ln_diff_exp(ln_norm_cdf(-a), ln_norm_cdf(-b))
        } else {
            ln_diff_exp(ln_norm_cdf(b), ln_norm_cdf(a))
        };
        if !log_norm.is_finite() {
            return Err(Error::Domain(format!(
                "truncation [{lo}, {hi}] holds no mass under N({mu}, {sigma})"
            )));
        }
        Ok(Self {
            mu,
            sigma,
            lo,
            hi,
            log_norm,
        })
    }

    /// Truncated to `[lo, ∞)`.
    pub fn lower(mu: f64, sigma: f64, lo: f64) -> Result<Self> {
        Self::new(mu, sigma, lo, f64::INFINITY)
    }

    /// `ln(Φ(b) − Φ(a))` for the standardized truncation points.
    pub fn log_normalizer(&self) -> f64 {
        self.log_norm
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !(x >= self.lo && x <= self.hi) {
            return f64::NEG_INFINITY;
        }
        ln_norm_pdf((x - self.mu) / self.sigma) - self.sigma.ln() - self.log_norm
    }

    pub fn mean(&self) -> f64 {
        let a = (self.lo - self.mu) / self.sigma;
        let b = (self.hi - self.mu) / self.sigma;
        let pa = (ln_norm_pdf(a) - self.log_norm).exp();
        let pb = (ln_norm_pdf(b) - self.log_norm).exp();
        self.mu + self.sigma * (pa - pb)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lo {
            return 0.0;
        }
        if x >= self.hi {
            return 1.0;
        }
        let a = (self.lo - self.mu) / self.sigma;
        let z = (x - self.mu) / self.sigma;
        let num = if a > 0.0 {
            ln_diff_exp(ln_norm_cdf(-a), ln_norm_cdf(-z))
        } else {
            ln_diff_exp(ln_norm_cdf(z), ln_norm_cdf(a))
        };
        (num - self.log_norm).exp().clamp(0.0, 1.0)
    }
}

/// Log-density of a truncated normal.
pub fn truncnorm_logpdf(x: f64, spec: &TruncNormSpec) -> f64 {
    spec.ln_pdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson rule, the quadrature oracle used throughout these tests.
    pub(crate) fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = if n % 2 == 1 { n + 1 } else { n };
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn nb_logpmf_at_zero_matches_closed_form() {
        let p = NbParams::new(9.0, 10.0).unwrap();
        let expected = 10.0 * (10.0f64 / 19.0).ln();
        assert!((nb_logpmf(0, &p) - expected).abs() < 1e-12);
        assert!((expected - (-6.41854)).abs() < 1e-5);
    }

    #[test]
    fn nb_mass_sums_to_one() {
        let p = NbParams::new(9.0, 10.0).unwrap();
        let total: f64 = (0..=500).map(|y| nb_logpmf(y, &p).exp()).sum();
        assert!((total - 1.0).abs() < 1e-8);
    }

    #[test]
    fn nb_pmf_matches_binomial_coefficient_form() {
        // direct evaluation of C(y+a-1, y) (a/(mu+a))^a (mu/(mu+a))^y for integer a
        let (mu, a) = (3.5, 4.0);
        let p = NbParams::new(mu, a).unwrap();
        for y in 0u64..20 {
            let mut binom = 1.0;
            for k in 0..y {
                binom *= (a + k as f64) / (k as f64 + 1.0);
            }
            let direct = binom * (a / (mu + a)).powf(a) * (mu / (mu + a)).powi(y as i32);
            assert!((nb_logpmf(y, &p).exp() - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn nb_sd_formula() {
        let p = NbParams::new(9.0, 10.0).unwrap();
        assert!((p.sd() - (9.0f64 + 8.1).sqrt()).abs() < 1e-15);
        assert!((p.sd() - 4.1352).abs() < 1e-4);
        assert!(NbParams::new(0.0, 1.0).is_err());
        assert!(NbParams::new(1.0, f64::NAN).is_err());
    }

    #[test]
    fn gamma_convert_examples() {
        let g = gamma_convert(4.0, 2.0).unwrap();
        assert_eq!((g.alpha, g.beta), (4.0, 1.0));
        let g = gamma_convert(3.20, 1.64).unwrap();
        assert!((g.alpha - 3.81).abs() < 0.01 && (g.beta - 1.19).abs() < 0.01);
        let g = gamma_convert(5.81, 2.37).unwrap();
        assert!((g.mean() - 5.81).abs() / 5.81 < 1e-12);
        assert!((g.sd() - 2.37).abs() / 2.37 < 1e-12);
        assert!(gamma_convert(-1.0, 1.0).is_err());
        assert!(gamma_convert(1.0, 0.0).is_err());
    }

    #[test]
    fn gamma_pdf_integrates_to_one() {
        let g = GammaParams::new(4.0, 1.0).unwrap();
        let total = simpson(|x| g.ln_pdf(x).exp(), 0.0, 80.0, 20_000);
        assert!((total - 1.0).abs() < 1e-8);
    }

    #[test]
    fn truncnorm_examples() {
        let std = TruncNormSpec::new(0.0, 1.0, f64::NEG_INFINITY, f64::INFINITY).unwrap();
        assert!((truncnorm_logpdf(0.0, &std) + 0.918_938_533_204_672_7).abs() < 1e-12);
        let half = TruncNormSpec::lower(0.0, 1.0, 0.0).unwrap();
        let expected = -0.918_938_533_204_672_7 - 0.5f64.ln();
        assert!((truncnorm_logpdf(0.0, &half) - expected).abs() < 1e-12);
        assert!((expected + 0.22579).abs() < 1e-5);
        let band = TruncNormSpec::new(0.0, 1.0, 1.0, 2.0).unwrap();
        assert_eq!(truncnorm_logpdf(0.5, &band), f64::NEG_INFINITY);
        assert!(matches!(
            TruncNormSpec::new(0.0, 1.0, 2.0, 1.0),
            Err(Error::Truncation { .. })
        ));
    }

    #[test]
    fn truncnorm_integrates_to_one() {
        let cases = [
            (1.0, 10.0, 1.0, 30.0),
            (1.0, 10.0, 1.0, 2.0),
            (9.06, 0.18, 1.0, f64::INFINITY),
            (0.5, 0.01, 1.0, f64::INFINITY),
            (0.0, 2.0, 0.0, f64::INFINITY),
        ];
        for (mu, sigma, lo, hi) in cases {
            let tn = TruncNormSpec::new(mu, sigma, lo, hi).unwrap();
            let upper = if hi.is_finite() {
                hi
            } else {
                mu.max(lo) + 40.0 * sigma
            };
            let total = simpson(|x| tn.ln_pdf(x).exp(), lo, upper, 200_000);
            assert!(
                (total - 1.0).abs() < 1e-6,
                "{mu} {sigma} {lo} {hi}: {total}"
            );
        }
    }

    #[test]
    fn extreme_truncation_stays_finite() {
        // location 60 SDs below the truncation point
        let tn = TruncNormSpec::lower(0.4, 0.01, 1.0).unwrap();
        assert!(tn.ln_pdf(1.001).is_finite());
        assert!(tn.mean() > 1.0 && tn.mean() < 1.001);
        assert_eq!(tn.ln_pdf(0.99), f64::NEG_INFINITY);
    }

    #[test]
    fn truncnorm_mean_matches_quadrature() {
        let tn = TruncNormSpec::new(1.0, 10.0, 1.0, 30.0).unwrap();
        let m = simpson(|x| x * tn.ln_pdf(x).exp(), 1.0, 30.0, 20_000);
        assert!((tn.mean() - m).abs() < 1e-8);
    }

    #[test]
    fn interval_censored_examples() {
        let g = GammaParams::new(4.0, 1.0).unwrap();
        assert_eq!(
            interval_censored_loglik(0.0, f64::INFINITY, &g).unwrap(),
            0.0
        );
        let n = Normal::new(50.0, 1.0).unwrap();
        let v = interval_censored_loglik(0.0, 50.0, &n).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
        let quad = simpson(|x| g.ln_pdf(x).exp(), 2.0, 4.0, 2_000);
        let v = interval_censored_loglik(2.0, 4.0, &g).unwrap();
        assert!((v.exp() - quad).abs() < 1e-8);
        assert!((v - quad.ln()).abs() < 1e-8);
        assert!(matches!(
            interval_censored_loglik(4.0, 2.0, &g),
            Err(Error::Bounds { .. })
        ));
        assert_eq!(
            interval_censored_loglik(3.0, 3.0, &g).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn interval_censored_far_tail_uses_survival() {
        let g = GammaParams::new(2.0, 1.0).unwrap();
        let v = interval_censored_loglik(40.0, 41.0, &g).unwrap();
        let quad = simpson(|x| g.ln_pdf(x).exp(), 40.0, 41.0, 2_000);
        assert!(v.is_finite());
        assert!((v - quad.ln()).abs() < 1e-8);
    }

    #[test]
    fn normal_cdf_interval_matches_quadrature() {
        let n = Normal::new(3.3, 1.7).unwrap();
        let quad = simpson(|x| n.ln_pdf(x).exp(), 1.0, 6.0, 2_000);
        assert!((interval_censored_loglik(1.0, 6.0, &n).unwrap().exp() - quad).abs() < 1e-10);
    }
}
