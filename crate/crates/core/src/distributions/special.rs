//! Thin numerically careful wrappers over the special functions in `statrs`.

use statrs::function::{erf, gamma};
use std::f64::consts::{LN_2, SQRT_2};

/// `ln(sqrt(2π))`
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn ln_gamma(x: f64) -> f64 {
    gamma::ln_gamma(x)
}

/// Regularized lower incomplete gamma `P(a, x)`, extended to `x <= 0` (0) and `x = ∞` (1).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else {
        gamma::gamma_lr(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 − P(a, x)`, computed directly.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else {
        gamma::gamma_ur(a, x)
    }
}

/// Standard normal log-density.
pub fn ln_norm_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erf::erfc(-z / SQRT_2)
}

/// `ln Φ(z)`, accurate far into both tails.
pub fn ln_norm_cdf(z: f64) -> f64 {
    if z == f64::INFINITY {
        return 0.0;
    }
    if z == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if z > 0.0 {
        // Φ(z) = 1 − Φ(−z); the complement is tiny here.
        return (-0.5 * erf::erfc(z / SQRT_2)).ln_1p();
    }
    if z > -37.0 {
        return erf::erfc(-z / SQRT_2).ln() - LN_2;
    }
    // Asymptotic series of the Mills ratio.
    let z2 = z * z;
    let inv = 1.0 / z2;
    let series = 1.0 - inv + 3.0 * inv * inv - 15.0 * inv.powi(3) + 105.0 * inv.powi(4);
    -0.5 * z2 - (-z).ln() - LN_SQRT_2PI + series.ln()
}

/// Inverse standard normal CDF.
pub fn norm_quantile(p: f64) -> f64 {
    -SQRT_2 * erf::erfc_inv(2.0 * p)
}

/// `ln(e^a − e^b)` for `a >= b`.
pub fn ln_diff_exp(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}
