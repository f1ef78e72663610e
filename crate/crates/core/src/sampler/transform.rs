use serde::{Deserialize, Serialize};

/// Support of a scalar parameter. Sampling happens on an unconstrained
/// transform of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Support {
    Unbounded,
    /// `(lo, ∞)`, sampled on `ln(x − lo)`.
    Lower {
        lo: f64,
    },
    /// `(lo, hi)`, sampled on `logit((x − lo) / (hi − lo))`.
    Interval {
        lo: f64,
        hi: f64,
    },
}

impl Support {
    pub fn contains(&self, x: f64) -> bool {
        match *self {
            Support::Unbounded => x.is_finite(),
            Support::Lower { lo } => x > lo && x.is_finite(),
            Support::Interval { lo, hi } => x > lo && x < hi,
        }
    }

    pub fn to_unconstrained(&self, x: f64) -> f64 {
        match *self {
            Support::Unbounded => x,
            Support::Lower { lo } => (x - lo).ln(),
            Support::Interval { lo, hi } => {
                let p = (x - lo) / (hi - lo);
                p.ln() - (-p).ln_1p()
            }
        }
    }

    /// Maps back to the constrained value and returns `ln |dx/du|`.
    pub fn to_constrained(&self, u: f64) -> (f64, f64) {
        match *self {
            Support::Unbounded => (u, 0.0),
            Support::Lower { lo } => (lo + u.exp(), u),
            Support::Interval { lo, hi } => {
                let width = hi - lo;
                // ln σ(u) and ln(1 − σ(u)) via softplus
                let ln_sig = -softplus(-u);
                let ln_one_minus = -softplus(u);
                let p = ln_sig.exp();
                let x = (lo + width * p).clamp(lo, hi);
                (x, width.ln() + ln_sig + ln_one_minus)
            }
        }
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp()
    } else {
        v.exp().ln_1p()
    }
}
