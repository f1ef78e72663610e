//! Log-posteriors of the incubation-period models.
//!
//! * NB family: the hierarchical base model over sites ([`Model1`]), the
//!   truncated-normal handoff model ([`Model2`]) and the joint-posterior
//!   handoff model ([`Model3`]).
//! * Interval-censored Gamma over two groups: base model ([`AlphaBetaGamma`]
//!   via [`model4`]), TN handoff ([`MuSigmaTn`] via [`model5`]) and MvN
//!   handoff with local rescaling ([`MuSigmaMvn`] via [`model6`]).
//! * Doubly-censored single group: [`model7`], [`model7_tn`], [`model7_mvn`].

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal as NormalDist};
use serde::{Deserialize, Serialize};

use crate::dataio::{censoring_bounds, Observation, ObservationRecord};
use crate::distributions::special::{ln_gamma, LN_SQRT_2PI};
use crate::distributions::{
    gamma_convert, interval_censored_loglik, Cdf, GammaParams, MvnApprox, Normal, TruncNormSpec,
};
use crate::error::{Error, Result};
use crate::sampler::{
    run_mcmc, summarize, ParameterSummary, PosteriorDraws, SamplerConfig, Support,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelFamily {
    #[serde(rename = "NB")]
    Nb,
    #[serde(rename = "GAMMA_IC")]
    GammaIc,
    #[serde(rename = "COVID_DC")]
    CovidDc,
}

impl ModelFamily {
    /// Labels the TN handoff carries for this family.
    pub fn handoff_labels(&self) -> Vec<String> {
        match self {
            ModelFamily::Nb => vec!["mu".into(), "alpha".into()],
            ModelFamily::GammaIc => {
                vec![
                    "mu_g1".into(),
                    "sigma_g1".into(),
                    "mu_g2".into(),
                    "sigma_g2".into(),
                ]
            }
            ModelFamily::CovidDc => vec!["mu".into(), "sigma".into()],
        }
    }

    /// Labels the MvN handoff is fitted over.
    pub fn mvn_labels(&self) -> Vec<String> {
        match self {
            ModelFamily::Nb => NB_MVN_NAMES.iter().map(|s| s.to_string()).collect(),
            _ => self.handoff_labels(),
        }
    }
}

/// Joint-posterior coordinates handed on in the NB family.
pub const NB_MVN_NAMES: [&str; 4] = ["lambda_z", "lambda", "sigma", "alpha"];

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub support: Support,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, support: Support) -> Self {
        Self {
            name: name.into(),
            support,
        }
    }
}

/// A log-posterior over named parameters plus the quantities reported
/// from each draw.
pub trait Model: Sync {
    fn params(&self) -> &[ParamSpec];

    /// Central starting point inside the support.
    fn init(&self) -> Vec<f64>;

    fn log_prior(&self, theta: &[f64]) -> f64;

    fn log_lik(&self, theta: &[f64]) -> f64;

    fn logpost(&self, theta: &[f64]) -> f64 {
        let lp = self.log_prior(theta);
        if !(lp > f64::NEG_INFINITY) {
            return f64::NEG_INFINITY;
        }
        let total = lp + self.log_lik(theta);
        if total.is_nan() {
            f64::NEG_INFINITY
        } else {
            total
        }
    }

    fn output_names(&self) -> Vec<String>;

    fn derive(&self, theta: &[f64], out: &mut Vec<f64>);
}

/// Sampled and reported draws of one fit.
#[derive(Debug, Clone)]
pub struct Fit {
    pub raw: PosteriorDraws,
    pub draws: PosteriorDraws,
    pub summaries: Vec<ParameterSummary>,
}

pub fn fit(model: &dyn Model, cfg: &SamplerConfig) -> Result<Fit> {
    let specs = model.params();
    let supports: Vec<Support> = specs.iter().map(|p| p.support).collect();
    let raw = run_mcmc(|x: &[f64]| model.logpost(x), &model.init(), &supports, cfg)?
        .with_names(specs.iter().map(|p| p.name.clone()).collect())?;
    let names = model.output_names();
    let out_supports = vec![Support::Unbounded; names.len()];
    let draws = raw.map_draws(names, out_supports, |row, out| model.derive(row, out));
    let summaries = summarize(&draws);
    Ok(Fit {
        raw,
        draws,
        summaries,
    })
}

fn std_normal_logpdf(z: &[f64]) -> f64 {
    z.iter().map(|v| -0.5 * v * v - LN_SQRT_2PI).sum()
}

fn normal_logpdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    -0.5 * z * z - LN_SQRT_2PI - sd.ln()
}

/// Truncated-normal prior parametrised by a handed-on `(mean, sd)` row.
pub fn tn_from_summary(
    summaries: &[ParameterSummary],
    label: &str,
    lo: f64,
) -> Result<TruncNormSpec> {
    let row = summaries
        .iter()
        .find(|s| s.label() == label)
        .ok_or_else(|| Error::Schema(format!("handoff is missing parameter `{label}`")))?;
    if !(row.sd > 0.0) || !row.sd.is_finite() || !row.mean.is_finite() {
        return Err(Error::Schema(format!(
            "handoff row `{label}` needs a finite mean and positive sd (got {}, {})",
            row.mean, row.sd
        )));
    }
    TruncNormSpec::lower(row.mean, row.sd, lo)
}

fn summary_moments(summaries: &[ParameterSummary], label: &str) -> Result<(f64, f64)> {
    let spec = tn_from_summary(summaries, label, f64::NEG_INFINITY)?;
    Ok((spec.mu, spec.sigma))
}

/// Positions of `labels` inside an MvN approximation, which must cover
/// exactly that set.
fn mvn_positions(mvn: &MvnApprox, labels: &[String]) -> Result<Vec<usize>> {
    if mvn.dim() != labels.len() {
        return Err(Error::Schema(format!(
            "handoff MvN has {} coordinates ({:?}), expected {:?}",
            mvn.dim(),
            mvn.names,
            labels
        )));
    }
    labels
        .iter()
        .map(|l| {
            mvn.index_of(l)
                .ok_or_else(|| Error::Schema(format!("handoff MvN is missing coordinate `{l}`")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Negative binomial family

/// Sufficient statistics of NB counts spread over sites.
#[derive(Debug, Clone)]
struct NbData {
    /// (y, multiplicity) over all sites.
    hist: Vec<(f64, f64)>,
    /// Σ ln y!
    ln_fact: f64,
    /// (n, Σ y) per site.
    sites: Vec<(f64, f64)>,
}

impl NbData {
    fn new(sites: &[Vec<u64>]) -> Self {
        let mut counts: HashMap<u64, u64> = HashMap::new();
        for &y in sites.iter().flatten() {
            *counts.entry(y).or_default() += 1;
        }
        let mut hist: Vec<(f64, f64)> = counts
            .into_iter()
            .map(|(y, c)| (y as f64, c as f64))
            .collect();
        hist.sort_by(|a, b| a.0.total_cmp(&b.0));
        let ln_fact = hist.iter().map(|&(y, c)| c * ln_gamma(y + 1.0)).sum();
        let sites = sites
            .iter()
            .map(|s| (s.len() as f64, s.iter().map(|&y| y as f64).sum()))
            .collect();
        Self {
            hist,
            ln_fact,
            sites,
        }
    }

    fn loglik(&self, alpha: f64, mu: impl Fn(usize) -> f64) -> f64 {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return f64::NEG_INFINITY;
        }
        let lg_alpha = ln_gamma(alpha);
        let mut ll = -self.ln_fact;
        for &(y, c) in &self.hist {
            ll += c * (ln_gamma(y + alpha) - lg_alpha);
        }
        let ln_alpha = alpha.ln();
        for (k, &(n, sum)) in self.sites.iter().enumerate() {
            if n == 0.0 {
                continue;
            }
            let m = mu(k);
            if !(m > 0.0) || !m.is_finite() {
                return f64::NEG_INFINITY;
            }
            let ln_total = (alpha + m).ln();
            ll += n * alpha * (ln_alpha - ln_total);
            if sum > 0.0 {
                ll += sum * (m.ln() - ln_total);
            }
        }
        ll
    }
}

/// Hierarchical NB model with a non-centred site effect:
/// `μ_k = exp(λ + σ·λ_z[k])`, `λ_z, λ ~ N(0, 2)`, `σ, α ~ TN₀₊(0, 2)`.
///
/// With one site the site effect is a scalar named `lambda_z`; with several
/// they are `lambda_z[1]`, … and the reported `mu` is the average of the
/// site means.
///
/// The sampled coordinates replace λ by `lambda_bar = λ + σ·mean(λ_z)`
/// (unit Jacobian), which takes the λ ↔ σ·λ_z ridge out of the proposal
/// geometry. Reported outputs use the original parameters.
#[derive(Debug, Clone)]
pub struct Model1 {
    data: NbData,
    params: Vec<ParamSpec>,
    half_normal: TruncNormSpec,
}

pub const NB_PRIOR_SD: f64 = 2.0;

impl Model1 {
    pub fn new(site_counts: &[Vec<u64>]) -> Result<Self> {
        if site_counts.is_empty() {
            return Err(Error::Data("model needs at least one site".into()));
        }
        let k = site_counts.len();
        let mut params: Vec<ParamSpec> = if k == 1 {
            vec![ParamSpec::new("lambda_z", Support::Unbounded)]
        } else {
            (1..=k)
                .map(|i| ParamSpec::new(format!("lambda_z[{i}]"), Support::Unbounded))
                .collect()
        };
        params.push(ParamSpec::new("lambda_bar", Support::Unbounded));
        params.push(ParamSpec::new("sigma", Support::Lower { lo: 0.0 }));
        params.push(ParamSpec::new("alpha", Support::Lower { lo: 0.0 }));
        Ok(Self {
            data: NbData::new(site_counts),
            params,
            half_normal: TruncNormSpec::lower(0.0, NB_PRIOR_SD, 0.0)?,
        })
    }

    /// Counts tagged with a 0-based site index.
    pub fn from_indexed(obs: &[(usize, u64)], n_sites: usize) -> Result<Self> {
        let mut sites = vec![Vec::new(); n_sites];
        for &(s, y) in obs {
            sites
                .get_mut(s)
                .ok_or_else(|| Error::Data(format!("site index {s} outside 0..{n_sites}")))?
                .push(y);
        }
        Self::new(&sites)
    }

    pub fn n_sites(&self) -> usize {
        self.data.sites.len()
    }

    /// `(λ_z, λ, σ, α)` from sampled coordinates.
    fn split<'a>(&self, theta: &'a [f64]) -> (&'a [f64], f64, f64, f64) {
        let k = self.n_sites();
        let lz = &theta[..k];
        let (sigma, alpha) = (theta[k + 1], theta[k + 2]);
        let z_bar = lz.iter().sum::<f64>() / k as f64;
        (lz, theta[k] - sigma * z_bar, sigma, alpha)
    }

    /// Sampled coordinates for given `(λ_z, λ, σ, α)`.
    pub fn coordinates(&self, lambda_z: &[f64], lambda: f64, sigma: f64, alpha: f64) -> Vec<f64> {
        let z_bar = lambda_z.iter().sum::<f64>() / lambda_z.len() as f64;
        let mut v = lambda_z.to_vec();
        v.extend_from_slice(&[lambda + sigma * z_bar, sigma, alpha]);
        v
    }
}

impl Model for Model1 {
    fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    fn init(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.n_sites() + 1];
        v.push(self.half_normal.mean());
        v.push(self.half_normal.mean());
        v
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        let (lz, lambda, sigma, alpha) = self.split(theta);
        lz.iter()
            .map(|&z| normal_logpdf(z, 0.0, NB_PRIOR_SD))
            .sum::<f64>()
            + normal_logpdf(lambda, 0.0, NB_PRIOR_SD)
            + self.half_normal.ln_pdf(sigma)
            + self.half_normal.ln_pdf(alpha)
            + if sigma > 0.0 && alpha > 0.0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
    }

    fn log_lik(&self, theta: &[f64]) -> f64 {
        let (lz, lambda, sigma, alpha) = self.split(theta);
        self.data.loglik(alpha, |k| (lambda + sigma * lz[k]).exp())
    }

    fn output_names(&self) -> Vec<String> {
        let k = self.n_sites();
        let mut names: Vec<String> = self.params[..k].iter().map(|p| p.name.clone()).collect();
        names.extend(["lambda", "sigma", "alpha", "mu"].map(String::from));
        names
    }

    fn derive(&self, theta: &[f64], out: &mut Vec<f64>) {
        let (lz, lambda, sigma, alpha) = self.split(theta);
        out.extend_from_slice(lz);
        out.extend_from_slice(&[lambda, sigma, alpha]);
        let mu = lz.iter().map(|z| (lambda + sigma * z).exp()).sum::<f64>() / lz.len() as f64;
        out.push(mu);
    }
}

/// NB model with truncated-normal priors from a handed-on summary:
/// `μ ~ TN₁₊(μ̄, SD(μ))`, `α ~ TN₀₊(ᾱ, SD(α))`.
#[derive(Debug, Clone)]
pub struct Model2 {
    data: NbData,
    params: Vec<ParamSpec>,
    prior_mu: TruncNormSpec,
    prior_alpha: TruncNormSpec,
}

impl Model2 {
    pub fn new(counts: &[u64], handoff: &[ParameterSummary]) -> Result<Self> {
        Self::with_priors(
            counts,
            tn_from_summary(handoff, "mu", 1.0)?,
            tn_from_summary(handoff, "alpha", 0.0)?,
        )
    }

    pub fn with_priors(
        counts: &[u64],
        prior_mu: TruncNormSpec,
        prior_alpha: TruncNormSpec,
    ) -> Result<Self> {
        Ok(Self {
            data: NbData::new(&[counts.to_vec()]),
            params: vec![
                ParamSpec::new("mu", Support::Lower { lo: prior_mu.lo }),
                ParamSpec::new("alpha", Support::Lower { lo: prior_alpha.lo }),
            ],
            prior_mu,
            prior_alpha,
        })
    }
}

impl Model for Model2 {
    fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    fn init(&self) -> Vec<f64> {
        vec![self.prior_mu.mean(), self.prior_alpha.mean()]
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        self.prior_mu.ln_pdf(theta[0]) + self.prior_alpha.ln_pdf(theta[1])
    }

    fn log_lik(&self, theta: &[f64]) -> f64 {
        self.data.loglik(theta[1], |_| theta[0])
    }

    fn output_names(&self) -> Vec<String> {
        vec!["mu".into(), "alpha".into()]
    }

    fn derive(&self, theta: &[f64], out: &mut Vec<f64>) {
        out.extend_from_slice(theta);
    }
}

/// NB model whose priors are the previous site's joint posterior:
/// `(λ_z, λ, σ, α) = θ̄ + L·z`, `z ~ N(0, I)`, `μ = exp(λ + σ·λ_z)`.
///
/// The chains move in `(λ_z, λ̄, σ, α)` with `λ̄ = λ + σ·λ_z`. Both this map
/// and `z ↦ θ̄ + L·z` have constant Jacobians, so the posterior over `z` is
/// the same as when sampling `z` itself; [`Model3::to_sampled`] converts.
#[derive(Debug, Clone)]
pub struct Model3 {
    data: NbData,
    params: Vec<ParamSpec>,
    mvn: MvnApprox,
    pos: Vec<usize>,
}

impl Model3 {
    pub fn new(counts: &[u64], mvn: &MvnApprox) -> Result<Self> {
        let labels: Vec<String> = NB_MVN_NAMES.iter().map(|s| s.to_string()).collect();
        let pos = mvn_positions(mvn, &labels)?;
        Ok(Self {
            data: NbData::new(&[counts.to_vec()]),
            params: vec![
                ParamSpec::new("lambda_z", Support::Unbounded),
                ParamSpec::new("lambda_bar", Support::Unbounded),
                ParamSpec::new("sigma", Support::Lower { lo: 0.0 }),
                ParamSpec::new("alpha", Support::Lower { lo: 0.0 }),
            ],
            mvn: mvn.clone(),
            pos,
        })
    }

    /// `(λ_z, λ, σ, α)` at sampled coordinates `v`.
    fn components(v: &[f64]) -> [f64; 4] {
        [v[0], v[1] - v[2] * v[0], v[2], v[3]]
    }

    /// Standard-normal coordinates of `(λ_z, λ, σ, α)`.
    pub fn standardize(&self, c: [f64; 4]) -> Vec<f64> {
        let mut x = [0.0; 4];
        for (i, &p) in self.pos.iter().enumerate() {
            x[p] = c[i];
        }
        let mut z = vec![0.0; 4];
        self.mvn.standardize_into(&x, &mut z);
        z
    }

    /// Sampled coordinates at standard-normal coordinates `z`.
    pub fn to_sampled(&self, z: &[f64]) -> Vec<f64> {
        let mut x = [0.0; 4];
        self.mvn.transform_into(z, &mut x);
        let [lz, lambda, sigma, alpha] = [
            x[self.pos[0]],
            x[self.pos[1]],
            x[self.pos[2]],
            x[self.pos[3]],
        ];
        vec![lz, lambda + sigma * lz, sigma, alpha]
    }
}

impl Model for Model3 {
    fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    fn init(&self) -> Vec<f64> {
        self.to_sampled(&[0.0; 4])
    }

    fn log_prior(&self, v: &[f64]) -> f64 {
        let c = Self::components(v);
        if c[2] > 0.0 && c[3] > 0.0 {
            std_normal_logpdf(&self.standardize(c))
        } else {
            f64::NEG_INFINITY
        }
    }

    fn log_lik(&self, v: &[f64]) -> f64 {
        let mu = v[1].exp();
        self.data.loglik(v[3], |_| mu)
    }

    fn output_names(&self) -> Vec<String> {
        let mut names: Vec<String> = NB_MVN_NAMES.iter().map(|s| s.to_string()).collect();
        names.push("mu".into());
        names
    }

    fn derive(&self, v: &[f64], out: &mut Vec<f64>) {
        out.extend_from_slice(&Self::components(v));
        out.push(v[1].exp());
    }
}

// ---------------------------------------------------------------------------
// Censored Gamma families

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Term {
    /// Exactly observed period: density term.
    Exact(f64),
    /// Period in `[lo, hi]`: CDF-mass term.
    Interval(f64, f64),
}

/// Likelihood terms of one group, with identical terms merged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TermSet {
    terms: Vec<(Term, f64)>,
    index: HashMap<(u64, u64), usize>,
}

impl TermSet {
    pub fn push(&mut self, term: Term) -> Result<()> {
        let key = match term {
            Term::Exact(x) => {
                if !(x > 0.0) || !x.is_finite() {
                    return Err(Error::Data(format!(
                        "exact period must be positive, got {x}"
                    )));
                }
                (x.to_bits(), x.to_bits())
            }
            Term::Interval(lo, hi) => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::Bounds {
                        lower: lo,
                        upper: hi,
                    });
                }
                if hi <= 0.0 {
                    return Err(Error::Data(format!(
                        "interval [{lo}, {hi}] holds no positive periods"
                    )));
                }
                (lo.to_bits(), hi.to_bits())
            }
        };
        match self.index.get(&key) {
            Some(&i) => self.terms[i].1 += 1.0,
            None => {
                self.index.insert(key, self.terms.len());
                self.terms.push((term, 1.0));
            }
        }
        Ok(())
    }

    /// Total number of terms, counting multiplicity.
    pub fn len(&self) -> usize {
        self.terms.iter().map(|t| t.1 as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn n_exact(&self) -> usize {
        self.terms
            .iter()
            .filter(|t| matches!(t.0, Term::Exact(_)))
            .map(|t| t.1 as usize)
            .sum()
    }

    pub fn terms(&self) -> impl Iterator<Item = (Term, f64)> + '_ {
        self.terms.iter().copied()
    }

    /// Interval terms through `interval`'s CDF, exact terms through the
    /// Gamma density.
    pub fn loglik<C: Cdf>(&self, interval: &C, exact: &GammaParams) -> f64 {
        let mut ll = 0.0;
        for &(t, c) in &self.terms {
            let v = match t {
                Term::Exact(x) => exact.ln_pdf(x),
                Term::Interval(lo, hi) => {
                    interval_censored_loglik(lo, hi, interval).unwrap_or(f64::NEG_INFINITY)
                }
            };
            if v == f64::NEG_INFINITY {
                return v;
            }
            ll += c * v;
        }
        ll
    }
}

/// Interval records split into groups 1 and 2.
pub fn interval_terms(records: &[ObservationRecord]) -> Result<[TermSet; 2]> {
    let mut groups = [TermSet::default(), TermSet::default()];
    for (i, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|e| Error::Data(format!("record {}: {e}", i + 1)))?;
        let g = match r.group {
            Some(g @ (1 | 2)) => g as usize - 1,
            _ => return Err(Error::Data(format!("record {} has no group label", i + 1))),
        };
        let term = match r.obs {
            Observation::Exact { value } => Term::Exact(value),
            Observation::Interval { w_l, w_u } => Term::Interval(w_l, w_u),
            Observation::Doubly { .. } => {
                return Err(Error::Data(format!("record {} is doubly censored", i + 1)))
            }
        };
        groups[g]
            .push(term)
            .map_err(|e| Error::Data(format!("record {}: {e}", i + 1)))?;
    }
    Ok(groups)
}

/// Left and right boundary terms of doubly-censored records.
///
/// Each record adds the left boundary over `(SL−ER, SL−EL)` and the right
/// boundary over `(SR−ER, SR−EL)`. Fully exact records add the exact period
/// twice; a zero-width boundary becomes an exact term at that value.
pub fn doubly_terms(records: &[ObservationRecord]) -> Result<TermSet> {
    let mut set = TermSet::default();
    for (i, r) in records.iter().enumerate() {
        let ctx = |e: Error| Error::Data(format!("record {}: {e}", i + 1));
        let b = censoring_bounds(r).map_err(ctx)?;
        if let Some(t) = b.exact {
            set.push(Term::Exact(t)).map_err(ctx)?;
            set.push(Term::Exact(t)).map_err(ctx)?;
            continue;
        }
        for (lo, hi) in [(b.r_l, b.l_l), (b.r_u, b.l_u)] {
            let term = if lo == hi {
                Term::Exact(hi)
            } else {
                Term::Interval(lo, hi)
            };
            set.push(term).map_err(ctx)?;
        }
    }
    Ok(set)
}

fn suffix(n_groups: usize, g: usize) -> String {
    if n_groups == 1 {
        String::new()
    } else {
        format!("_g{}", g + 1)
    }
}

/// Shape/rate Gamma model with interval-censored and exact terms per
/// group: `α_g ~ TN[1,30](1, 10)`, `β_g ~ TN[1,2](1, 10)`.
#[derive(Debug, Clone)]
pub struct AlphaBetaGamma {
    groups: Vec<TermSet>,
    params: Vec<ParamSpec>,
    prior_alpha: TruncNormSpec,
    prior_beta: TruncNormSpec,
}

pub const SHAPE_BOUNDS: (f64, f64) = (1.0, 30.0);
pub const RATE_BOUNDS: (f64, f64) = (1.0, 2.0);
pub const SHAPE_RATE_PRIOR: (f64, f64) = (1.0, 10.0);

/// Shape and rate priors of the base Gamma models.
pub fn shape_rate_priors() -> (TruncNormSpec, TruncNormSpec) {
    let (m, s) = SHAPE_RATE_PRIOR;
    (
        TruncNormSpec::new(m, s, SHAPE_BOUNDS.0, SHAPE_BOUNDS.1).expect("valid constant prior"),
        TruncNormSpec::new(m, s, RATE_BOUNDS.0, RATE_BOUNDS.1).expect("valid constant prior"),
    )
}

impl AlphaBetaGamma {
    pub fn new(groups: Vec<TermSet>) -> Self {
        let n = groups.len();
        let mut params = Vec::new();
        for g in 0..n {
            let sfx = suffix(n, g);
            params.push(ParamSpec::new(
                format!("alpha{sfx}"),
                Support::Interval {
                    lo: SHAPE_BOUNDS.0,
                    hi: SHAPE_BOUNDS.1,
                },
            ));
            params.push(ParamSpec::new(
                format!("beta{sfx}"),
                Support::Interval {
                    lo: RATE_BOUNDS.0,
                    hi: RATE_BOUNDS.1,
                },
            ));
        }
        let (prior_alpha, prior_beta) = shape_rate_priors();
        Self {
            groups,
            params,
            prior_alpha,
            prior_beta,
        }
    }

    pub fn groups(&self) -> &[TermSet] {
        &self.groups
    }
}

/// Two-group interval-censored Gamma model.
pub fn model4(records: &[ObservationRecord]) -> Result<AlphaBetaGamma> {
    Ok(AlphaBetaGamma::new(interval_terms(records)?.to_vec()))
}

/// Doubly-censored single-group Gamma model.
pub fn model7(records: &[ObservationRecord]) -> Result<AlphaBetaGamma> {
    Ok(AlphaBetaGamma::new(vec![doubly_terms(records)?]))
}

impl Model for AlphaBetaGamma {
    fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    fn init(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for _ in &self.groups {
            v.push(self.prior_alpha.mean());
            v.push(self.prior_beta.mean());
        }
        v
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        theta
            .chunks(2)
            .map(|ab| self.prior_alpha.ln_pdf(ab[0]) + self.prior_beta.ln_pdf(ab[1]))
            .sum()
    }

    fn log_lik(&self, theta: &[f64]) -> f64 {
        let mut ll = 0.0;
        for (terms, ab) in self.groups.iter().zip(theta.chunks(2)) {
            let Ok(dist) = GammaParams::new(ab[0], ab[1]) else {
                return f64::NEG_INFINITY;
            };
            ll += terms.loglik(&dist, &dist);
        }
        ll
    }

    fn output_names(&self) -> Vec<String> {
        let n = self.groups.len();
        (0..n)
            .flat_map(|g| {
                let sfx = suffix(n, g);
                ["mu", "sigma", "alpha", "beta"].map(|p| format!("{p}{sfx}"))
            })
            .collect()
    }

    fn derive(&self, theta: &[f64], out: &mut Vec<f64>) {
        for ab in theta.chunks(2) {
            let (a, b) = (ab[0], ab[1]);
            out.extend_from_slice(&[a / b, a.sqrt() / b, a, b]);
        }
    }
}

/// Mean/SD model with truncated-normal priors from a handed-on summary:
/// `μ_g ~ TN₁₊`, `σ_g ~ TN₀₊`. Censored terms use the Normal CDF, exact
/// terms the Gamma density with matching mean and SD.
#[derive(Debug, Clone)]
pub struct MuSigmaTn {
    groups: Vec<TermSet>,
    params: Vec<ParamSpec>,
    priors: Vec<(TruncNormSpec, TruncNormSpec)>,
}

impl MuSigmaTn {
    pub fn new(groups: Vec<TermSet>, handoff: &[ParameterSummary]) -> Result<Self> {
        let n = groups.len();
        let mut params = Vec::new();
        let mut priors = Vec::new();
        for g in 0..n {
            let sfx = suffix(n, g);
            let pm = tn_from_summary(handoff, &format!("mu{sfx}"), 1.0)?;
            let ps = tn_from_summary(handoff, &format!("sigma{sfx}"), 0.0)?;
            params.push(ParamSpec::new(
                format!("mu{sfx}"),
                Support::Lower { lo: 1.0 },
            ));
            params.push(ParamSpec::new(
                format!("sigma{sfx}"),
                Support::Lower { lo: 0.0 },
            ));
            priors.push((pm, ps));
        }
        Ok(Self {
            groups,
            params,
            priors,
        })
    }
}

pub fn model5(records: &[ObservationRecord], handoff: &[ParameterSummary]) -> Result<MuSigmaTn> {
    MuSigmaTn::new(interval_terms(records)?.to_vec(), handoff)
}

pub fn model7_tn(records: &[ObservationRecord], handoff: &[ParameterSummary]) -> Result<MuSigmaTn> {
    MuSigmaTn::new(vec![doubly_terms(records)?], handoff)
}

fn mu_sigma_loglik(groups: &[TermSet], theta: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (terms, ms) in groups.iter().zip(theta.chunks(2)) {
        let (mu, sigma) = (ms[0], ms[1]);
        if !(mu > 0.0 && sigma > 0.0) || !mu.is_finite() || !sigma.is_finite() {
            return f64::NEG_INFINITY;
        }
        if terms.is_empty() {
            continue;
        }
        let (Ok(normal), Ok(gamma)) = (Normal::new(mu, sigma), gamma_convert(mu, sigma)) else {
            return f64::NEG_INFINITY;
        };
        ll += terms.loglik(&normal, &gamma);
    }
    ll
}

fn mu_sigma_names(n: usize) -> Vec<String> {
    (0..n)
        .flat_map(|g| {
            let sfx = suffix(n, g);
            [format!("mu{sfx}"), format!("sigma{sfx}")]
        })
        .collect()
}

impl Model for MuSigmaTn {
    fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    fn init(&self) -> Vec<f64> {
        self.priors
            .iter()
            .flat_map(|(m, s)| [m.mean(), s.mean()])
            .collect()
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        self.priors
            .iter()
            .zip(theta.chunks(2))
            .map(|((pm, ps), ms)| pm.ln_pdf(ms[0]) + ps.ln_pdf(ms[1]))
            .sum()
    }

    fn log_lik(&self, theta: &[f64]) -> f64 {
        mu_sigma_loglik(&self.groups, theta)
    }

    fn output_names(&self) -> Vec<String> {
        mu_sigma_names(self.groups.len())
    }

    fn derive(&self, theta: &[f64], out: &mut Vec<f64>) {
        out.extend_from_slice(theta);
    }
}

/// How the σ line of the local rescaling reads the MvN draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaReading {
    /// `σ_g = π_σ·SD(σ_g) + σ̄_g`
    #[default]
    Sigma,
    /// `σ_g = π_μ·SD(σ_g) + σ̄_g`, with `π_μ` the raw draw of `μ_g`.
    LiteralMu,
}

/// Per-coordinate `(mean, SD)` used by the local rescaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rescale {
    pub mean: f64,
    pub sd: f64,
}

/// Mean/SD model with priors from a joint-posterior MvN handoff. With
/// rescaling, the MvN lives on standardized coordinates and each draw is
/// mapped back as `π·SD + mean` with the previous site's summaries.
#[derive(Debug, Clone)]
pub struct MuSigmaMvn {
    groups: Vec<TermSet>,
    params: Vec<ParamSpec>,
    mvn: MvnApprox,
    /// MvN coordinate of (μ_g, σ_g) for each group.
    pos: Vec<(usize, usize)>,
    rescale: Option<(Vec<(Rescale, Rescale)>, SigmaReading)>,
}

impl MuSigmaMvn {
    pub fn new(
        groups: Vec<TermSet>,
        mvn: &MvnApprox,
        rescale: Option<(&[ParameterSummary], SigmaReading)>,
    ) -> Result<Self> {
        let n = groups.len();
        let labels = mu_sigma_names(n);
        let flat = mvn_positions(mvn, &labels)?;
        let pos = flat.chunks(2).map(|p| (p[0], p[1])).collect();
        let rescale = match rescale {
            None => None,
            Some((summaries, reading)) => {
                let mut rows = Vec::new();
                for pair in labels.chunks(2) {
                    let (mm, ms) = summary_moments(summaries, &pair[0])?;
                    let (sm, ss) = summary_moments(summaries, &pair[1])?;
                    rows.push((Rescale { mean: mm, sd: ms }, Rescale { mean: sm, sd: ss }));
                }
                Some((rows, reading))
            }
        };
        Ok(Self {
            params: labels
                .iter()
                .map(|l| ParamSpec::new(format!("z_{l}"), Support::Unbounded))
                .collect(),
            groups,
            mvn: mvn.clone(),
            pos,
            rescale,
        })
    }

    /// `(μ_g, σ_g)` pairs at `z`, flattened.
    pub fn mu_sigma(&self, z: &[f64], out: &mut Vec<f64>) {
        let mut pi = vec![0.0; self.mvn.dim()];
        self.mvn.transform_into(z, &mut pi);
        for (g, &(im, is)) in self.pos.iter().enumerate() {
            let (pm, ps) = (pi[im], pi[is]);
            match &self.rescale {
                None => out.extend_from_slice(&[pm, ps]),
                Some((rows, reading)) => {
                    let (rm, rs) = rows[g];
                    let mu = pm * rm.sd + rm.mean;
                    let sigma_src = match reading {
                        SigmaReading::Sigma => ps,
                        SigmaReading::LiteralMu => pm,
                    };
                    out.extend_from_slice(&[mu, sigma_src * rs.sd + rs.mean]);
                }
            }
        }
    }
}

pub fn model6(
    records: &[ObservationRecord],
    mvn: &MvnApprox,
    summaries: &[ParameterSummary],
    reading: SigmaReading,
) -> Result<MuSigmaMvn> {
    MuSigmaMvn::new(
        interval_terms(records)?.to_vec(),
        mvn,
        Some((summaries, reading)),
    )
}

/// Doubly-censored handoff model over `(μ, σ)`; the MvN is used unadjusted.
pub fn model7_mvn(records: &[ObservationRecord], mvn: &MvnApprox) -> Result<MuSigmaMvn> {
    MuSigmaMvn::new(vec![doubly_terms(records)?], mvn, None)
}

impl Model for MuSigmaMvn {
    fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    fn init(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    fn log_prior(&self, z: &[f64]) -> f64 {
        let mut ms = Vec::with_capacity(z.len());
        self.mu_sigma(z, &mut ms);
        if ms.iter().all(|&v| v > 0.0) {
            std_normal_logpdf(z)
        } else {
            f64::NEG_INFINITY
        }
    }

    fn log_lik(&self, z: &[f64]) -> f64 {
        let mut ms = Vec::with_capacity(z.len());
        self.mu_sigma(z, &mut ms);
        mu_sigma_loglik(&self.groups, &ms)
    }

    fn output_names(&self) -> Vec<String> {
        mu_sigma_names(self.groups.len())
    }

    fn derive(&self, z: &[f64], out: &mut Vec<f64>) {
        self.mu_sigma(z, out);
    }
}

/// One prior-predictive draw of the base Gamma model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PriorPredictiveDraw {
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub period: f64,
}

/// Draws `(α, β)` from the shape/rate priors, the implied mean `α/β` and a
/// simulated period.
pub fn prior_predictive_gamma(n: usize, seed: u64) -> Vec<PriorPredictiveDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, s) = SHAPE_RATE_PRIOR;
    let normal = NormalDist::new(m, s).expect("valid constant prior");
    let mut truncated = |lo: f64, hi: f64| loop {
        let v: f64 = normal.sample(&mut rng);
        if v >= lo && v <= hi {
            break v;
        }
    };
    let pairs: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            (
                truncated(SHAPE_BOUNDS.0, SHAPE_BOUNDS.1),
                truncated(RATE_BOUNDS.0, RATE_BOUNDS.1),
            )
        })
        .collect();
    pairs
        .into_iter()
        .map(|(alpha, beta)| {
            let period = Gamma::new(alpha, 1.0 / beta)
                .expect("positive parameters")
                .sample(&mut rng);
            PriorPredictiveDraw {
                alpha,
                beta,
                mu: alpha / beta,
                period,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::nb_logpmf;
    use crate::distributions::NbParams;
    use crate::sampler::Execution;

    fn summary(label: &str, mean: f64, sd: f64) -> ParameterSummary {
        let (name, group) = crate::sampler::diagnostics::split_group_label(label);
        ParameterSummary {
            name,
            group,
            mean,
            sd,
            hdi_lo: f64::NAN,
            hdi_hi: f64::NAN,
            ess_bulk: f64::NAN,
            ess_tail: f64::NAN,
            rhat: f64::NAN,
        }
    }

    fn direct_nb(site_counts: &[Vec<u64>], mu: impl Fn(usize) -> f64, alpha: f64) -> f64 {
        site_counts
            .iter()
            .enumerate()
            .flat_map(|(k, ys)| ys.iter().map(move |&y| (k, y)))
            .map(|(k, y)| nb_logpmf(y, &NbParams::new(mu(k), alpha).unwrap()))
            .sum()
    }

    #[test]
    fn model1_prior_only_matches_closed_form() {
        let m = Model1::new(&[vec![]]).unwrap();
        let lp = m.logpost(&[0.0, 0.0, 1.0, 1.0]);
        // N(0,2) at 0 twice, half-normal(2) at 1 twice
        let ln_n0 = -(2.0 * std::f64::consts::PI).sqrt().ln() - 2f64.ln();
        let ln_hn1 = 2f64.ln() + ln_n0 - 1.0 / 8.0;
        assert!((lp - (2.0 * ln_n0 + 2.0 * ln_hn1)).abs() < 1e-12, "{lp}");
    }

    #[test]
    fn nb_sufficient_statistics_match_direct_sum() {
        let sites = vec![vec![3, 9, 12, 0, 9], vec![7, 7, 15], vec![]];
        let m = Model1::new(&sites).unwrap();
        let lz = [0.3, -1.1, 0.4];
        let theta = m.coordinates(&lz, 2.1, 0.2, 6.5);
        let direct = direct_nb(&sites, |k| (2.1 + 0.2 * lz[k]).exp(), 6.5);
        assert!((m.log_lik(&theta) - direct).abs() < 1e-9);

        let h = [summary("mu", 9.0, 0.5), summary("alpha", 8.0, 1.0)];
        let m2 = Model2::new(&sites[0], &h).unwrap();
        let direct = direct_nb(&sites[..1], |_| 8.7, 7.5);
        assert!((m2.log_lik(&[8.7, 7.5]) - direct).abs() < 1e-9);
    }

    #[test]
    fn model1_indexed_rejects_unknown_site() {
        assert!(Model1::from_indexed(&[(0, 3), (2, 4)], 2).is_err());
        let m = Model1::from_indexed(&[(0, 3), (1, 4)], 2).unwrap();
        assert_eq!(m.params()[0].name, "lambda_z[1]");
    }

    #[test]
    fn truncation_violations_are_neg_inf() {
        let m1 = Model1::new(&[vec![3, 4]]).unwrap();
        assert_eq!(m1.logpost(&[0.0, 1.0, -0.1, 2.0]), f64::NEG_INFINITY);
        assert_eq!(m1.logpost(&[0.0, 1.0, 0.5, 0.0]), f64::NEG_INFINITY);
        let h = [summary("mu", 9.0, 0.5), summary("alpha", 8.0, 1.0)];
        let m2 = Model2::new(&[3, 4], &h).unwrap();
        assert_eq!(m2.logpost(&[0.9, 8.0]), f64::NEG_INFINITY);
        assert_eq!(m2.logpost(&[9.0, -1.0]), f64::NEG_INFINITY);
        let recs = vec![ObservationRecord::interval(1.0, 3.0, Some(1))];
        let m4 = model4(&recs).unwrap();
        for theta in [
            [0.5, 1.5, 5.0, 1.5],
            [5.0, 2.5, 5.0, 1.5],
            [31.0, 1.5, 5.0, 1.5],
        ] {
            let v = m4.logpost(&theta);
            assert_eq!(v, f64::NEG_INFINITY, "{theta:?}");
        }
        let h5 = [
            summary("mu_g1", 3.3, 0.3),
            summary("sigma_g1", 1.5, 0.2),
            summary("mu_g2", 3.7, 0.3),
            summary("sigma_g2", 1.6, 0.2),
        ];
        let m5 = model5(&recs, &h5).unwrap();
        assert_eq!(m5.logpost(&[0.99, 1.5, 3.7, 1.6]), f64::NEG_INFINITY);
        assert_eq!(m5.logpost(&[3.3, 0.0, 3.7, 1.6]), f64::NEG_INFINITY);
        assert!(!m5.logpost(&[f64::NAN, 1.5, 3.7, 1.6]).is_nan());
    }

    #[test]
    fn likelihood_additivity() {
        let a = vec![
            ObservationRecord::interval(1.0, 4.0, Some(1)),
            ObservationRecord::interval(2.0, 2.0, Some(2)),
        ];
        let b = vec![
            ObservationRecord::interval(0.0, 3.0, Some(2)),
            ObservationRecord::interval(5.0, 5.0, Some(1)),
            ObservationRecord::interval(1.0, 4.0, Some(1)),
        ];
        let ab: Vec<_> = a.iter().chain(&b).cloned().collect();
        let theta = [6.0, 1.7, 4.0, 1.2];
        let (ma, mb, mab) = (
            model4(&a).unwrap(),
            model4(&b).unwrap(),
            model4(&ab).unwrap(),
        );
        let prior = ma.log_prior(&theta);
        let lhs = mab.logpost(&theta) - prior;
        let rhs = (ma.logpost(&theta) - prior) + (mb.logpost(&theta) - prior);
        assert!((lhs - rhs).abs() < 1e-10);

        let ya = vec![3, 8, 11];
        let yb = vec![9, 0];
        let yab: Vec<u64> = ya.iter().chain(&yb).copied().collect();
        let h = [summary("mu", 9.0, 0.5), summary("alpha", 8.0, 1.0)];
        let t = [8.8, 7.9];
        let f = |y: &[u64]| {
            let m = Model2::new(y, &h).unwrap();
            m.logpost(&t) - m.log_prior(&t)
        };
        assert!((f(&yab) - f(&ya) - f(&yb)).abs() < 1e-10);
    }

    #[test]
    fn model4_exact_record_uses_density() {
        let m = model4(&[ObservationRecord::interval(3.0, 3.0, Some(1))]).unwrap();
        let theta = [6.0, 1.7, 4.0, 1.2];
        let expected = GammaParams::new(6.0, 1.7).unwrap().ln_pdf(3.0);
        assert!((m.log_lik(&theta) - expected).abs() < 1e-14);
        assert!(model4(&[ObservationRecord::interval(0.0, 0.0, Some(1))]).is_err());
        assert!(model4(&[ObservationRecord::interval(1.0, 2.0, None)]).is_err());
    }

    #[test]
    fn model4_outputs_are_gamma_moments() {
        let m = model4(&[]).unwrap();
        let mut out = Vec::new();
        m.derive(&[6.0, 1.5, 4.0, 2.0], &mut out);
        assert_eq!(
            m.output_names()[..4],
            ["mu_g1", "sigma_g1", "alpha_g1", "beta_g1"]
        );
        assert_eq!(
            out,
            vec![4.0, 6f64.sqrt() / 1.5, 6.0, 1.5, 2.0, 1.0, 4.0, 2.0]
        );
    }

    #[test]
    fn group_permutation_equivariance() {
        let recs = vec![
            ObservationRecord::interval(1.0, 4.0, Some(1)),
            ObservationRecord::interval(2.0, 2.0, Some(2)),
            ObservationRecord::interval(0.0, 3.0, Some(2)),
        ];
        let swapped: Vec<_> = recs
            .iter()
            .map(|r| ObservationRecord {
                group: r.group.map(|g| 3 - g),
                ..r.clone()
            })
            .collect();
        let m4 = model4(&recs).unwrap();
        let m4s = model4(&swapped).unwrap();
        assert_eq!(
            m4.logpost(&[6.0, 1.7, 4.0, 1.2]),
            m4s.logpost(&[4.0, 1.2, 6.0, 1.7])
        );

        let h = [
            summary("mu_g1", 3.3, 0.3),
            summary("sigma_g1", 1.5, 0.2),
            summary("mu_g2", 3.7, 0.4),
            summary("sigma_g2", 1.6, 0.25),
        ];
        let hs = [
            summary("mu_g2", 3.3, 0.3),
            summary("sigma_g2", 1.5, 0.2),
            summary("mu_g1", 3.7, 0.4),
            summary("sigma_g1", 1.6, 0.25),
        ];
        let a = model5(&recs, &h).unwrap().logpost(&[3.1, 1.4, 3.9, 1.7]);
        let b = model5(&swapped, &hs)
            .unwrap()
            .logpost(&[3.9, 1.7, 3.1, 1.4]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn model5_uses_normal_intervals_and_gamma_exact() {
        let recs = vec![
            ObservationRecord::interval(1.0, 4.0, Some(1)),
            ObservationRecord::interval(3.0, 3.0, Some(1)),
        ];
        let h = [
            summary("mu_g1", 3.3, 0.3),
            summary("sigma_g1", 1.5, 0.2),
            summary("mu_g2", 3.7, 0.4),
            summary("sigma_g2", 1.6, 0.25),
        ];
        let m = model5(&recs, &h).unwrap();
        let (mu, sigma) = (3.2, 1.4);
        let normal = Normal::new(mu, sigma).unwrap();
        let expected = (normal.cdf(4.0) - normal.cdf(1.0)).ln()
            + gamma_convert(mu, sigma).unwrap().ln_pdf(3.0);
        assert!((m.log_lik(&[mu, sigma, 3.7, 1.6]) - expected).abs() < 1e-12);

        let err = model5(&recs, &h[..3]).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn model7_boundaries() {
        let set = doubly_terms(&[ObservationRecord::doubly(0.0, 1.0, 5.0, 6.0)]).unwrap();
        let terms: Vec<_> = set.terms().collect();
        assert_eq!(
            terms,
            vec![
                (Term::Interval(4.0, 5.0), 1.0),
                (Term::Interval(5.0, 6.0), 1.0)
            ]
        );

        let set = doubly_terms(&[ObservationRecord::doubly(2.0, 2.0, 7.0, 7.0)]).unwrap();
        assert_eq!(
            set.terms().collect::<Vec<_>>(),
            vec![(Term::Exact(5.0), 2.0)]
        );

        let set = doubly_terms(&[ObservationRecord::doubly(1.0, 1.0, 4.0, 6.0)]).unwrap();
        assert_eq!(
            set.terms().collect::<Vec<_>>(),
            vec![(Term::Exact(3.0), 1.0), (Term::Exact(5.0), 1.0)]
        );

        // exposure may end after symptom onset starts
        let set = doubly_terms(&[ObservationRecord::doubly(0.0, 6.0, 4.0, 9.0)]).unwrap();
        assert_eq!(set.n_exact(), 0);
        assert!(doubly_terms(&[ObservationRecord::doubly(0.0, 3.0, 0.0, 2.0)]).is_err());
        assert!(doubly_terms(&[ObservationRecord::doubly(1.0, 1.0, 1.0, 1.0)]).is_err());
        assert!(doubly_terms(&[ObservationRecord::doubly(0.0, 1.0, 6.0, 5.0)]).is_err());
    }

    #[test]
    fn model7_exact_windows_collapse_to_twice_gamma() {
        let ts = [3.0, 5.0, 5.0, 8.0, 12.0];
        let recs: Vec<_> = ts
            .iter()
            .map(|&t| ObservationRecord::doubly(1.0, 1.0, 1.0 + t, 1.0 + t))
            .collect();
        let m = model7(&recs).unwrap();
        let (pa, pb) = shape_rate_priors();
        for (a, b) in [(4.0, 1.1), (9.5, 1.8), (1.2, 1.01)] {
            let g = GammaParams::new(a, b).unwrap();
            let plain: f64 = ts.iter().map(|&t| g.ln_pdf(t)).sum();
            let expected = pa.ln_pdf(a) + pb.ln_pdf(b) + 2.0 * plain;
            assert!((m.logpost(&[a, b]) - expected).abs() < 1e-10);
        }
    }

    fn mvn_2x2(names: [&str; 2], mean: [f64; 2], l: [f64; 3]) -> MvnApprox {
        let chol = nalgebra::DMatrix::from_row_slice(2, 2, &[l[0], 0.0, l[1], l[2]]);
        MvnApprox::from_parts(
            names.iter().map(|s| s.to_string()).collect(),
            mean.to_vec(),
            chol,
            1000,
        )
        .unwrap()
    }

    fn mvn_4(names: [&str; 4], mean: [f64; 4], diag: [f64; 4]) -> MvnApprox {
        let mut chol = nalgebra::DMatrix::<f64>::zeros(4, 4);
        for i in 0..4 {
            chol[(i, i)] = diag[i];
        }
        chol[(1, 0)] = 0.1;
        MvnApprox::from_parts(
            names.iter().map(|s| s.to_string()).collect(),
            mean.to_vec(),
            chol,
            1000,
        )
        .unwrap()
    }

    #[test]
    fn model3_zero_is_previous_mean() {
        let mvn = mvn_4(NB_MVN_NAMES, [0.5, 1.7, 0.9, 8.0], [0.3, 0.2, 0.1, 0.8]);
        let m = Model3::new(&[9, 10], &mvn).unwrap();
        let mut out = Vec::new();
        let v0 = m.to_sampled(&[0.0; 4]);
        m.derive(&v0, &mut out);
        for (a, b) in out[..4].iter().zip([0.5, 1.7, 0.9, 8.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((out[4] - (1.7f64 + 0.9 * 0.5).exp()).abs() < 1e-12);
        let direct = direct_nb(&[vec![9, 10]], |_| out[4], 8.0);
        assert!((m.log_lik(&v0) - direct).abs() < 1e-9);

        // the prior in sampled coordinates is N(0, I) on z up to a constant
        let zs = [[0.0; 4], [0.3, -1.2, 0.4, 0.7], [-0.8, 0.5, -0.2, 1.1]];
        let offsets: Vec<f64> = zs
            .iter()
            .map(|z| m.log_prior(&m.to_sampled(z)) - std_normal_logpdf(z))
            .collect();
        for o in &offsets {
            assert!((o - offsets[0]).abs() < 1e-10);
        }
        for z in zs {
            for (a, b) in m
                .standardize(Model3::components(&m.to_sampled(&z)))
                .iter()
                .zip(z)
            {
                assert!((a - b).abs() < 1e-10);
            }
        }

        let wrong = mvn_4(["lambda_z", "lambda", "sigma", "beta"], [0.0; 4], [1.0; 4]);
        assert!(matches!(
            Model3::new(&[1], &wrong).unwrap_err(),
            Error::Schema(_)
        ));
    }

    #[test]
    fn model6_rescaling() {
        let labels = ["mu_g1", "sigma_g1", "mu_g2", "sigma_g2"];
        let mvn = mvn_4(labels, [0.2, -0.1, 0.0, 0.3], [1.0, 0.9, 1.1, 1.0]);
        let h = [
            summary("mu_g1", 3.3, 0.3),
            summary("sigma_g1", 1.5, 0.2),
            summary("mu_g2", 3.7, 0.4),
            summary("sigma_g2", 1.6, 0.25),
        ];
        let m = model6(&[], &mvn, &h, SigmaReading::Sigma).unwrap();
        let mut out = Vec::new();
        m.derive(&[0.0; 4], &mut out);
        // hand evaluation of π·SD + mean at z = 0 (π = MvN mean)
        let expected = [0.2 * 0.3 + 3.3, -0.1 * 0.2 + 1.5, 3.7, 0.3 * 0.25 + 1.6];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }

        let lit = model6(&[], &mvn, &h, SigmaReading::LiteralMu).unwrap();
        out.clear();
        lit.derive(&[0.0; 4], &mut out);
        assert!((out[1] - (0.2 * 0.2 + 1.5)).abs() < 1e-12);
        assert!((out[3] - 1.6).abs() < 1e-12);

        // identity adjustment reduces to the unadjusted MvN
        let unit = [
            summary("mu_g1", 0.0, 1.0),
            summary("sigma_g1", 0.0, 1.0),
            summary("mu_g2", 0.0, 1.0),
            summary("sigma_g2", 0.0, 1.0),
        ];
        let mvn_raw = mvn_4(labels, [3.2, 1.5, 3.6, 1.7], [0.3, 0.2, 0.3, 0.2]);
        let recs = vec![
            ObservationRecord::interval(1.0, 4.0, Some(1)),
            ObservationRecord::interval(2.0, 6.0, Some(2)),
        ];
        let adj = model6(&recs, &mvn_raw, &unit, SigmaReading::Sigma).unwrap();
        let plain =
            MuSigmaMvn::new(interval_terms(&recs).unwrap().to_vec(), &mvn_raw, None).unwrap();
        for z in [[0.0; 4], [0.3, -1.0, 0.7, 0.2]] {
            assert_eq!(adj.logpost(&z), plain.logpost(&z));
        }
        assert!(model6(&recs, &mvn_raw, &h[..2], SigmaReading::Sigma).is_err());
    }

    #[test]
    fn model7_mvn_rejects_nonpositive_sigma() {
        let mvn = mvn_2x2(["mu", "sigma"], [5.8, 0.5], [0.3, 0.0, 0.1]);
        let m = model7_mvn(&[ObservationRecord::doubly(0.0, 1.0, 5.0, 6.0)], &mvn).unwrap();
        assert!(m.logpost(&[0.0, 0.0]).is_finite());
        assert_eq!(m.logpost(&[0.0, -6.0]), f64::NEG_INFINITY);
    }

    #[test]
    fn prior_predictive_respects_truncation() {
        let draws = prior_predictive_gamma(2000, 3);
        assert!(draws
            .iter()
            .all(|d| (1.0..=30.0).contains(&d.alpha) && (1.0..=2.0).contains(&d.beta)));
        let (pa, pb) = shape_rate_priors();
        let mean_a = draws.iter().map(|d| d.alpha).sum::<f64>() / 2000.0;
        let mean_b = draws.iter().map(|d| d.beta).sum::<f64>() / 2000.0;
        assert!(
            (mean_a - pa.mean()).abs() < 0.5,
            "{mean_a} vs {}",
            pa.mean()
        );
        assert!((mean_b - pb.mean()).abs() < 0.03);
        assert_eq!(draws, prior_predictive_gamma(2000, 3));
    }

    #[test]
    fn model2_zero_data_posterior_is_prior() {
        let h = [summary("mu", 9.0, 0.5), summary("alpha", 8.0, 1.0)];
        let m = Model2::new(&[], &h).unwrap();
        let cfg = SamplerConfig {
            n_draws: 2000,
            execution: Execution::Sequential,
            ..Default::default()
        }
        .with_seed(5);
        let f = fit(&m, &cfg).unwrap();
        let prior = tn_from_summary(&h, "mu", 1.0).unwrap();
        let mut mu = f.draws.pooled(0);
        mu.sort_by(f64::total_cmp);
        let n = mu.len() as f64;
        let ks = mu
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = prior.cdf(x);
                (c - i as f64 / n).abs().max((c - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.05, "KS distance {ks}");
    }
}
