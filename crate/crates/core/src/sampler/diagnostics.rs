//! Rank-normalized split R-hat, bulk/tail effective sample size, highest
//! density intervals and the per-parameter summary table.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::PosteriorDraws;
use crate::distributions::special::norm_quantile;
use crate::error::{Error, Result};

/// Probability mass of the reported highest density interval.
pub const HDI_PROB: f64 = 0.90;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EssMode {
    Bulk,
    Tail,
}

/// One row of the posterior summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSummary {
    pub name: String,
    pub group: Option<u8>,
    #[serde(with = "crate::numfmt::nan_as_null")]
    pub mean: f64,
    #[serde(with = "crate::numfmt::nan_as_null")]
    pub sd: f64,
    #[serde(with = "crate::numfmt::nan_as_null")]
    pub hdi_lo: f64,
    #[serde(with = "crate::numfmt::nan_as_null")]
    pub hdi_hi: f64,
    #[serde(with = "crate::numfmt::nan_as_null")]
    pub ess_bulk: f64,
    #[serde(with = "crate::numfmt::nan_as_null")]
    pub ess_tail: f64,
    #[serde(with = "crate::numfmt::inf_as_null")]
    pub rhat: f64,
}

impl ParameterSummary {
    /// Column label used inside draws: `name` or `name_g{group}`.
    pub fn label(&self) -> String {
        match self.group {
            Some(g) => format!("{}_g{g}", self.name),
            None => self.name.clone(),
        }
    }
}

/// Splits `mu_g1` into (`mu`, Some(1)); other labels pass through.
pub fn split_group_label(label: &str) -> (String, Option<u8>) {
    if let Some((base, g)) = label.rsplit_once("_g") {
        if let Ok(g) = g.parse::<u8>() {
            if !base.is_empty() {
                return (base.to_string(), Some(g));
            }
        }
    }
    (label.to_string(), None)
}

fn check_chains(chains: &[Vec<f64>], min_draws: usize) -> Result<usize> {
    if chains.len() < 2 {
        return Err(Error::Diagnostics(format!(
            "need at least 2 chains, got {}",
            chains.len()
        )));
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < min_draws {
        return Err(Error::Diagnostics(format!(
            "need at least {min_draws} draws per chain, got {n}"
        )));
    }
    Ok(n)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Halves every chain (dropping the middle draw of odd-length chains).
fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[n - half..n].to_vec()])
        .collect()
}

/// Replaces pooled values by `Φ⁻¹((r − 3/8) / (S + 1/4))` of their average ranks.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(Vec::len).sum();
    let mut idx: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, &x)| (x, c, i)))
        .collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let s = total as f64;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && idx[end].0 == idx[start].0 {
            end += 1;
        }
        // average of 1-based ranks start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        let z = norm_quantile((rank - 0.375) / (s + 0.25));
        for &(_, c, i) in &idx[start..end] {
            out[c][i] = z;
        }
        start = end;
    }
    out
}

fn rhat_raw(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let within = chains.iter().map(|c| variance(c)).sum::<f64>() / chains.len() as f64;
    if !(within > 0.0) {
        return f64::INFINITY;
    }
    let between = n * variance(&means);
    (((n - 1.0) / n * within + between / n) / within).sqrt()
}

/// Rank-normalized split R-hat. Returns `+inf` when the within-chain
/// variance vanishes.
pub fn compute_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    check_chains(chains, 4)?;
    let split = split_chains(chains);
    Ok(rhat_raw(&rank_normalize(&split)))
}

/// Biased autocovariance `(1/n) Σ (x_i − m)(x_{i+t} − m)` for every lag, via FFT.
fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|v| Complex::new(v - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    buf.iter()
        .take(n)
        .map(|c| c.re / (size as f64 * n as f64))
        .collect()
}

/// Multi-chain ESS with Geyer's initial monotone sequence.
fn ess_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c)).collect();
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let nf = n as f64;
    let mean_var = acov.iter().map(|a| a[0]).sum::<f64>() / m as f64 * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += variance(&chain_means);
    }
    if !(var_plus > 0.0) || !var_plus.is_finite() {
        return f64::NAN;
    }
    let acov_mean = |t: usize| acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;

    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = 1.0 - (mean_var - acov_mean(1)) / var_plus;
    rho[1] = rho_odd;
    let mut t = 1;
    while t + 5 < n && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (mean_var - acov_mean(t + 1)) / var_plus;
        rho_odd = 1.0 - (mean_var - acov_mean(t + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[t + 1] = rho_even;
            rho[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t as isize - 2;
    let tail = (max_t + 1) as usize;
    if rho_even > 0.0 && tail < n {
        rho[tail] = rho_even;
    }
    // Geyer's initial monotone sequence
    let mut t = 1isize;
    while t <= max_t - 2 {
        let i = t as usize;
        if rho[i + 1] + rho[i + 2] > rho[i - 1] + rho[i] {
            let avg = (rho[i - 1] + rho[i]) / 2.0;
            rho[i + 1] = avg;
            rho[i + 2] = avg;
        }
        t += 2;
    }
    let mut tau = -1.0 + 2.0 * rho[..tail.min(n)].iter().sum::<f64>();
    if tail < n {
        tau += rho[tail];
    }
    let total = (m * n) as f64;
    let tau = tau.max(1.0 / total.log10());
    total / tau
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    // linear interpolation between order statistics
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Effective sample size on the bulk (rank-normalized split chains) or the
/// tails (minimum over the 5% and 95% quantile indicators).
pub fn compute_ess(chains: &[Vec<f64>], mode: EssMode) -> Result<f64> {
    check_chains(chains, 4)?;
    let total: usize = chains.iter().map(Vec::len).sum();
    if total < 8 {
        return Err(Error::Diagnostics(format!(
            "need at least 8 draws, got {total}"
        )));
    }
    let split = split_chains(chains);
    match mode {
        EssMode::Bulk => Ok(ess_raw(&rank_normalize(&split))),
        EssMode::Tail => {
            let mut pooled: Vec<f64> = split.concat();
            pooled.sort_by(f64::total_cmp);
            let mut best = f64::INFINITY;
            for q in [0.05, 0.95] {
                let cut = quantile(&pooled, q);
                let ind: Vec<Vec<f64>> = split
                    .iter()
                    .map(|c| {
                        c.iter()
                            .map(|&x| if x <= cut { 1.0 } else { 0.0 })
                            .collect()
                    })
                    .collect();
                let e = ess_raw(&ind);
                if e.is_nan() {
                    return Ok(f64::NAN);
                }
                best = best.min(e);
            }
            Ok(best)
        }
    }
}

/// Shortest interval spanning `⌈prob · N⌉` sorted draws.
pub fn compute_hdi(draws: &[f64], prob: f64) -> Result<(f64, f64)> {
    if draws.is_empty() {
        return Err(Error::Diagnostics(
            "cannot compute an HDI of no draws".into(),
        ));
    }
    if !(prob > 0.0 && prob <= 1.0) {
        return Err(Error::Diagnostics(format!(
            "HDI probability must lie in (0, 1], got {prob}"
        )));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let keep = ((prob * n as f64).ceil() as usize).clamp(1, n);
    let (mut lo, mut hi) = (sorted[0], sorted[keep - 1]);
    for i in 1..=(n - keep) {
        let (a, b) = (sorted[i], sorted[i + keep - 1]);
        if b - a < hi - lo {
            lo = a;
            hi = b;
        }
    }
    Ok((lo, hi))
}

fn summarize_column(name: &str, chains: &[Vec<f64>]) -> ParameterSummary {
    let pooled: Vec<f64> = chains.concat();
    let (name, group) = split_group_label(name);
    let m = mean(&pooled);
    let sd = if pooled.len() > 1 {
        variance(&pooled).max(0.0).sqrt()
    } else {
        f64::NAN
    };
    let (hdi_lo, hdi_hi) = compute_hdi(&pooled, HDI_PROB).unwrap_or((f64::NAN, f64::NAN));
    let ess_bulk = compute_ess(chains, EssMode::Bulk).unwrap_or(f64::NAN);
    let ess_tail = compute_ess(chains, EssMode::Tail).unwrap_or(f64::NAN);
    let rhat = compute_rhat(chains).unwrap_or(f64::INFINITY);
    ParameterSummary {
        name,
        group,
        mean: m,
        sd,
        hdi_lo,
        hdi_hi,
        ess_bulk,
        ess_tail,
        rhat,
    }
}

/// One summary row per parameter, in the order of `draws.names`. Failed
/// diagnostics are reported as flagged values (`NaN` ESS, `+inf` R-hat).
pub fn summarize(draws: &PosteriorDraws) -> Vec<ParameterSummary> {
    (0..draws.n_params())
        .map(|p| summarize_column(&draws.names[p], &draws.param_chains(p)))
        .collect()
}
