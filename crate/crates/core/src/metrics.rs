//! Posterior comparison metrics and tabulated curves.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distributions::{gamma_convert, nb_logpmf, Cdf, NbParams};
use crate::error::{Error, Result};
use crate::sampler::diagnostics::compute_hdi;
use crate::sampler::ParameterSummary;

/// Mean and standard deviation of a normal approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalMoments {
    pub mean: f64,
    pub sd: f64,
}

impl NormalMoments {
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        if !mean.is_finite() || !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::Domain(format!(
                "normal moments need finite mean and sd > 0, got ({mean}, {sd})"
            )));
        }
        Ok(Self { mean, sd })
    }

    pub fn from_summary(s: &ParameterSummary) -> Result<Self> {
        Self::new(s.mean, s.sd)
    }
}

/// Bhattacharyya coefficient of two normals, in `(0, 1]`.
pub fn bhattacharyya_normal(a: NormalMoments, b: NormalMoments) -> f64 {
    let var_sum = a.sd * a.sd + b.sd * b.sd;
    let gap = a.mean - b.mean;
    (2.0 * a.sd * b.sd / var_sum).sqrt() * (-0.25 * gap * gap / var_sum).exp()
}

/// Squared Hellinger distance `1 − BC` of two normals.
pub fn hellinger_sq_normal(a: NormalMoments, b: NormalMoments) -> f64 {
    if a == b {
        return 0.0;
    }
    1.0 - bhattacharyya_normal(a, b)
}

/// Distribution whose curves are tabulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveFamily {
    /// Draws are `(mu, alpha)`; the grid is the integers `0..=max`.
    NegBinomial,
    /// Draws are `(mu, sigma)`; the grid is `points` evenly spaced values on `[0, max]`.
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub max: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn new(max: f64, points: usize) -> Self {
        Self { max, points }
    }

    fn values(&self, family: CurveFamily) -> Result<Vec<f64>> {
        if !(self.max > 0.0) || !self.max.is_finite() {
            return Err(Error::Config(format!(
                "grid max must be positive, got {}",
                self.max
            )));
        }
        let grid: Vec<f64> = match family {
            CurveFamily::NegBinomial => (0..=self.max.floor() as u64).map(|y| y as f64).collect(),
            CurveFamily::Gamma => {
                if self.points < 2 {
                    return Err(Error::Config("grid needs at least two points".into()));
                }
                let h = self.max / (self.points - 1) as f64;
                (0..self.points).map(|i| i as f64 * h).collect()
            }
        };
        Ok(grid)
    }
}

/// PDF and CDF averaged over posterior draws, with an optional 90% HDI band
/// of the CDF at each grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    pub family: CurveFamily,
    pub grid: Vec<f64>,
    pub pdf: Vec<f64>,
    pub cdf: Vec<f64>,
    pub band: Option<(Vec<f64>, Vec<f64>)>,
}

const BAND_PROB: f64 = 0.9;

fn curve_of(
    family: CurveFamily,
    (a, b): (f64, f64),
    grid: &[f64],
    pdf: &mut [f64],
    cdf: &mut [f64],
) -> Result<()> {
    match family {
        CurveFamily::NegBinomial => {
            let p = NbParams::new(a, b)?;
            let mut acc = 0.0;
            for (i, &y) in grid.iter().enumerate() {
                let m = nb_logpmf(y as u64, &p).exp();
                acc += m;
                pdf[i] = m;
                cdf[i] = acc.min(1.0);
            }
        }
        CurveFamily::Gamma => {
            let g = gamma_convert(a, b)?;
            for (i, &x) in grid.iter().enumerate() {
                pdf[i] = g.ln_pdf(x).exp();
                cdf[i] = g.cdf(x);
            }
        }
    }
    Ok(())
}

/// Tabulates curves over `draws` (one parameter pair per posterior draw).
pub fn posterior_curves(
    family: CurveFamily,
    draws: &[(f64, f64)],
    spec: &GridSpec,
    bands: bool,
) -> Result<Curves> {
    if draws.is_empty() {
        return Err(Error::Data("no draws to tabulate".into()));
    }
    let grid = spec.values(family)?;
    if grid.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    let n = grid.len();
    let mut pdf = vec![0.0; n];
    let mut cdf = vec![0.0; n];
    let mut cdf_draws = if bands {
        vec![Vec::with_capacity(draws.len()); n]
    } else {
        Vec::new()
    };
    let (mut p, mut c) = (vec![0.0; n], vec![0.0; n]);
    for &d in draws {
        curve_of(family, d, &grid, &mut p, &mut c)?;
        for i in 0..n {
            pdf[i] += p[i];
            cdf[i] += c[i];
        }
        if bands {
            for (col, &v) in cdf_draws.iter_mut().zip(&c) {
                col.push(v);
            }
        }
    }
    let k = draws.len() as f64;
    pdf.iter_mut().chain(cdf.iter_mut()).for_each(|v| *v /= k);
    let band = if bands {
        let (lo, hi) = cdf_draws
            .iter()
            .map(|col| compute_hdi(col, BAND_PROB))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Some((lo, hi))
    } else {
        None
    };
    Ok(Curves {
        family,
        grid,
        pdf,
        cdf,
        band,
    })
}

pub fn write_curves_csv(path: &Path, curves: &Curves) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    match &curves.band {
        Some(_) => w.write_record(["grid", "pdf", "cdf", "band_lo", "band_hi"])?,
        None => w.write_record(["grid", "pdf", "cdf"])?,
    }
    for i in 0..curves.grid.len() {
        let mut row = vec![
            curves.grid[i].to_string(),
            curves.pdf[i].to_string(),
            curves.cdf[i].to_string(),
        ];
        if let Some((lo, hi)) = &curves.band {
            row.push(lo[i].to_string());
            row.push(hi[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
