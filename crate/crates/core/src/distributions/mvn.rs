//! Multivariate-normal approximation of a joint posterior, used as the
//! prior of the next site through `mean + L · z` with `z ~ N(0, I)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::sampler::PosteriorDraws;

/// Jitter multipliers (relative to the mean diagonal magnitude) tried in turn.
const JITTER_STEPS: [f64; 2] = [1e-9, 1e-6];

/// Minimum number of pooled draws accepted by [`fit_mvn`].
pub const MIN_SOURCE_DRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct MvnApprox {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    /// Lower-triangular Cholesky factor of the covariance.
    pub chol_lower: DMatrix<f64>,
    pub n_source_draws: usize,
}

impl MvnApprox {
    /// Builds an approximation from explicit parts, checking the factor's shape
    /// and triangularity.
    pub fn from_parts(
        names: Vec<String>,
        mean: Vec<f64>,
        chol_lower: DMatrix<f64>,
        n_source_draws: usize,
    ) -> Result<Self> {
        let k = names.len();
        if mean.len() != k {
            return Err(Error::Shape {
                expected: k,
                got: mean.len(),
            });
        }
        if chol_lower.nrows() != k || chol_lower.ncols() != k {
            return Err(Error::Shape {
                expected: k * k,
                got: chol_lower.len(),
            });
        }
        for i in 0..k {
            if !(chol_lower[(i, i)] > 0.0) {
                return Err(Error::Schema(format!(
                    "Cholesky diagonal entry {i} must be positive, got {}",
                    chol_lower[(i, i)]
                )));
            }
            for j in (i + 1)..k {
                if chol_lower[(i, j)] != 0.0 {
                    return Err(Error::Schema(format!(
                        "Cholesky factor is not lower-triangular at ({i}, {j})"
                    )));
                }
            }
        }
        if mean.iter().chain(chol_lower.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Schema(
                "non-finite entry in normal approximation".into(),
            ));
        }
        Ok(Self {
            names,
            mean,
            chol_lower,
            n_source_draws,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `L · Lᵀ`
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol_lower * self.chol_lower.transpose()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// `mean + L · z` into `out`, without shape checks.
    pub(crate) fn transform_into(&self, z: &[f64], out: &mut [f64]) {
        let k = self.dim();
        for i in 0..k {
            let mut acc = self.mean[i];
            for j in 0..=i {
                acc += self.chol_lower[(i, j)] * z[j];
            }
            out[i] = acc;
        }
    }

    /// `L⁻¹ · (x − mean)` into `out`, the inverse of `transform_into`.
    pub(crate) fn standardize_into(&self, x: &[f64], out: &mut [f64]) {
        let k = self.dim();
        for i in 0..k {
            let mut acc = x[i] - self.mean[i];
            for j in 0..i {
                acc -= self.chol_lower[(i, j)] * out[j];
            }
            out[i] = acc / self.chol_lower[(i, i)];
        }
    }
}

/// `mean + L · z`.
pub fn mvn_transform(approx: &MvnApprox, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != approx.dim() {
        return Err(Error::Shape {
            expected: approx.dim(),
            got: z.len(),
        });
    }
    let mut out = vec![0.0; z.len()];
    approx.transform_into(z, &mut out);
    Ok(out)
}

/// Fits the approximation to the pooled draws of `names`.
pub fn fit_mvn(draws: &PosteriorDraws, names: &[&str]) -> Result<MvnApprox> {
    let columns = names
        .iter()
        .map(|n| {
            draws
                .index_of(n)
                .map(|p| draws.pooled(p))
                .ok_or_else(|| Error::Schema(format!("parameter {n} not present in draws")))
        })
        .collect::<Result<Vec<_>>>()?;
    let names = names.iter().map(|s| s.to_string()).collect();
    fit_mvn_columns(names, &columns)
}

/// Fits the approximation to equally long columns of pooled draws.
pub fn fit_mvn_columns(names: Vec<String>, columns: &[Vec<f64>]) -> Result<MvnApprox> {
    let k = columns.len();
    if k == 0 || names.len() != k {
        return Err(Error::Shape {
            expected: names.len().max(1),
            got: k,
        });
    }
    let n = columns[0].len();
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::Data("draw columns differ in length".into()));
    }
    if n < MIN_SOURCE_DRAWS {
        return Err(Error::Data(format!(
            "at least {MIN_SOURCE_DRAWS} pooled draws are needed, got {n}"
        )));
    }

    let mean: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().sum::<f64>() / n as f64)
        .collect();
    let mut cov = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let s: f64 = columns[i]
                .iter()
                .zip(&columns[j])
                .map(|(a, b)| (a - mean[i]) * (b - mean[j]))
                .sum();
            let v = s / (n as f64 - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let scale = cov.diagonal().iter().map(|v| v.abs()).sum::<f64>() / k as f64;
    for jitter in JITTER_STEPS {
        let mut regularized = cov.clone();
        for i in 0..k {
            regularized[(i, i)] += jitter * scale;
        }
        if let Some(chol) = regularized.cholesky() {
            let l = chol.l();
            if (0..k).all(|i| l[(i, i)] > 0.0 && l[(i, i)].is_finite()) {
                return MvnApprox::from_parts(names, mean, l, n);
            }
        }
    }
    let eigenvalue = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Err(Error::Approximation { eigenvalue })
}

/// Sample covariance of row vectors, used by tests and diagnostics.
pub fn sample_covariance(rows: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let k = rows[0].len();
    let n = rows.len() as f64;
    let mean = rows.iter().fold(DVector::zeros(k), |acc, r| acc + r) / n;
    let mut cov = DMatrix::zeros(k, k);
    for r in rows {
        let d = r - &mean;
        cov += &d * d.transpose();
    }
    (mean, cov / (n - 1.0))
}
