use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Method;
use crate::error::{Error, Result};
use crate::models::{Fit, ModelFamily};
use crate::numfmt;
use crate::sampler::ParameterSummary;

/// Draws kept per reported quantity in a report.
pub const REPORT_DRAWS: usize = 1000;

/// Local result of a fit: the full summary table plus a thinned sample of
/// the reported quantities (for curves and comparisons). Never handed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// `direct` or `pipeline`.
    pub kind: String,
    pub model_family: ModelFamily,
    pub method: Option<Method>,
    pub site: Option<String>,
    pub site_order_index: Option<usize>,
    pub n_sites: usize,
    pub summaries: Vec<ParameterSummary>,
    pub draws: BTreeMap<String, Vec<f64>>,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn from_fit(kind: &str, family: ModelFamily, method: Option<Method>, fit: &Fit) -> Self {
        let mut draws = BTreeMap::new();
        for (p, name) in fit.draws.names.iter().enumerate() {
            if name.contains('[') {
                continue;
            }
            let pooled = fit.draws.pooled(p);
            let step = pooled.len().div_ceil(REPORT_DRAWS).max(1);
            draws.insert(name.clone(), pooled.into_iter().step_by(step).collect());
        }
        Self {
            kind: kind.into(),
            model_family: family,
            method,
            site: None,
            site_order_index: None,
            n_sites: 1,
            summaries: fit.summaries.clone(),
            draws,
            warnings: fit.raw.warnings.clone(),
        }
    }

    pub fn summary(&self, label: &str) -> Result<&ParameterSummary> {
        self.summaries
            .iter()
            .find(|s| s.label() == label)
            .ok_or_else(|| Error::Data(format!("report has no parameter `{label}`")))
    }
}

pub fn write_report(path: &Path, report: &FitReport) -> Result<()> {
    std::fs::write(path, numfmt::to_json_string(report)?)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<FitReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

const HEADER: [&str; 8] = [
    "parameter",
    "mean",
    "sd",
    "hdi_5%",
    "hdi_95%",
    "ess_bulk",
    "ess_tail",
    "r_hat",
];

fn row_values(s: &ParameterSummary) -> [f64; 7] {
    [
        s.mean, s.sd, s.hdi_lo, s.hdi_hi, s.ess_bulk, s.ess_tail, s.rhat,
    ]
}

pub fn write_summary_csv(path: &Path, summaries: &[ParameterSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for s in summaries {
        let mut rec = vec![s.label()];
        rec.extend(row_values(s).iter().map(|v| v.to_string()));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width text table of summaries.
pub fn summary_table(summaries: &[ParameterSummary]) -> String {
    let width = summaries
        .iter()
        .map(|s| s.label().len())
        .max()
        .unwrap_or(0)
        .max(HEADER[0].len());
    let mut out = format!("{:<width$}", HEADER[0]);
    for h in &HEADER[1..] {
        let _ = write!(out, " {h:>9}");
    }
    out.push('\n');
    for s in summaries {
        let _ = write!(out, "{:<width$}", s.label());
        let v = row_values(s);
        for x in &v[..4] {
            let _ = write!(out, " {x:>9.2}");
        }
        for x in &v[4..6] {
            let _ = write!(out, " {x:>9.0}");
        }
        let _ = write!(out, " {:>9.3}", v[6]);
        out.push('\n');
    }
    out
}
