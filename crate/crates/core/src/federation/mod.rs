//! The sequential federation protocol: site ordering, handoff artifacts and
//! the pipeline driver.
//!
//! A handoff artifact is the only object that leaves a site. It carries
//! either per-parameter summaries (TN scheme) or a multivariate normal
//! approximation of the joint posterior together with those summaries
//! (MvN scheme).

mod pipeline;
mod report;
mod source;

pub use pipeline::{
    build_model, fit_direct, fit_gated, run_pipeline, Gate, GatedFit, Ordering, PipelineConfig,
    PipelineOutcome, RunManifest, RunStatus, SiteRecord, SiteStatus, MANIFEST_FILE,
};
pub use report::{read_report, summary_table, write_report, write_summary_csv, FitReport};
pub use source::{
    ChunkedIntervalSource, DirSource, DoublyFileSource, MemorySource, SiteInfo, SiteSource,
};

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataio::SiteDataset;
use crate::distributions::{fit_mvn_columns, MvnApprox};
use crate::error::{Error, Result};
use crate::models::ModelFamily;
use crate::numfmt;
use crate::sampler::{ParameterSummary, PosteriorDraws};

pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "TN")]
    Tn,
    #[serde(rename = "MVN")]
    Mvn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MvnPayload {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub chol_lower_row_major: Vec<f64>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Payload {
    pub summaries: Vec<ParameterSummary>,
    pub mvn: Option<MvnPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandoffArtifact {
    pub schema_version: String,
    pub method: Method,
    pub model_family: ModelFamily,
    /// 1-based position of the producing site in the visiting order.
    pub site_order_index: usize,
    /// Pooled posterior draws the payload was computed from.
    pub n_draws: usize,
    pub payload: Payload,
}

impl HandoffArtifact {
    pub fn to_json(&self) -> Result<String> {
        Ok(numfmt::to_json_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Schema(format!("handoff artifact: {e}")))
    }

    pub fn mvn_approx(&self) -> Result<MvnApprox> {
        let m = self
            .payload
            .mvn
            .as_ref()
            .ok_or_else(|| Error::Schema("handoff carries no MvN payload".into()))?;
        if m.names.len() != m.dim
            || m.mean.len() != m.dim
            || m.chol_lower_row_major.len() != m.dim * m.dim
        {
            return Err(Error::Schema(format!(
                "MvN payload is inconsistent with dim {}",
                m.dim
            )));
        }
        let chol = DMatrix::from_row_slice(m.dim, m.dim, &m.chol_lower_row_major);
        MvnApprox::from_parts(m.names.clone(), m.mean.clone(), chol, self.n_draws)
    }

    /// Checks that this artifact is the one site `site_order_index + 1`
    /// expects under the given scheme.
    pub fn check_origin(
        &self,
        method: Method,
        family: ModelFamily,
        site_order_index: usize,
    ) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        if self.method != method || self.model_family != family {
            return Err(Error::Schema(format!(
                "artifact is {:?}/{:?}, expected {:?}/{:?}",
                self.method, self.model_family, method, family
            )));
        }
        if self.site_order_index != site_order_index {
            return Err(Error::Schema(format!(
                "artifact comes from site {} but site {} was expected",
                self.site_order_index, site_order_index
            )));
        }
        Ok(())
    }
}

/// Labels a handoff of this scheme must carry, in payload order.
pub fn handoff_labels(method: Method, family: ModelFamily) -> Vec<String> {
    match method {
        Method::Tn => family.handoff_labels(),
        Method::Mvn => family.mvn_labels(),
    }
}

fn pick_rows(summaries: &[ParameterSummary], labels: &[String]) -> Result<Vec<ParameterSummary>> {
    labels
        .iter()
        .map(|l| {
            let mut hits = summaries.iter().filter(|s| &s.label() == l);
            match (hits.next(), hits.next()) {
                (Some(row), None) => Ok(row.clone()),
                (None, _) => Err(Error::Schema(format!("summary is missing parameter `{l}`"))),
                (Some(_), Some(_)) => Err(Error::Schema(format!("summary lists `{l}` twice"))),
            }
        })
        .collect()
}

/// TN handoff: the family's handoff rows with their diagnostics.
pub fn build_tn_handoff(
    summaries: &[ParameterSummary],
    family: ModelFamily,
    site_order_index: usize,
    n_draws: usize,
) -> Result<HandoffArtifact> {
    Ok(HandoffArtifact {
        schema_version: SCHEMA_VERSION.into(),
        method: Method::Tn,
        model_family: family,
        site_order_index,
        n_draws,
        payload: Payload {
            summaries: pick_rows(summaries, &family.handoff_labels())?,
            mvn: None,
        },
    })
}

/// MvN handoff over `names`, plus the summaries of those parameters.
///
/// For the interval-censored Gamma family the approximation is fitted on
/// standardized coordinates `(x − mean) / sd`, so that the receiving site's
/// rescaling `π·sd + mean` maps it back onto the posterior it came from.
pub fn build_mvn_handoff(
    draws: &PosteriorDraws,
    summaries: &[ParameterSummary],
    names: &[String],
    family: ModelFamily,
    site_order_index: usize,
) -> Result<HandoffArtifact> {
    let rows = pick_rows(summaries, names)?;
    let mut columns = Vec::with_capacity(names.len());
    for (name, row) in names.iter().zip(&rows) {
        let p = draws
            .index_of(name)
            .ok_or_else(|| Error::Schema(format!("parameter `{name}` not present in draws")))?;
        let mut col = draws.pooled(p);
        if family == ModelFamily::GammaIc {
            if !(row.sd > 0.0) {
                return Err(Error::Schema(format!("`{name}` has zero posterior sd")));
            }
            for v in col.iter_mut() {
                *v = (*v - row.mean) / row.sd;
            }
        }
        columns.push(col);
    }
    let approx = fit_mvn_columns(names.to_vec(), &columns)?;
    let dim = approx.dim();
    let mut chol = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            chol.push(approx.chol_lower[(i, j)]);
        }
    }
    Ok(HandoffArtifact {
        schema_version: SCHEMA_VERSION.into(),
        method: Method::Mvn,
        model_family: family,
        site_order_index,
        n_draws: approx.n_source_draws,
        payload: Payload {
            summaries: rows,
            mvn: Some(MvnPayload {
                names: approx.names,
                mean: approx.mean,
                chol_lower_row_major: chol,
                dim,
            }),
        },
    })
}

/// Outcome of [`validate_artifact`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn fail(&mut self, msg: impl Into<String>) {
        self.failures.push(msg.into());
    }
}

const TOP_FIELDS: [&str; 6] = [
    "schema_version",
    "method",
    "model_family",
    "site_order_index",
    "n_draws",
    "payload",
];
const SUMMARY_FIELDS: [&str; 9] = [
    "name", "group", "mean", "sd", "hdi_lo", "hdi_hi", "ess_bulk", "ess_tail", "rhat",
];
const MVN_FIELDS: [&str; 4] = ["names", "mean", "chol_lower_row_major", "dim"];

fn check_fields(
    obj: &serde_json::Map<String, Value>,
    allowed: &[&str],
    path: &str,
    report: &mut ValidationReport,
) {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            report.fail(format!("unexpected field {path}.{key}"));
        }
    }
    for key in allowed {
        if !obj.contains_key(*key) {
            report.fail(format!("missing field {path}.{key}"));
        }
    }
}

/// Collects every number below `v` with its path.
fn numbers(v: &Value, path: String, out: &mut Vec<(String, f64)>) {
    match v {
        Value::Number(n) => {
            if let Some(x) = n.as_f64() {
                out.push((path, x));
            }
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                numbers(item, format!("{path}[{i}]"), out);
            }
        }
        Value::Object(map) => {
            for (k, item) in map {
                numbers(item, format!("{path}.{k}"), out);
            }
        }
        _ => {}
    }
}

/// Structural integers and the fixed zeros above the Cholesky diagonal.
fn is_structural(path: &str, dim: usize) -> bool {
    if path == "$.site_order_index" || path == "$.n_draws" || path == "$.payload.mvn.dim" {
        return true;
    }
    if path.starts_with("$.payload.summaries[") && path.ends_with(".group") {
        return true;
    }
    if let Some(idx) = path.strip_prefix("$.payload.mvn.chol_lower_row_major[") {
        if let Ok(i) = idx.trim_end_matches(']').parse::<usize>() {
            return dim > 0 && i % dim > i / dim;
        }
    }
    false
}

/// Privacy and schema audit of a serialized artifact against the local
/// data it was produced from.
///
/// Fails on missing or unexpected fields (reported by path), on a payload
/// whose shape differs from the fixed shape of its scheme, and on any
/// payload number equal to a raw observation value.
pub fn validate_artifact(json: &str, data: &SiteDataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let value: Value = match serde_json::from_str(json) {
        Ok(v) => v,
        Err(e) => {
            report.fail(format!("not valid JSON: {e}"));
            return report;
        }
    };
    let Some(top) = value.as_object() else {
        report.fail("artifact is not a JSON object");
        return report;
    };
    check_fields(top, &TOP_FIELDS, "$", &mut report);

    let method: Option<Method> = top
        .get("method")
        .and_then(|m| serde_json::from_value(m.clone()).ok());
    let family: Option<ModelFamily> = top
        .get("model_family")
        .and_then(|m| serde_json::from_value(m.clone()).ok());
    if method.is_none() {
        report.fail("$.method is not TN or MVN");
    }
    if family.is_none() {
        report.fail("$.model_family is not NB, GAMMA_IC or COVID_DC");
    }
    let mut dim = 0;
    if let Some(payload) = top.get("payload").and_then(Value::as_object) {
        check_fields(payload, &["summaries", "mvn"], "$.payload", &mut report);
        let summaries = payload.get("summaries").and_then(Value::as_array);
        let mut labels = Vec::new();
        for (i, row) in summaries.into_iter().flatten().enumerate() {
            match row.as_object() {
                Some(obj) => {
                    check_fields(
                        obj,
                        &SUMMARY_FIELDS,
                        &format!("$.payload.summaries[{i}]"),
                        &mut report,
                    );
                    let name = obj.get("name").and_then(Value::as_str).unwrap_or("");
                    match obj.get("group").and_then(Value::as_u64) {
                        Some(g) => labels.push(format!("{name}_g{g}")),
                        None => labels.push(name.to_string()),
                    }
                }
                None => report.fail(format!("$.payload.summaries[{i}] is not an object")),
            }
        }
        let mvn = payload.get("mvn").filter(|m| !m.is_null());
        if let (Some(method), Some(family)) = (method, family) {
            let expected = handoff_labels(method, family);
            let got: HashSet<&String> = labels.iter().collect();
            if labels.len() != expected.len() || expected.iter().any(|l| !got.contains(l)) {
                report.fail(format!(
                    "$.payload.summaries holds {:?}, the scheme requires exactly {:?}",
                    labels, expected
                ));
            }
            match (method, mvn) {
                (Method::Tn, Some(_)) => report.fail("$.payload.mvn must be null for TN"),
                (Method::Mvn, None) => report.fail("$.payload.mvn is missing"),
                (Method::Mvn, Some(m)) => {
                    dim = expected.len();
                    check_mvn_shape(m, &expected, &mut report);
                }
                (Method::Tn, None) => {}
            }
        }
    } else if top.contains_key("payload") {
        report.fail("$.payload is not an object");
    }

    let raw: HashSet<u64> = data.raw_values().iter().map(|v| v.to_bits()).collect();
    let mut nums = Vec::new();
    numbers(&value, "$".into(), &mut nums);
    for (path, x) in nums {
        let hit = raw.contains(&x.to_bits()) || (x == 0.0 && raw.contains(&(-0.0f64).to_bits()));
        if !is_structural(&path, dim) && hit {
            report.fail(format!("{path} equals a raw observation value ({x})"));
        }
    }
    report
}

fn check_mvn_shape(m: &Value, expected: &[String], report: &mut ValidationReport) {
    let Some(obj) = m.as_object() else {
        report.fail("$.payload.mvn is not an object");
        return;
    };
    check_fields(obj, &MVN_FIELDS, "$.payload.mvn", report);
    let k = expected.len();
    let len = |key: &str| obj.get(key).and_then(Value::as_array).map(Vec::len);
    if obj.get("dim").and_then(Value::as_u64) != Some(k as u64) {
        report.fail(format!("$.payload.mvn.dim must be {k}"));
    }
    if len("names") != Some(k) || len("mean") != Some(k) {
        report.fail(format!("$.payload.mvn names/mean must have {k} entries"));
    }
    if len("chol_lower_row_major") != Some(k * k) {
        report.fail(format!(
            "$.payload.mvn.chol_lower_row_major must have {} entries",
            k * k
        ));
    }
    let names: HashSet<&str> = obj
        .get("names")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_str).collect())
        .unwrap_or_default();
    if expected.iter().any(|e| !names.contains(e.as_str())) {
        report.fail(format!("$.payload.mvn.names must be {expected:?}"));
    }
}

/// Descending size, ties by name.
pub fn order_sites(sites: &[SiteInfo]) -> Result<Vec<SiteInfo>> {
    if sites.is_empty() {
        return Err(Error::Config("no sites to order".into()));
    }
    let mut v = sites.to_vec();
    v.sort_by(|a, b| b.n.cmp(&a.n).then_with(|| a.name.cmp(&b.name)));
    Ok(v)
}
