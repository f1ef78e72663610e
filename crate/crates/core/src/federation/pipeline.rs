use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::report::{write_report, write_summary_csv, FitReport};
use super::source::{SiteInfo, SiteSource};
use super::{
    build_mvn_handoff, build_tn_handoff, order_sites, validate_artifact, HandoffArtifact, Method,
};
use crate::dataio::{pool, SiteDataset};
use crate::error::{Error, Result};
use crate::models::{self, fit, Fit, Model, Model1, Model2, Model3, ModelFamily, SigmaReading};
use crate::numfmt;
use crate::sampler::{ParameterSummary, SamplerConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";

/// Per-site convergence requirement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub rhat_max: f64,
    pub ess_bulk_min: f64,
    /// Warmup and draw multiplier of the single retry.
    pub retry_factor: usize,
}

impl Default for Gate {
    fn default() -> Self {
        Self {
            rhat_max: 1.01,
            ess_bulk_min: 400.0,
            retry_factor: 4,
        }
    }
}

impl Gate {
    /// `Err` lists every parameter that misses the gate.
    pub fn check(&self, summaries: &[ParameterSummary]) -> std::result::Result<(), String> {
        let bad: Vec<String> = summaries
            .iter()
            .filter(|s| !(s.rhat < self.rhat_max) || !(s.ess_bulk > self.ess_bulk_min))
            .map(|s| {
                format!(
                    "{} (R-hat {:.4}, ESS bulk {:.0})",
                    s.label(),
                    s.rhat,
                    s.ess_bulk
                )
            })
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad.join(", "))
        }
    }
}

#[derive(Debug, Clone)]
pub struct GatedFit {
    pub fit: Fit,
    pub attempts: usize,
}

/// Fits `model`, retrying once with `retry_factor` times the warmup and draws
/// when the gate is missed.
pub fn fit_gated(
    model: &dyn Model,
    sampler: &SamplerConfig,
    gate: &Gate,
    site: &str,
) -> Result<GatedFit> {
    let first = fit(model, sampler)?;
    let Err(detail) = gate.check(&first.summaries) else {
        return Ok(GatedFit {
            fit: first,
            attempts: 1,
        });
    };
    let factor = gate.retry_factor.max(1);
    let retry_cfg = sampler
        .clone()
        .with_draws(sampler.n_tune * factor, sampler.n_draws * factor);
    let second = fit(model, &retry_cfg)?;
    match gate.check(&second.summaries) {
        Ok(()) => Ok(GatedFit {
            fit: second,
            attempts: 2,
        }),
        Err(retry_detail) => Err(Error::Convergence {
            site: site.to_string(),
            detail: format!(
                "first attempt: {detail}; retry with {} warmup and {} draws: {retry_detail}",
                retry_cfg.n_tune, retry_cfg.n_draws
            ),
        }),
    }
}

/// Model for one site: the base model at the first site, the handoff model
/// afterwards.
pub fn build_model(
    family: ModelFamily,
    method: Method,
    previous: Option<&HandoffArtifact>,
    data: &SiteDataset,
    reading: SigmaReading,
) -> Result<Box<dyn Model>> {
    let records = &data.records;
    Ok(match (family, previous) {
        (ModelFamily::Nb, None) => Box::new(Model1::new(&[data.counts()?])?),
        (ModelFamily::GammaIc, None) => Box::new(models::model4(records)?),
        (ModelFamily::CovidDc, None) => Box::new(models::model7(records)?),
        (family, Some(art)) => {
            art.check_origin(method, family, art.site_order_index)?;
            let summaries = &art.payload.summaries;
            match (family, method) {
                (ModelFamily::Nb, Method::Tn) => Box::new(Model2::new(&data.counts()?, summaries)?),
                (ModelFamily::Nb, Method::Mvn) => {
                    Box::new(Model3::new(&data.counts()?, &art.mvn_approx()?)?)
                }
                (ModelFamily::GammaIc, Method::Tn) => Box::new(models::model5(records, summaries)?),
                (ModelFamily::GammaIc, Method::Mvn) => Box::new(models::model6(
                    records,
                    &art.mvn_approx()?,
                    summaries,
                    reading,
                )?),
                (ModelFamily::CovidDc, Method::Tn) => {
                    Box::new(models::model7_tn(records, summaries)?)
                }
                (ModelFamily::CovidDc, Method::Mvn) => {
                    Box::new(models::model7_mvn(records, &art.mvn_approx()?)?)
                }
            }
        }
    })
}

/// Base model on all sites pooled (the non-federated reference). The NB
/// family keeps one site effect per site.
pub fn fit_direct(source: &dyn SiteSource, family: ModelFamily) -> Result<Box<dyn Model>> {
    let infos = source.sites()?;
    let sites: Vec<SiteDataset> = infos
        .iter()
        .map(|i| source.load(&i.name))
        .collect::<Result<_>>()?;
    Ok(match family {
        ModelFamily::Nb => {
            let counts: Vec<Vec<u64>> = sites.iter().map(|s| s.counts()).collect::<Result<_>>()?;
            Box::new(Model1::new(&counts)?)
        }
        ModelFamily::GammaIc => Box::new(models::model4(&pool(&sites))?),
        ModelFamily::CovidDc => Box::new(models::model7(&pool(&sites))?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    DescendingSize,
    Explicit(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub family: ModelFamily,
    pub method: Method,
    pub ordering: Ordering,
    pub sampler: SamplerConfig,
    pub gate: Gate,
    pub sigma_reading: SigmaReading,
    pub out_dir: PathBuf,
    /// Continue an aborted run in `out_dir` from its first unfinished site.
    pub resume: bool,
}

impl PipelineConfig {
    pub fn new(family: ModelFamily, method: Method, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            family,
            method,
            ordering: Ordering::DescendingSize,
            sampler: SamplerConfig::default(),
            gate: Gate::default(),
            sigma_reading: SigmaReading::default(),
            out_dir: out_dir.into(),
            resume: false,
        }
    }
}

/// Everything that determines a run's outputs.
#[derive(Serialize)]
struct HashedConfig<'a> {
    family: ModelFamily,
    method: Method,
    ordering: &'a Ordering,
    n_chains: usize,
    n_tune: usize,
    n_draws: usize,
    seed: u64,
    target_accept: Option<f64>,
    gate: Gate,
    sigma_reading: SigmaReading,
    sites: Vec<(&'a str, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub order_index: usize,
    pub name: String,
    pub n: usize,
    pub status: SiteStatus,
    pub attempts: usize,
    pub artifact: Option<String>,
    pub report: Option<String>,
    pub detail: Option<String>,
}

/// Record of one CLI run; for pipelines it is enough to resume at the
/// failed site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub status: RunStatus,
    pub sites: Vec<SiteRecord>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// SHA-256 of the JSON form of `value`, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: serde_json::Value,
        seed: u64,
        inputs: Vec<String>,
    ) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            config_hash: config_hash(&config)?,
            seed,
            config,
            inputs,
            outputs: Vec::new(),
            status: RunStatus::Running,
            sites: Vec::new(),
            started_unix: unix_now(),
            finished_unix: None,
        })
    }

    /// Writes to a temporary file and renames it over `path`.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(numfmt::to_json_string(self)?.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn finish(&mut self, status: RunStatus) {
        self.status = status;
        self.finished_unix = Some(unix_now());
    }
}

/// Single-flight guard on an output directory.
struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    /// Artifact files in visiting order.
    pub artifacts: Vec<PathBuf>,
    /// Full summary of every site in visiting order.
    pub site_summaries: Vec<Vec<ParameterSummary>>,
    pub final_report: FitReport,
    pub manifest: RunManifest,
}

fn artifact_file(idx: usize) -> String {
    format!("handoff_{idx:02}.json")
}

fn report_file(idx: usize) -> String {
    format!("site_{idx:02}.json")
}

fn resolve_order(infos: &[SiteInfo], ordering: &Ordering) -> Result<Vec<SiteInfo>> {
    match ordering {
        Ordering::DescendingSize => order_sites(infos),
        Ordering::Explicit(names) => {
            let mut out = Vec::with_capacity(names.len());
            for name in names {
                let info = infos.iter().find(|i| &i.name == name).ok_or_else(|| {
                    Error::Config(format!("ordering names unknown site `{name}`"))
                })?;
                if out.iter().any(|o: &SiteInfo| &o.name == name) {
                    return Err(Error::Config(format!("ordering lists `{name}` twice")));
                }
                out.push(info.clone());
            }
            if out.len() != infos.len() || out.is_empty() {
                return Err(Error::Config(
                    "ordering must cover every site exactly once".into(),
                ));
            }
            Ok(out)
        }
    }
}

/// Runs the sequential protocol over every site of `source`.
///
/// Site `s` sees only its own data and the artifact file written by site
/// `s − 1`. A site that misses the convergence gate twice aborts the run;
/// the manifest then records the failed site and `resume` picks up there.
pub fn run_pipeline(source: &dyn SiteSource, cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.sampler.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let _lock = LockGuard::acquire(&cfg.out_dir)?;
    let ordered = resolve_order(&source.sites()?, &cfg.ordering)?;

    let hashed = HashedConfig {
        family: cfg.family,
        method: cfg.method,
        ordering: &cfg.ordering,
        n_chains: cfg.sampler.n_chains,
        n_tune: cfg.sampler.n_tune,
        n_draws: cfg.sampler.n_draws,
        seed: cfg.sampler.seed,
        target_accept: cfg.sampler.target_accept,
        gate: cfg.gate,
        sigma_reading: cfg.sigma_reading,
        sites: ordered.iter().map(|s| (s.name.as_str(), s.n)).collect(),
    };
    let config = serde_json::to_value(&hashed)?;
    let manifest_path = cfg.out_dir.join(MANIFEST_FILE);
    let mut manifest = if cfg.resume && manifest_path.exists() {
        let m = RunManifest::read(&manifest_path)?;
        if m.config_hash != config_hash(&config)? {
            return Err(Error::Config(
                "cannot resume: configuration differs from the recorded run".into(),
            ));
        }
        m
    } else {
        let mut m = RunManifest::new(
            "pipeline",
            config,
            cfg.sampler.seed,
            vec![source.describe()],
        )?;
        m.sites = ordered
            .iter()
            .enumerate()
            .map(|(s, info)| SiteRecord {
                order_index: s + 1,
                name: info.name.clone(),
                n: info.n,
                status: SiteStatus::Pending,
                attempts: 0,
                artifact: None,
                report: None,
                detail: None,
            })
            .collect();
        m
    };
    manifest.status = RunStatus::Running;
    manifest.finished_unix = None;
    manifest.write_atomic(&manifest_path)?;

    let mut previous: Option<HandoffArtifact> = None;
    let mut artifacts = Vec::new();
    let mut site_summaries = Vec::new();
    let mut last_report: Option<FitReport> = None;

    for (s, info) in ordered.iter().enumerate() {
        let idx = s + 1;
        let art_path = cfg.out_dir.join(artifact_file(idx));
        let rep_path = cfg.out_dir.join(report_file(idx));

        let done =
            manifest.sites[s].status == SiteStatus::Done && art_path.exists() && rep_path.exists();
        if !done {
            let result = source.load(&info.name).and_then(|data| {
                let r = run_site(cfg, previous.as_ref(), &data, idx, &art_path, &rep_path);
                drop(data);
                source.release(&info.name);
                r
            });
            let rec = &mut manifest.sites[s];
            match result {
                Ok(attempts) => {
                    rec.status = SiteStatus::Done;
                    rec.attempts = attempts;
                    rec.artifact = Some(artifact_file(idx));
                    rec.report = Some(report_file(idx));
                    rec.detail = None;
                    manifest.write_atomic(&manifest_path)?;
                }
                Err(e) => {
                    rec.status = SiteStatus::Failed;
                    rec.attempts = if matches!(e, Error::Convergence { .. }) {
                        2
                    } else {
                        rec.attempts
                    };
                    rec.detail = Some(e.to_string());
                    manifest.finish(RunStatus::Aborted);
                    manifest.write_atomic(&manifest_path)?;
                    return Err(e);
                }
            }
        }
        // the next site reads the handoff back from its file
        let artifact = HandoffArtifact::from_json(&fs::read_to_string(&art_path)?)?;
        artifact.check_origin(cfg.method, cfg.family, idx)?;
        let report = super::read_report(&rep_path)?;
        site_summaries.push(report.summaries.clone());
        last_report = Some(report);
        artifacts.push(art_path);
        previous = Some(artifact);
    }

    let mut final_report = last_report.ok_or_else(|| Error::Config("no sites".into()))?;
    final_report.n_sites = ordered.len();
    let final_json = cfg.out_dir.join("final.json");
    let final_csv = cfg.out_dir.join("final_summary.csv");
    write_report(&final_json, &final_report)?;
    write_summary_csv(&final_csv, &final_report.summaries)?;

    manifest.outputs = artifacts
        .iter()
        .chain([&final_json, &final_csv])
        .map(|p| p.display().to_string())
        .collect();
    manifest.finish(RunStatus::Completed);
    manifest.write_atomic(&manifest_path)?;
    Ok(PipelineOutcome {
        artifacts,
        site_summaries,
        final_report,
        manifest,
    })
}

/// Fits one site and writes its artifact and local report. Returns the
/// number of sampling attempts.
fn run_site(
    cfg: &PipelineConfig,
    previous: Option<&HandoffArtifact>,
    data: &SiteDataset,
    idx: usize,
    art_path: &Path,
    rep_path: &Path,
) -> Result<usize> {
    if let Some(prev) = previous {
        prev.check_origin(cfg.method, cfg.family, idx - 1)?;
    }
    let model = build_model(cfg.family, cfg.method, previous, data, cfg.sigma_reading)?;
    let sampler = cfg.sampler.clone().with_stream(idx as u64);
    let gated = fit_gated(model.as_ref(), &sampler, &cfg.gate, &data.site)?;
    let fit = &gated.fit;
    let artifact = match cfg.method {
        Method::Tn => build_tn_handoff(
            &fit.summaries,
            cfg.family,
            idx,
            fit.draws.n_draws * fit.draws.n_chains(),
        )?,
        Method::Mvn => build_mvn_handoff(
            &fit.draws,
            &fit.summaries,
            &cfg.family.mvn_labels(),
            cfg.family,
            idx,
        )?,
    };
    let json = artifact.to_json()?;
    let audit = validate_artifact(&json, data);
    if !audit.passed() {
        return Err(Error::Schema(format!(
            "artifact of site {idx} failed validation: {:?}",
            audit.failures
        )));
    }
    fs::write(art_path, json)?;

    let mut report = FitReport::from_fit("pipeline", cfg.family, Some(cfg.method), fit);
    report.site = Some(data.site.clone());
    report.site_order_index = Some(idx);
    write_report(rep_path, &report)?;
    Ok(gated.attempts)
}
