use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use fedpost::dataio::{
    self, simulate_doubly_gamma, simulate_interval_gamma, simulate_nb, site_name,
    ObservationRecord, SiteDataset,
};
use fedpost::distributions::gamma_convert;
use fedpost::federation::{
    fit_direct, fit_gated, read_report, run_pipeline, summary_table, write_report,
    write_summary_csv, ChunkedIntervalSource, DirSource, DoublyFileSource, FitReport, Gate,
    MemorySource, Method, Ordering, PipelineConfig, RunManifest, RunStatus, SiteSource, SiteStatus,
    MANIFEST_FILE,
};
use fedpost::metrics::{
    bhattacharyya_normal, hellinger_sq_normal, posterior_curves, write_curves_csv, CurveFamily,
    GridSpec, NormalMoments,
};
use fedpost::models::{prior_predictive_gamma, ModelFamily, SigmaReading};
use fedpost::numfmt;
use fedpost::sampler::{Execution, SamplerConfig};
use fedpost::{Error, Result};

const EXIT_VALIDATION: u8 = 1;
const EXIT_CONVERGENCE: u8 = 2;
const EXIT_USAGE: u8 = 64;

// stdout writes that end the process quietly when the reader goes away
fn emit(args: std::fmt::Arguments<'_>) {
    if let Err(e) = io::stdout().lock().write_fmt(args) {
        if e.kind() == io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: {e}");
        std::process::exit(EXIT_VALIDATION as i32);
    }
}

macro_rules! out {
    ($($t:tt)*) => { emit(format_args!($($t)*)) };
}

macro_rules! outln {
    () => { emit(format_args!("\n")) };
    ($($t:tt)*) => {{ emit(format_args!($($t)*)); emit(format_args!("\n")) }};
}

/// Sequential federated Bayesian estimation of incubation periods.
#[derive(Parser, Debug)]
#[command(name = "fedpost", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate site datasets.
    Simulate(SimulateArgs),
    /// Fit the base model to all data at once (the direct reference).
    Fit(FitArgs),
    /// Run the sequential site-by-site protocol.
    Pipeline(PipelineArgs),
    /// Compare one parameter between two fit reports.
    Compare(CompareArgs),
    /// Print the summary of a run directory or report file.
    Report(ReportArgs),
    /// Draw from the priors of the base Gamma model.
    PriorPredictive(PriorPredictiveArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModelArg {
    Nb,
    GammaIc,
    Covid,
}

impl From<ModelArg> for ModelFamily {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Nb => ModelFamily::Nb,
            ModelArg::GammaIc => ModelFamily::GammaIc,
            ModelArg::Covid => ModelFamily::CovidDc,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Tn,
    Mvn,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SigmaReadingArg {
    Sigma,
    LiteralMu,
}

#[derive(Args, Debug)]
struct SamplerArgs {
    /// Seed of every random stream in the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    /// Warmup iterations per chain.
    #[arg(long, default_value_t = 4000)]
    tune: usize,
    /// Kept draws per chain.
    #[arg(long, default_value_t = 5000)]
    draws: usize,
    /// Acceptance rate targeted during warmup (default depends on dimension).
    #[arg(long)]
    target_accept: Option<f64>,
    /// Largest R-hat allowed by the convergence gate.
    #[arg(long, default_value_t = 1.01)]
    rhat_max: f64,
    /// Smallest bulk ESS allowed by the convergence gate.
    #[arg(long, default_value_t = 400.0)]
    ess_min: f64,
}

impl SamplerArgs {
    fn sampler(&self) -> Result<SamplerConfig> {
        let cfg = SamplerConfig {
            n_chains: self.chains,
            n_tune: self.tune,
            n_draws: self.draws,
            seed: self.seed,
            target_accept: self.target_accept,
            stream: 0,
            execution: execution_from_env()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn gate(&self) -> Gate {
        Gate {
            rhat_max: self.rhat_max,
            ess_bulk_min: self.ess_min,
            ..Gate::default()
        }
    }

    fn to_json(&self) -> serde_json::Value {
        json!({
            "seed": self.seed,
            "chains": self.chains,
            "tune": self.tune,
            "draws": self.draws,
            "target_accept": self.target_accept,
            "rhat_max": self.rhat_max,
            "ess_min": self.ess_min,
        })
    }
}

fn execution_from_env() -> Result<Execution> {
    match std::env::var("FEDPOST_THREADS") {
        Ok(v) => {
            let threads: usize = v.trim().parse().map_err(|_| {
                Error::Config(format!(
                    "FEDPOST_THREADS must be a positive integer, got `{v}`"
                ))
            })?;
            Ok(match threads {
                0 => return Err(Error::Config("FEDPOST_THREADS must be at least 1".into())),
                1 => Execution::Sequential,
                n => Execution::Parallel { threads: Some(n) },
            })
        }
        Err(_) => Ok(Execution::default()),
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "nb")]
    model: ModelArg,
    /// Total number of observations.
    #[arg(long)]
    n: usize,
    /// Mean (NB counts or Gamma periods; group 1 for gamma-ic).
    #[arg(long)]
    mu: f64,
    /// NB shape.
    #[arg(long)]
    alpha: Option<f64>,
    /// Gamma standard deviation (group 1 for gamma-ic).
    #[arg(long)]
    sigma: Option<f64>,
    /// Group 2 mean for gamma-ic.
    #[arg(long)]
    mu2: Option<f64>,
    /// Group 2 standard deviation for gamma-ic.
    #[arg(long)]
    sigma2: Option<f64>,
    /// Site sizes; must sum to --n.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Directory of per-site CSVs or a single data file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Directory of per-site CSVs, a doubly-censored file (one site per
    /// country) or an interval file cut with --chunks.
    #[arg(long)]
    sites: PathBuf,
    /// Chunk sizes that cut a single interval file into sites.
    #[arg(long, value_delimiter = ',')]
    chunks: Option<Vec<usize>>,
    /// Explicit visiting order of site names (default: descending size).
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<String>>,
    /// How the MvN handoff rescales the sigma coordinate (gamma-ic).
    #[arg(long, value_enum, default_value = "sigma")]
    sigma_reading: SigmaReadingArg,
    /// Continue an aborted run in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// First fit report (final.json).
    #[arg(long)]
    a: PathBuf,
    /// Second fit report.
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value = "mu")]
    param: String,
    /// Upper end of the curve grid (default 40 for NB, 20 otherwise).
    #[arg(long)]
    grid_max: Option<f64>,
    /// Points of the continuous curve grid.
    #[arg(long, default_value_t = 401)]
    grid_points: usize,
    /// Add 90% HDI bands of the CDF.
    #[arg(long)]
    bands: bool,
    #[arg(long, default_value = "compare")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directory or report file.
    path: PathBuf,
}

#[derive(Args, Debug)]
struct PriorPredictiveArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Compare(a) => compare(a),
        Command::Report(a) => report(a),
        Command::PriorPredictive(a) => prior_predictive(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Convergence { .. } => ExitCode::from(EXIT_CONVERGENCE),
                _ => ExitCode::from(EXIT_VALIDATION),
            }
        }
    }
}

fn path_strings(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let total: usize = a.sizes.iter().sum();
    if total != a.n {
        return Err(Error::Config(format!(
            "site sizes sum to {total}, expected --n {}",
            a.n
        )));
    }
    if a.sizes.contains(&0) {
        return Err(Error::Config("site sizes must be positive".into()));
    }
    fs::create_dir_all(&a.out)?;
    let need = |v: Option<f64>, flag: &str| {
        v.ok_or_else(|| Error::Config(format!("--{flag} is required for this model")))
    };
    let mut outputs = Vec::new();
    match a.model {
        ModelArg::Nb => {
            let y = simulate_nb(a.n, a.mu, need(a.alpha, "alpha")?, a.seed)?;
            let mut start = 0;
            for (i, &size) in a.sizes.iter().enumerate() {
                let path = a.out.join(format!("{}.csv", site_name(i)));
                dataio::write_counts_csv(&path, &y[start..start + size])?;
                start += size;
                outputs.push(path);
            }
        }
        ModelArg::GammaIc => {
            let g1 = gamma_convert(a.mu, need(a.sigma, "sigma")?)?;
            let g2 = match (a.mu2, a.sigma2) {
                (Some(m), Some(s)) => Some(gamma_convert(m, s)?),
                (None, None) => None,
                _ => return Err(Error::Config("--mu2 and --sigma2 go together".into())),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            for (i, &size) in a.sizes.iter().enumerate() {
                let records: Vec<ObservationRecord> = match g2 {
                    Some(g2) => {
                        let mut r =
                            simulate_interval_gamma(size.div_ceil(2), 1, g1, 0.3, 2, &mut rng);
                        r.extend(simulate_interval_gamma(size / 2, 2, g2, 0.3, 2, &mut rng));
                        r
                    }
                    None => simulate_interval_gamma(size, 1, g1, 0.3, 2, &mut rng),
                };
                let path = a.out.join(format!("{}.csv", site_name(i)));
                dataio::write_interval_csv(fs::File::create(&path)?, &records)?;
                outputs.push(path);
            }
        }
        ModelArg::Covid => {
            let g = gamma_convert(a.mu, need(a.sigma, "sigma")?)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            for (i, &size) in a.sizes.iter().enumerate() {
                let site = SiteDataset::new(
                    site_name(i),
                    simulate_doubly_gamma(size, g, 0.2, 3, &mut rng),
                );
                let path = a.out.join(format!("{}.csv", site.site));
                dataio::write_doubly_csv(fs::File::create(&path)?, &[site])?;
                outputs.push(path);
            }
        }
    }
    let config = json!({
        "model": format!("{:?}", a.model),
        "n": a.n,
        "mu": a.mu,
        "alpha": a.alpha,
        "sigma": a.sigma,
        "mu2": a.mu2,
        "sigma2": a.sigma2,
        "sizes": a.sizes,
        "seed": a.seed,
    });
    let mut manifest = RunManifest::new("simulate", config, a.seed, Vec::new())?;
    manifest.outputs = path_strings(&outputs);
    manifest.finish(RunStatus::Completed);
    manifest.write_atomic(&a.out.join(MANIFEST_FILE))?;
    outln!("wrote {} site files to {}", outputs.len(), a.out.display());
    Ok(())
}

/// Sites under `path`: a directory of per-site CSVs or a single file.
fn open_source(
    path: &Path,
    family: ModelFamily,
    chunks: Option<Vec<usize>>,
) -> Result<Box<dyn SiteSource>> {
    if path.is_dir() {
        if chunks.is_some() {
            return Err(Error::Config(
                "--chunks needs a single interval file".into(),
            ));
        }
        return Ok(Box::new(DirSource::new(path, family)));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "site".into());
    match (family, chunks) {
        (ModelFamily::GammaIc, Some(sizes)) => {
            Ok(Box::new(ChunkedIntervalSource::open(path, sizes)?))
        }
        (_, Some(_)) => Err(Error::Config(
            "--chunks applies to gamma-ic interval files only".into(),
        )),
        (ModelFamily::CovidDc, None) => Ok(Box::new(DoublyFileSource::open(path)?)),
        (ModelFamily::GammaIc, None) => Ok(Box::new(MemorySource {
            sites: vec![SiteDataset::new(name, dataio::load_interval_csv(path)?)],
        })),
        (ModelFamily::Nb, None) => {
            let records = dataio::load_counts_csv(path)?
                .into_iter()
                .map(|y| ObservationRecord::exact(y as f64))
                .collect();
            Ok(Box::new(MemorySource {
                sites: vec![SiteDataset::new(name, records)],
            }))
        }
    }
}

fn fit(a: FitArgs) -> Result<()> {
    let family = ModelFamily::from(a.model);
    let sampler = a.sampler.sampler()?;
    let source = open_source(&a.data, family, None)?;
    let n_sites = source.sites()?.len();
    fs::create_dir_all(&a.out)?;
    let config = json!({
        "model": family,
        "data": a.data.display().to_string(),
        "sampler": a.sampler.to_json(),
    });
    let mut manifest = RunManifest::new("fit", config, a.sampler.seed, vec![source.describe()])?;
    let manifest_path = a.out.join(MANIFEST_FILE);

    let model = fit_direct(source.as_ref(), family)?;
    let gated = match fit_gated(model.as_ref(), &sampler, &a.sampler.gate(), "direct") {
        Ok(g) => g,
        Err(e) => {
            manifest.finish(RunStatus::Aborted);
            manifest.write_atomic(&manifest_path)?;
            return Err(e);
        }
    };
    let mut report = FitReport::from_fit("direct", family, None, &gated.fit);
    report.n_sites = n_sites;
    let json_path = a.out.join("final.json");
    let csv_path = a.out.join("final_summary.csv");
    write_report(&json_path, &report)?;
    write_summary_csv(&csv_path, &report.summaries)?;
    manifest.outputs = path_strings(&[json_path, csv_path]);
    manifest.finish(RunStatus::Completed);
    manifest.write_atomic(&manifest_path)?;

    out!("{}", summary_table(&report.summaries));
    for w in &report.warnings {
        outln!("warning: {w}");
    }
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let family = ModelFamily::from(a.model);
    let source = open_source(&a.sites, family, a.chunks.clone())?;
    let mut cfg = PipelineConfig::new(
        family,
        match a.method {
            MethodArg::Tn => Method::Tn,
            MethodArg::Mvn => Method::Mvn,
        },
        &a.out,
    );
    cfg.sampler = a.sampler.sampler()?;
    cfg.gate = a.sampler.gate();
    cfg.sigma_reading = match a.sigma_reading {
        SigmaReadingArg::Sigma => SigmaReading::Sigma,
        SigmaReadingArg::LiteralMu => SigmaReading::LiteralMu,
    };
    if let Some(order) = a.order {
        cfg.ordering = Ordering::Explicit(order);
    }
    cfg.resume = a.resume;

    let outcome = run_pipeline(source.as_ref(), &cfg)?;
    for site in &outcome.manifest.sites {
        outln!(
            "site {:>2} {:<16} n = {:<5} attempts {}",
            site.order_index,
            site.name,
            site.n,
            site.attempts
        );
    }
    outln!();
    out!("{}", summary_table(&outcome.final_report.summaries));
    Ok(())
}

/// `_g1` style suffix of a grouped label.
fn group_suffix(label: &str) -> &str {
    label.rfind("_g").map(|i| &label[i..]).unwrap_or("")
}

fn curve_draws(report: &FitReport, param: &str) -> Result<(CurveFamily, Vec<(f64, f64)>)> {
    let sfx = group_suffix(param);
    let (family, first, second) = match report.model_family {
        ModelFamily::Nb => (
            CurveFamily::NegBinomial,
            "mu".to_string(),
            "alpha".to_string(),
        ),
        _ => (
            CurveFamily::Gamma,
            format!("mu{sfx}"),
            format!("sigma{sfx}"),
        ),
    };
    let col = |name: &str| {
        report
            .draws
            .get(name)
            .ok_or_else(|| Error::Data(format!("report has no draws of `{name}`")))
    };
    let (x, y) = (col(&first)?, col(&second)?);
    Ok((family, x.iter().copied().zip(y.iter().copied()).collect()))
}

fn compare(a: CompareArgs) -> Result<()> {
    let ra = read_report(&a.a)?;
    let rb = read_report(&a.b)?;
    let ma = NormalMoments::from_summary(ra.summary(&a.param)?)?;
    let mb = NormalMoments::from_summary(rb.summary(&a.param)?)?;
    let bc = bhattacharyya_normal(ma, mb);
    let h2 = hellinger_sq_normal(ma, mb);

    fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();
    for (tag, report) in [("a", &ra), ("b", &rb)] {
        let (family, draws) = curve_draws(report, &a.param)?;
        let max = a.grid_max.unwrap_or(match family {
            CurveFamily::NegBinomial => 40.0,
            CurveFamily::Gamma => 20.0,
        });
        let curves = posterior_curves(family, &draws, &GridSpec::new(max, a.grid_points), a.bands)?;
        let path = a.out.join(format!("curves_{tag}.csv"));
        write_curves_csv(&path, &curves)?;
        outputs.push(path);
    }
    let summary = json!({
        "param": a.param,
        "a": { "path": a.a.display().to_string(), "mean": ma.mean, "sd": ma.sd },
        "b": { "path": a.b.display().to_string(), "mean": mb.mean, "sd": mb.sd },
        "bhattacharyya": bc,
        "hellinger_sq": h2,
    });
    let summary_path = a.out.join("compare.json");
    fs::write(&summary_path, numfmt::to_json_string(&summary)?)?;

    outln!("parameter {}", a.param);
    outln!("a: mean {:.4} sd {:.4} ({})", ma.mean, ma.sd, a.a.display());
    outln!("b: mean {:.4} sd {:.4} ({})", mb.mean, mb.sd, a.b.display());
    outln!("BC (printed H² formula)  {bc:.6}");
    outln!("Hellinger² (1−BC)        {h2:.6}");
    for p in &outputs {
        outln!("curves: {}", p.display());
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    if a.path.is_dir() {
        let manifest_path = a.path.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let m = RunManifest::read(&manifest_path)?;
            outln!(
                "{} run, status {:?}, seed {}, config {}",
                m.command,
                m.status,
                m.seed,
                &m.config_hash[..12]
            );
            for s in &m.sites {
                let status = match s.status {
                    SiteStatus::Pending => "pending",
                    SiteStatus::Done => "done",
                    SiteStatus::Failed => "FAILED",
                };
                outln!(
                    "site {:>2} {:<16} n = {:<5} {status}",
                    s.order_index,
                    s.name,
                    s.n
                );
                if let Some(d) = &s.detail {
                    outln!("    {d}");
                }
            }
        }
        let final_path = a.path.join("final.json");
        if final_path.exists() {
            let r = read_report(&final_path)?;
            outln!();
            out!("{}", summary_table(&r.summaries));
        }
        return Ok(());
    }
    let r = read_report(&a.path)?;
    out!("{}", summary_table(&r.summaries));
    Ok(())
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[i]
}

fn prior_predictive(a: PriorPredictiveArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    fs::create_dir_all(&a.out)?;
    let draws = prior_predictive_gamma(a.n, a.seed);
    let path = a.out.join("prior_predictive.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for d in &draws {
        w.serialize(d)?;
    }
    w.flush()?;
    let mut manifest = RunManifest::new(
        "prior-predictive",
        json!({ "n": a.n, "seed": a.seed }),
        a.seed,
        Vec::new(),
    )?;
    manifest.outputs = path_strings(std::slice::from_ref(&path));
    manifest.finish(RunStatus::Completed);
    manifest.write_atomic(&a.out.join(MANIFEST_FILE))?;

    for (name, f) in [
        (
            "mu",
            (|d: &fedpost::models::PriorPredictiveDraw| d.mu) as fn(&_) -> f64,
        ),
        ("period", |d| d.period),
    ] {
        let mut v: Vec<f64> = draws.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        outln!(
            "{name:<7} mean {mean:8.3}  5% {:8.3}  50% {:8.3}  95% {:8.3}",
            quantile(&v, 0.05),
            quantile(&v, 0.5),
            quantile(&v, 0.95)
        );
    }
    outln!("draws: {}", path.display());
    Ok(())
}
