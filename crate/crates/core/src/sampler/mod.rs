//! Gradient-free adaptive random-walk Metropolis.
//!
//! Warmup runs in two halves. The first proposes from a diagonal Gaussian
//! whose per-parameter scales follow the running marginal variances; the
//! second proposes from the running joint covariance. In both halves a global
//! step multiplier is driven toward the target acceptance rate by a
//! Robbins-Monro recursion. Adaptation is frozen before any draw is kept.
//!
//! Chains are independent given their sub-seeds and run on rayon when the
//! `parallel` feature is enabled.

pub mod diagnostics;
pub mod transform;

pub use diagnostics::{
    compute_ess, compute_hdi, compute_rhat, summarize, EssMode, ParameterSummary,
};
pub use transform::Support;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// How chains are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Parallel over chains; `threads` caps the pool size. Falls back to
    /// sequential when built without the `parallel` feature.
    Parallel {
        threads: Option<usize>,
    },
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel { threads: None }
        } else {
            Execution::Sequential
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_tune: usize,
    pub n_draws: usize,
    pub seed: u64,
    /// Acceptance rate the step size adapts toward. `None` picks the
    /// dimension-dependent optimum for random-walk proposals.
    pub target_accept: Option<f64>,
    /// Sub-stream index mixed into every chain seed (the site index in a pipeline).
    pub stream: u64,
    pub execution: Execution,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_tune: 4000,
            n_draws: 5000,
            seed: 0,
            target_accept: None,
            stream: 0,
            execution: Execution::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains < 2 {
            return Err(Error::Config("at least 2 chains are required".into()));
        }
        if self.n_tune < 100 || self.n_draws < 100 {
            return Err(Error::Config(
                "n_tune and n_draws must be at least 100".into(),
            ));
        }
        if let Some(t) = self.target_accept {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!(
                    "target_accept must lie in (0, 1), got {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn with_draws(mut self, n_tune: usize, n_draws: usize) -> Self {
        self.n_tune = n_tune;
        self.n_draws = n_draws;
        self
    }

    fn accept_target(&self, dim: usize) -> f64 {
        self.target_accept.unwrap_or(match dim {
            1 => 0.44,
            2 => 0.35,
            3 | 4 => 0.3,
            _ => 0.234,
        })
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one chain: `seed ⊕ hash(stream, chain)`.
pub fn chain_seed(seed: u64, stream: u64, chain: usize) -> u64 {
    seed ^ splitmix64(splitmix64(stream) ^ (chain as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Post-warmup draws of every chain, in the constrained space.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub supports: Vec<Support>,
    /// One row-major `n_draws × n_params` block per chain.
    pub chains: Vec<Vec<f64>>,
    pub n_draws: usize,
    /// Post-warmup acceptance rate per chain.
    pub acceptance: Vec<f64>,
    pub warnings: Vec<String>,
}

impl PosteriorDraws {
    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn draw(&self, chain: usize, iter: usize) -> &[f64] {
        let k = self.n_params();
        &self.chains[chain][iter * k..(iter + 1) * k]
    }

    /// One parameter, split by chain.
    pub fn param_chains(&self, p: usize) -> Vec<Vec<f64>> {
        let k = self.n_params();
        self.chains
            .iter()
            .map(|c| c.iter().skip(p).step_by(k).copied().collect())
            .collect()
    }

    /// One parameter, all chains concatenated.
    pub fn pooled(&self, p: usize) -> Vec<f64> {
        self.param_chains(p).concat()
    }

    /// Applies `f` to every draw, producing a new set of columns.
    pub fn map_draws(
        &self,
        names: Vec<String>,
        supports: Vec<Support>,
        f: impl Fn(&[f64], &mut Vec<f64>),
    ) -> PosteriorDraws {
        let k = self.n_params();
        let mut buf = Vec::with_capacity(names.len());
        let chains = self
            .chains
            .iter()
            .map(|c| {
                let mut out = Vec::with_capacity(self.n_draws * names.len());
                for row in c.chunks(k) {
                    buf.clear();
                    f(row, &mut buf);
                    debug_assert_eq!(buf.len(), names.len());
                    out.extend_from_slice(&buf);
                }
                out
            })
            .collect();
        PosteriorDraws {
            names,
            supports,
            chains,
            n_draws: self.n_draws,
            acceptance: self.acceptance.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

struct ChainOutput {
    draws: Vec<f64>,
    acceptance: f64,
}

struct Target<'a, F> {
    logpost: &'a F,
    supports: &'a [Support],
}

impl<F: Fn(&[f64]) -> f64> Target<'_, F> {
    /// Log target on the unconstrained scale; fills `x` with the constrained point.
    fn eval(&self, u: &[f64], x: &mut [f64]) -> f64 {
        let mut log_jac = 0.0;
        for ((s, &ui), xi) in self.supports.iter().zip(u).zip(x.iter_mut()) {
            let (v, lj) = s.to_constrained(ui);
            *xi = v;
            log_jac += lj;
        }
        let lp = (self.logpost)(x);
        let total = lp + log_jac;
        if total.is_nan() {
            f64::NEG_INFINITY
        } else {
            total
        }
    }
}

/// Running mean and covariance (Welford).
struct RunningMoments {
    n: f64,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl RunningMoments {
    fn new(k: usize) -> Self {
        Self {
            n: 0.0,
            mean: DVector::zeros(k),
            m2: DMatrix::zeros(k, k),
        }
    }

    fn push(&mut self, u: &[f64]) {
        self.n += 1.0;
        let x = DVector::from_column_slice(u);
        let delta = &x - &self.mean;
        self.mean += &delta / self.n;
        let delta2 = &x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn covariance(&self) -> DMatrix<f64> {
        &self.m2 / (self.n - 1.0).max(1.0)
    }
}

const PARAM_JITTER: f64 = 0.1;
const INIT_ATTEMPTS: usize = 100;
const COV_REFRESH: usize = 50;

fn initial_point<F: Fn(&[f64]) -> f64>(
    target: &Target<'_, F>,
    init_u: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, f64)> {
    let k = init_u.len();
    let mut x = vec![0.0; k];
    for _ in 0..INIT_ATTEMPTS {
        let u: Vec<f64> = init_u
            .iter()
            .map(|v| v + PARAM_JITTER * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = target.eval(&u, &mut x);
        if lp.is_finite() {
            return Ok((u, lp));
        }
    }
    let lp = target.eval(init_u, &mut x);
    if lp.is_finite() {
        Ok((init_u.to_vec(), lp))
    } else {
        Err(Error::Init(
            "log posterior is not finite at the initial point".into(),
        ))
    }
}

fn run_chain<F: Fn(&[f64]) -> f64>(
    target: &Target<'_, F>,
    init_u: &[f64],
    cfg: &SamplerConfig,
    chain: usize,
) -> Result<ChainOutput> {
    let k = init_u.len();
    let mut rng = ChaCha8Rng::seed_from_u64(chain_seed(cfg.seed, cfg.stream, chain));
    let (mut u, mut lp) = initial_point(target, init_u, &mut rng)?;
    let mut x = vec![0.0; k];
    let mut proposal = vec![0.0; k];
    let mut z = vec![0.0; k];

    let accept_target = cfg.accept_target(k);
    let mut log_step = (2.38 / (k as f64).sqrt()).ln();
    let half = cfg.n_tune / 2;
    let mut marginal = RunningMoments::new(k);
    let mut joint = RunningMoments::new(k);
    let mut diag_scale = vec![1.0; k];
    let mut chol = DMatrix::<f64>::identity(k, k);
    let mut use_joint = false;

    let mut step = |u: &mut Vec<f64>,
                    lp: &mut f64,
                    rng: &mut ChaCha8Rng,
                    scale: f64,
                    use_joint: bool,
                    diag: &[f64],
                    chol: &DMatrix<f64>|
     -> bool {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        if use_joint {
            for i in 0..k {
                let mut d = 0.0;
                for j in 0..=i {
                    d += chol[(i, j)] * z[j];
                }
                proposal[i] = u[i] + scale * d;
            }
        } else {
            for i in 0..k {
                proposal[i] = u[i] + scale * diag[i] * z[i];
            }
        }
        let lp_new = target.eval(&proposal, &mut x);
        let log_ratio = lp_new - *lp;
        let accept = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
        if accept {
            u.copy_from_slice(&proposal);
            *lp = lp_new;
        }
        accept
    };

    for t in 0..cfg.n_tune {
        if t == half {
            use_joint = joint.n > (k as f64) + 10.0;
            log_step = (2.38 / (k as f64).sqrt()).ln();
        }
        if use_joint && t % COV_REFRESH == 0 {
            if let Some(c) = regularized_cholesky(joint.covariance()) {
                chol = c;
            }
        }
        let accepted = step(
            &mut u,
            &mut lp,
            &mut rng,
            log_step.exp(),
            use_joint,
            &diag_scale,
            &chol,
        );
        let phase_t = if t < half { t } else { t - half } as f64 + 1.0;
        let gain = phase_t.powf(-0.6);
        log_step += gain * ((accepted as u8 as f64) - accept_target);
        log_step = log_step.clamp(-30.0, 5.0);

        marginal.push(&u);
        if t >= cfg.n_tune / 4 {
            joint.push(&u);
        }
        if t < half && t >= 20 {
            let cov = marginal.covariance();
            for i in 0..k {
                diag_scale[i] = cov[(i, i)].max(1e-12).sqrt();
            }
        }
    }
    if !use_joint {
        if let Some(c) = regularized_cholesky(joint.covariance()) {
            chol = c;
            use_joint = true;
        }
    } else if let Some(c) = regularized_cholesky(joint.covariance()) {
        chol = c;
    }

    let scale = log_step.exp();
    let mut draws = Vec::with_capacity(cfg.n_draws * k);
    let mut record = vec![0.0; k];
    let mut n_accept = 0usize;
    for _ in 0..cfg.n_draws {
        if step(
            &mut u,
            &mut lp,
            &mut rng,
            scale,
            use_joint,
            &diag_scale,
            &chol,
        ) {
            n_accept += 1;
        }
        target.eval(&u, &mut record);
        draws.extend_from_slice(&record);
    }
    Ok(ChainOutput {
        draws,
        acceptance: n_accept as f64 / cfg.n_draws as f64,
    })
}

fn regularized_cholesky(mut cov: DMatrix<f64>) -> Option<DMatrix<f64>> {
    let k = cov.nrows();
    let scale = (0..k).map(|i| cov[(i, i)].abs()).sum::<f64>() / k as f64;
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    for i in 0..k {
        cov[(i, i)] += 1e-8 * scale;
    }
    cov.cholesky().map(|c| c.l())
}

/// Samples `logpost` (a density over the constrained parameters) starting
/// from `init`.
pub fn run_mcmc<F>(
    logpost: F,
    init: &[f64],
    supports: &[Support],
    cfg: &SamplerConfig,
) -> Result<PosteriorDraws>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    if init.len() != supports.len() {
        return Err(Error::Shape {
            expected: supports.len(),
            got: init.len(),
        });
    }
    if init.is_empty() {
        return Err(Error::Init("no parameters to sample".into()));
    }
    for (i, (s, &x)) in supports.iter().zip(init).enumerate() {
        if !s.contains(x) {
            return Err(Error::Init(format!(
                "initial value {x} of parameter {i} outside {s:?}"
            )));
        }
    }
    if !logpost(init).is_finite() {
        return Err(Error::Init(
            "log posterior is -inf or NaN at the initial point".into(),
        ));
    }
    let init_u: Vec<f64> = supports
        .iter()
        .zip(init)
        .map(|(s, &x)| s.to_unconstrained(x))
        .collect();
    let target = Target {
        logpost: &logpost,
        supports,
    };

    let outputs = run_chains(cfg, |chain| run_chain(&target, &init_u, cfg, chain))?;

    let names = (0..init.len()).map(|i| format!("x{i}")).collect();
    let mut draws = PosteriorDraws {
        names,
        supports: supports.to_vec(),
        chains: Vec::with_capacity(outputs.len()),
        n_draws: cfg.n_draws,
        acceptance: Vec::with_capacity(outputs.len()),
        warnings: Vec::new(),
    };
    for out in outputs {
        draws.acceptance.push(out.acceptance);
        draws.chains.push(out.draws);
    }
    attach_convergence_warning(&mut draws);
    Ok(draws)
}

fn run_chains<T, G>(cfg: &SamplerConfig, run: G) -> Result<Vec<T>>
where
    T: Send,
    G: Fn(usize) -> Result<T> + Sync,
{
    match cfg.execution {
        Execution::Sequential => (0..cfg.n_chains).map(&run).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel { threads } => {
            use rayon::prelude::*;
            let work = || (0..cfg.n_chains).into_par_iter().map(&run).collect();
            match threads {
                Some(n) => rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?
                    .install(work),
                None => work(),
            }
        }
        #[cfg(not(feature = "parallel"))]
        Execution::Parallel { .. } => (0..cfg.n_chains).map(&run).collect(),
    }
}

fn attach_convergence_warning(draws: &mut PosteriorDraws) {
    let mean_accept = draws.acceptance.iter().sum::<f64>() / draws.acceptance.len() as f64;
    if mean_accept >= 0.5 {
        return;
    }
    for p in 0..draws.n_params() {
        if let Ok(r) = compute_rhat(&draws.param_chains(p)) {
            if r > 1.05 {
                draws.warnings.push(format!(
                    "parameter {} has R-hat {r:.3} with {:.0}% of proposals rejected",
                    draws.names[p],
                    100.0 * (1.0 - mean_accept)
                ));
            }
        }
    }
}

impl PosteriorDraws {
    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_params() {
            return Err(Error::Shape {
                expected: self.n_params(),
                got: names.len(),
            });
        }
        self.names = names;
        Ok(self)
    }
}
