#![allow(dead_code)]

use std::cell::RefCell;

use fedpost::dataio::{
    simulate_doubly_gamma, simulate_interval_gamma, simulate_nb, site_name, ObservationRecord,
    SiteDataset,
};
use fedpost::distributions::{gamma_convert, GammaParams};
use fedpost::federation::{MemorySource, SiteInfo, SiteSource};
use fedpost::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const NB_SIZES: [usize; 12] = [21, 53, 64, 24, 58, 52, 45, 27, 47, 34, 33, 42];

pub fn nb_sites(seed: u64) -> Vec<SiteDataset> {
    let y = simulate_nb(500, 9.0, 10.0, seed).unwrap();
    let mut start = 0;
    NB_SIZES
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let recs = y[start..start + n]
                .iter()
                .map(|&v| ObservationRecord::exact(v as f64))
                .collect();
            start += n;
            SiteDataset::new(site_name(i), recs)
        })
        .collect()
}

pub fn nb_counts(sites: &[SiteDataset]) -> Vec<Vec<u64>> {
    sites.iter().map(|s| s.counts().unwrap()).collect()
}

/// Two-group interval-censored sites with known `(mu, sigma)` per group.
pub fn gamma_ic_sites(sizes: &[usize], truth: [(f64, f64); 2], seed: u64) -> Vec<SiteDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: Vec<GammaParams> = truth
        .iter()
        .map(|&(m, s)| gamma_convert(m, s).unwrap())
        .collect();
    sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut r = simulate_interval_gamma(n.div_ceil(2), 1, g[0], 0.3, 2, &mut rng);
            r.extend(simulate_interval_gamma(n / 2, 2, g[1], 0.3, 2, &mut rng));
            SiteDataset::new(site_name(i), r)
        })
        .collect()
}

pub fn covid_sites(
    sizes: &[usize],
    truth: (f64, f64),
    exact_fraction: f64,
    seed: u64,
) -> Vec<SiteDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gamma_convert(truth.0, truth.1).unwrap();
    sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            SiteDataset::new(
                site_name(i),
                simulate_doubly_gamma(n, g, exact_fraction, 3, &mut rng),
            )
        })
        .collect()
}

/// Records every load and release of the wrapped source.
pub struct LoggingSource {
    pub inner: MemorySource,
    pub log: RefCell<Vec<String>>,
    pub outstanding: RefCell<usize>,
    pub max_outstanding: RefCell<usize>,
    /// Site whose load fails while this is set.
    pub fail_on: RefCell<Option<String>>,
}

impl LoggingSource {
    pub fn new(sites: Vec<SiteDataset>) -> Self {
        Self {
            inner: MemorySource { sites },
            log: RefCell::new(Vec::new()),
            outstanding: RefCell::new(0),
            max_outstanding: RefCell::new(0),
            fail_on: RefCell::new(None),
        }
    }
}

impl SiteSource for LoggingSource {
    fn describe(&self) -> String {
        "logging".into()
    }

    fn sites(&self) -> Result<Vec<SiteInfo>> {
        self.inner.sites()
    }

    fn load(&self, name: &str) -> Result<SiteDataset> {
        if self.fail_on.borrow().as_deref() == Some(name) {
            return Err(fedpost::Error::Data(format!("{name} unavailable")));
        }
        self.log.borrow_mut().push(format!("load {name}"));
        let mut out = self.outstanding.borrow_mut();
        *out += 1;
        let mut max = self.max_outstanding.borrow_mut();
        *max = (*max).max(*out);
        self.inner.load(name)
    }

    fn release(&self, name: &str) {
        self.log.borrow_mut().push(format!("release {name}"));
        *self.outstanding.borrow_mut() -= 1;
    }
}
