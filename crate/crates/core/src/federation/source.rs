use std::path::{Path, PathBuf};

use crate::dataio::{
    self, count_interval_rows, doubly_index, load_doubly_site, load_interval_range, site_name,
    DoublyIndex, ObservationRecord, SiteDataset,
};
use crate::error::{Error, Result};
use crate::models::ModelFamily;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SiteInfo {
    pub name: String,
    pub n: usize,
}

/// Where a pipeline gets site data from. The pipeline loads one site at a
/// time and releases it before loading the next.
pub trait SiteSource {
    /// Human-readable origin, recorded in the run manifest.
    fn describe(&self) -> String;

    fn sites(&self) -> Result<Vec<SiteInfo>>;

    fn load(&self, name: &str) -> Result<SiteDataset>;

    /// Called once the pipeline has dropped the site's data.
    fn release(&self, _name: &str) {}
}

/// Sites already in memory (tests and simulations).
#[derive(Debug, Clone)]
pub struct MemorySource {
    pub sites: Vec<SiteDataset>,
}

impl SiteSource for MemorySource {
    fn describe(&self) -> String {
        format!("memory ({} sites)", self.sites.len())
    }

    fn sites(&self) -> Result<Vec<SiteInfo>> {
        Ok(self
            .sites
            .iter()
            .map(|s| SiteInfo {
                name: s.site.clone(),
                n: s.n(),
            })
            .collect())
    }

    fn load(&self, name: &str) -> Result<SiteDataset> {
        self.sites
            .iter()
            .find(|s| s.site == name)
            .cloned()
            .ok_or_else(|| Error::Data(format!("unknown site `{name}`")))
    }
}

/// One CSV per site in a directory; the file stem is the site name. The
/// expected columns follow the model family.
#[derive(Debug, Clone)]
pub struct DirSource {
    pub dir: PathBuf,
    pub family: ModelFamily,
}

impl DirSource {
    pub fn new(dir: impl Into<PathBuf>, family: ModelFamily) -> Self {
        Self {
            dir: dir.into(),
            family,
        }
    }

    fn files(&self) -> Result<Vec<PathBuf>> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "no site CSV files in {}",
                self.dir.display()
            )));
        }
        Ok(files)
    }

    fn read(&self, path: &Path) -> Result<Vec<ObservationRecord>> {
        let ctx = |e: Error| Error::Data(format!("{}: {e}", path.display()));
        match self.family {
            ModelFamily::Nb => Ok(dataio::load_counts_csv(path)
                .map_err(ctx)?
                .into_iter()
                .map(|y| ObservationRecord::exact(y as f64))
                .collect()),
            ModelFamily::GammaIc => dataio::load_interval_csv(path).map_err(ctx),
            ModelFamily::CovidDc => Ok(dataio::load_doubly_csv(path)
                .map_err(ctx)?
                .into_iter()
                .flat_map(|s| s.records)
                .collect()),
        }
    }
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

impl SiteSource for DirSource {
    fn describe(&self) -> String {
        self.dir.display().to_string()
    }

    fn sites(&self) -> Result<Vec<SiteInfo>> {
        self.files()?
            .iter()
            .map(|p| {
                Ok(SiteInfo {
                    name: stem(p),
                    n: self.read(p)?.len(),
                })
            })
            .collect()
    }

    fn load(&self, name: &str) -> Result<SiteDataset> {
        let path = self
            .files()?
            .into_iter()
            .find(|p| stem(p) == name)
            .ok_or_else(|| Error::Data(format!("unknown site `{name}`")))?;
        Ok(SiteDataset::new(name, self.read(&path)?))
    }
}

/// A doubly-censored file with one site per country.
#[derive(Debug, Clone)]
pub struct DoublyFileSource {
    pub path: PathBuf,
    index: DoublyIndex,
}

impl DoublyFileSource {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let index = doubly_index(&path)?;
        Ok(Self { path, index })
    }
}

impl SiteSource for DoublyFileSource {
    fn describe(&self) -> String {
        self.path.display().to_string()
    }

    fn sites(&self) -> Result<Vec<SiteInfo>> {
        Ok(self
            .index
            .sites
            .iter()
            .map(|(name, n)| SiteInfo {
                name: name.clone(),
                n: *n,
            })
            .collect())
    }

    fn load(&self, name: &str) -> Result<SiteDataset> {
        if !self.index.sites.iter().any(|(c, _)| c == name) {
            return Err(Error::Data(format!("unknown site `{name}`")));
        }
        load_doubly_site(&self.path, name, &self.index)
    }
}

/// An interval file cut into consecutive chunks of the given sizes, named
/// `site-01`, `site-02`, ….
#[derive(Debug, Clone)]
pub struct ChunkedIntervalSource {
    pub path: PathBuf,
    pub sizes: Vec<usize>,
}

impl ChunkedIntervalSource {
    pub fn open(path: impl Into<PathBuf>, sizes: Vec<usize>) -> Result<Self> {
        let path = path.into();
        let rows = count_interval_rows(&path)?;
        let total: usize = sizes.iter().sum();
        if total != rows {
            return Err(Error::Data(format!(
                "chunk sizes sum to {total} but the file has {rows} rows"
            )));
        }
        Ok(Self { path, sizes })
    }
}

impl SiteSource for ChunkedIntervalSource {
    fn describe(&self) -> String {
        format!("{} chunked as {:?}", self.path.display(), self.sizes)
    }

    fn sites(&self) -> Result<Vec<SiteInfo>> {
        Ok(self
            .sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| SiteInfo {
                name: site_name(i),
                n,
            })
            .collect())
    }

    fn load(&self, name: &str) -> Result<SiteDataset> {
        let i = (0..self.sizes.len())
            .find(|&i| site_name(i) == name)
            .ok_or_else(|| Error::Data(format!("unknown site `{name}`")))?;
        let start = self.sizes[..i].iter().sum();
        Ok(SiteDataset::new(
            name,
            load_interval_range(&self.path, start, self.sizes[i])?,
        ))
    }
}
