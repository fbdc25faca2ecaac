//! Where training and validation scans come from.

use crate::error::{Error, Result};
use crate::projection::SensorSpec;
use crate::scan::registry::{DatasetRegistry, Split};
use crate::scan::{load_scan, PointScan};

/// Random access to the scans of every dataset, by id and split.
pub trait ScanSource {
    fn num_datasets(&self) -> usize;
    fn name(&self, dataset: usize) -> Result<&str>;
    fn sensor(&self, dataset: usize) -> Result<SensorSpec>;
    fn count(&self, dataset: usize, split: Split) -> Result<usize>;
    fn load(&self, dataset: usize, split: Split, index: usize) -> Result<PointScan>;

    fn resolve(&self, name: &str) -> Result<usize> {
        (0..self.num_datasets())
            .find(|&d| self.name(d).is_ok_and(|n| n == name))
            .ok_or_else(|| Error::Config(format!("unknown dataset '{name}'")))
    }
}

/// Scans are read from disk on demand.
impl ScanSource for DatasetRegistry {
    fn num_datasets(&self) -> usize {
        self.len()
    }

    fn name(&self, dataset: usize) -> Result<&str> {
        Ok(&self.get(dataset)?.name)
    }

    fn sensor(&self, dataset: usize) -> Result<SensorSpec> {
        Ok(self.get(dataset)?.sensor)
    }

    fn count(&self, dataset: usize, split: Split) -> Result<usize> {
        Ok(self.get(dataset)?.split(split).len())
    }

    fn load(&self, dataset: usize, split: Split, index: usize) -> Result<PointScan> {
        let entry = self.get(dataset)?;
        let files = entry.split(split).get(index).ok_or(Error::Index {
            op: "load",
            index,
            limit: entry.split(split).len(),
        })?;
        load_scan(&files.points, files.labels.as_deref(), entry)
    }
}

/// A dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryDataset {
    pub name: String,
    pub sensor: SensorSpec,
    pub train: Vec<PointScan>,
    pub val: Vec<PointScan>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemorySource {
    pub datasets: Vec<MemoryDataset>,
}

impl MemorySource {
    fn dataset(&self, d: usize) -> Result<&MemoryDataset> {
        self.datasets.get(d).ok_or(Error::UnknownDataset {
            id: d,
            count: self.datasets.len(),
        })
    }
}

impl ScanSource for MemorySource {
    fn num_datasets(&self) -> usize {
        self.datasets.len()
    }

    fn name(&self, dataset: usize) -> Result<&str> {
        Ok(&self.dataset(dataset)?.name)
    }

    fn sensor(&self, dataset: usize) -> Result<SensorSpec> {
        Ok(self.dataset(dataset)?.sensor)
    }

    fn count(&self, dataset: usize, split: Split) -> Result<usize> {
        let d = self.dataset(dataset)?;
        Ok(match split {
            Split::Train => d.train.len(),
            Split::Val => d.val.len(),
        })
    }

    fn load(&self, dataset: usize, split: Split, index: usize) -> Result<PointScan> {
        let d = self.dataset(dataset)?;
        let scans = match split {
            Split::Train => &d.train,
            Split::Val => &d.val,
        };
        scans.get(index).cloned().ok_or(Error::Index {
            op: "load",
            index,
            limit: scans.len(),
        })
    }
}
