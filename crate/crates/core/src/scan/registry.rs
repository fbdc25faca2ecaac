//! Dataset registry: which datasets exist, their ids, sensors, label maps and splits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::SensorSpec;
use crate::scan::labels::LabelMap;

/// Point file plus optional label file of one scan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanFiles {
    pub points: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

/// A label map given by name (builtin or path) or inline as a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelMapRef {
    Named(String),
    Table(BTreeMap<String, u16>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub dataset_id: usize,
    pub has_ambient: bool,
    pub channels: usize,
    pub label_map: LabelMapRef,
    #[serde(default)]
    pub sensor: SensorSpec,
    #[serde(default)]
    pub train: Vec<ScanFiles>,
    #[serde(default)]
    pub val: Vec<ScanFiles>,
}

/// On-disk registry layout (`[[dataset]]` tables).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryConfig {
    #[serde(rename = "dataset", default)]
    pub datasets: Vec<DatasetConfig>,
}

impl RegistryConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A resolved dataset: label map loaded, file paths absolute.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub name: String,
    pub dataset_id: usize,
    pub has_ambient: bool,
    pub channels: usize,
    pub label_map: LabelMap,
    pub sensor: SensorSpec,
    pub train: Vec<ScanFiles>,
    pub val: Vec<ScanFiles>,
}

impl DatasetEntry {
    /// A labeled entry with no files, handy for in-memory scans.
    pub fn in_memory(name: &str, dataset_id: usize, has_ambient: bool) -> Self {
        Self {
            name: name.into(),
            dataset_id,
            has_ambient,
            channels: if has_ambient { 5 } else { 4 },
            label_map: LabelMap::identity(),
            sensor: SensorSpec::default(),
            train: vec![],
            val: vec![],
        }
    }

    pub fn split(&self, split: Split) -> &[ScanFiles] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRegistry {
    entries: Vec<DatasetEntry>,
}

impl DatasetRegistry {
    /// Entries are sorted by id; ids must be exactly `0..D`.
    pub fn new(mut entries: Vec<DatasetEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.dataset_id);
        for (i, e) in entries.iter().enumerate() {
            if e.dataset_id != i {
                return Err(Error::Config(format!(
                    "dataset ids must be dense and unique from 0; '{}' has id {} at position {i}",
                    e.name, e.dataset_id
                )));
            }
            if e.channels != 4 && e.channels != 5 {
                return Err(Error::Config(format!("'{}': channels must be 4 or 5", e.name)));
            }
            if e.has_ambient != (e.channels == 5) {
                return Err(Error::Config(format!(
                    "'{}': has_ambient requires exactly 5 channels",
                    e.name
                )));
            }
            e.sensor.validate()?;
        }
        for (i, a) in entries.iter().enumerate() {
            if entries[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Config(format!("duplicate dataset name '{}'", a.name)));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_config(cfg: &RegistryConfig, base_dir: &Path) -> Result<Self> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base_dir.join(p) };
        let resolve_files = |files: &[ScanFiles]| -> Vec<ScanFiles> {
            files
                .iter()
                .map(|f| ScanFiles {
                    points: resolve(&f.points),
                    labels: f.labels.as_ref().map(resolve),
                })
                .collect()
        };
        let entries = cfg
            .datasets
            .iter()
            .map(|d| {
                let label_map = match &d.label_map {
                    LabelMapRef::Named(n) => match LabelMap::builtin(n) {
                        Some(m) => m,
                        None => LabelMap::from_file(&resolve(&PathBuf::from(n)))?,
                    },
                    LabelMapRef::Table(t) => {
                        let name = format!("{}-inline", d.name);
                        let table = LabelMap::parse_table(&name, t)?;
                        LabelMap::new(name, table)?
                    }
                };
                Ok(DatasetEntry {
                    name: d.name.clone(),
                    dataset_id: d.dataset_id,
                    has_ambient: d.has_ambient,
                    channels: d.channels,
                    label_map,
                    sensor: d.sensor,
                    train: resolve_files(&d.train),
                    val: resolve_files(&d.val),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RegistryConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_config(&cfg, base)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn get(&self, id: usize) -> Result<&DatasetEntry> {
        self.entries.get(id).ok_or(Error::UnknownDataset {
            id,
            count: self.entries.len(),
        })
    }

    pub fn by_name(&self, name: &str) -> Result<&DatasetEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Config(format!("no dataset named '{name}' in registry")))
    }

    pub fn sensors(&self) -> Vec<SensorSpec> {
        self.entries.iter().map(|e| e.sensor).collect()
    }
}
