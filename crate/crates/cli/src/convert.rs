//! Rewrites every scan of a registry into target-class space.

use std::path::{Path, PathBuf};

use roadseg::scan::registry::{DatasetConfig, DatasetRegistry, LabelMapRef, RegistryConfig, ScanFiles, Split};
use roadseg::scan::{encode_points, load_scan_counted, save_scan};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConvertSummary {
    pub scans: usize,
    pub points: usize,
    /// Points dropped for non-finite coordinates.
    pub dropped: usize,
}

/// Converts `registry` into `out_dir` and writes `out_dir/registry.toml`.
///
/// Labels are remapped through each dataset's label map on the way in, so
/// the output registry uses identity maps.
pub fn convert(registry: &DatasetRegistry, out_dir: &Path) -> Result<ConvertSummary, CliError> {
    let mut summary = ConvertSummary::default();
    let mut out = RegistryConfig::default();
    for entry in registry.entries() {
        let mut split_files = |split: Split, dir: &str| -> Result<Vec<ScanFiles>, CliError> {
            let mut files = Vec::new();
            for (i, f) in entry.split(split).iter().enumerate() {
                let (scan, dropped) = load_scan_counted(&f.points, f.labels.as_deref(), entry)?;
                let rel = PathBuf::from(&entry.name).join(dir);
                let points = rel.join(format!("{i:06}.bin"));
                let labels = f.labels.as_ref().map(|_| rel.join(format!("{i:06}.label")));
                match &labels {
                    Some(l) => save_scan(&scan, &out_dir.join(&points), &out_dir.join(l))?,
                    None => {
                        let p = out_dir.join(&points);
                        if let Some(d) = p.parent() {
                            std::fs::create_dir_all(d).map_err(|e| io(d, e))?;
                        }
                        std::fs::write(&p, encode_points(&scan)).map_err(|e| io(&p, e))?;
                    }
                }
                summary.scans += 1;
                summary.points += scan.len();
                summary.dropped += dropped;
                files.push(ScanFiles { points, labels });
            }
            Ok(files)
        };
        let train = split_files(Split::Train, "train")?;
        let val = split_files(Split::Val, "val")?;
        out.datasets.push(DatasetConfig {
            name: entry.name.clone(),
            dataset_id: entry.dataset_id,
            has_ambient: entry.has_ambient,
            channels: entry.channels,
            label_map: LabelMapRef::Named("identity".into()),
            sensor: entry.sensor,
            train,
            val,
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let path = out_dir.join("registry.toml");
    std::fs::write(&path, out.to_toml()?).map_err(|e| io(&path, e))?;
    Ok(summary)
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}
