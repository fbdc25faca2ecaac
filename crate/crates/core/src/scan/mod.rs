//! LiDAR scans in SemanticKITTI binary layout.
//!
//! Point files are consecutive little-endian `f32` records: `(x, y, z,
//! intensity)` for 4-channel datasets and `(x, y, z, intensity, ambient)` for
//! 5-channel ones. Label files hold one little-endian `u32` per point whose
//! low 16 bits are the semantic class; the instance id in the high 16 bits is
//! dropped on read and written as zero.

pub mod labels;
pub mod registry;

use std::path::Path;

use crate::error::{Error, Result};
pub use labels::{remap_labels, LabelMap, IGNORE_WORD};
pub use registry::{DatasetConfig, DatasetEntry, DatasetRegistry, LabelMapRef, RegistryConfig, ScanFiles, Split};

pub const NUM_CLASSES: usize = 8;
/// Label of points excluded from loss and metrics.
pub const IGNORE: u8 = 255;

/// Target classes, in id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Class {
    Road = 0,
    Ground = 1,
    Vegetation = 2,
    People = 3,
    Vehicle = 4,
    Structure = 5,
    Object = 6,
    Outlier = 7,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [
        Class::Road,
        Class::Ground,
        Class::Vegetation,
        Class::People,
        Class::Vehicle,
        Class::Structure,
        Class::Object,
        Class::Outlier,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Road => "road",
            Class::Ground => "ground",
            Class::Vegetation => "vegetation",
            Class::People => "people",
            Class::Vehicle => "vehicle",
            Class::Structure => "structure",
            Class::Object => "object",
            Class::Outlier => "outlier",
        }
    }
}

/// One LiDAR sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PointScan {
    pub xyz: Vec<[f64; 3]>,
    pub intensity: Vec<f64>,
    pub ambient: Option<Vec<f64>>,
    pub labels: Vec<u8>,
    pub dataset_id: usize,
}

impl PointScan {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.xyz.len();
        if n == 0 {
            return Err(Error::InvalidScan("scan has no points".into()));
        }
        if self.intensity.len() != n || self.labels.len() != n {
            return Err(Error::InvalidScan(format!(
                "channel lengths differ: xyz {n}, intensity {}, labels {}",
                self.intensity.len(),
                self.labels.len()
            )));
        }
        if let Some(a) = &self.ambient {
            if a.len() != n {
                return Err(Error::InvalidScan(format!("ambient has {} values for {n} points", a.len())));
            }
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l as usize >= NUM_CLASSES && l != IGNORE) {
            return Err(Error::InvalidScan(format!("label {bad} outside 0..8 and ignore")));
        }
        if self.xyz.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidScan("non-finite coordinate".into()));
        }
        Ok(())
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.iter().any(|&l| l != IGNORE)
    }

    /// Ambient values, or zeros for scans without an ambient channel.
    pub fn ambient_or_zeros(&self) -> Vec<f64> {
        self.ambient.clone().unwrap_or_else(|| vec![0.0; self.len()])
    }
}

/// Reads one scan; see [`load_scan_counted`] for the number of dropped points.
pub fn load_scan(bin_path: &Path, label_path: Option<&Path>, entry: &DatasetEntry) -> Result<PointScan> {
    load_scan_counted(bin_path, label_path, entry).map(|(scan, _)| scan)
}

/// Reads one scan and reports how many points were dropped for non-finite coordinates.
pub fn load_scan_counted(
    bin_path: &Path,
    label_path: Option<&Path>,
    entry: &DatasetEntry,
) -> Result<(PointScan, usize)> {
    let bytes = std::fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
    let record = 4 * entry.channels;
    if bytes.len() % record != 0 {
        return Err(Error::Format {
            path: bin_path.into(),
            msg: format!(
                "{} bytes is not a multiple of the {record}-byte point record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / record;
    let raw_labels: Option<Vec<u16>> = match label_path {
        Some(lp) => {
            let lb = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
            if lb.len() != 4 * n {
                return Err(Error::Format {
                    path: lp.into(),
                    msg: format!("{} label bytes for {n} points (expected {})", lb.len(), 4 * n),
                });
            }
            Some(
                lb.chunks_exact(4)
                    .map(|w| (u32::from_le_bytes([w[0], w[1], w[2], w[3]]) & 0xFFFF) as u16)
                    .collect(),
            )
        }
        None => None,
    };
    let labels = match &raw_labels {
        Some(raw) => remap_labels(raw, &entry.label_map)?,
        None => vec![IGNORE; n],
    };

    let f = |i: usize| {
        let b = &bytes[4 * i..4 * i + 4];
        f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
    };
    let mut scan = PointScan {
        xyz: Vec::with_capacity(n),
        intensity: Vec::with_capacity(n),
        ambient: entry.has_ambient.then(|| Vec::with_capacity(n)),
        labels: Vec::with_capacity(n),
        dataset_id: entry.dataset_id,
    };
    let mut dropped = 0;
    for p in 0..n {
        let base = p * entry.channels;
        let xyz = [f(base), f(base + 1), f(base + 2)];
        if xyz.iter().any(|v| !v.is_finite()) {
            dropped += 1;
            continue;
        }
        scan.xyz.push(xyz);
        scan.intensity.push(f(base + 3));
        if let Some(a) = scan.ambient.as_mut() {
            a.push(f(base + 4));
        }
        scan.labels.push(labels[p]);
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} points with non-finite coordinates", bin_path.display());
    }
    if scan.is_empty() {
        return Err(Error::Format {
            path: bin_path.into(),
            msg: "scan contains no valid points".into(),
        });
    }
    Ok((scan, dropped))
}

/// Encodes the point records of a scan (4 or 5 floats per point).
pub fn encode_points(scan: &PointScan) -> Vec<u8> {
    let channels = if scan.ambient.is_some() { 5 } else { 4 };
    let mut out = Vec::with_capacity(scan.len() * channels * 4);
    for i in 0..scan.len() {
        let p = scan.xyz[i];
        let mut rec = vec![p[0], p[1], p[2], scan.intensity[i]];
        if let Some(a) = &scan.ambient {
            rec.push(a[i]);
        }
        for v in rec {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Encodes labels as `u32` words; IGNORE becomes `0x0000FFFF`.
pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    labels
        .iter()
        .flat_map(|&l| {
            let word: u32 = if l == IGNORE { IGNORE_WORD as u32 } else { l as u32 };
            word.to_le_bytes()
        })
        .collect()
}

/// Writes a scan in target-class space; the inverse of [`load_scan`] under the identity map.
pub fn save_scan(scan: &PointScan, bin_path: &Path, label_path: &Path) -> Result<()> {
    scan.validate()?;
    for p in [bin_path, label_path] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(bin_path, encode_points(scan)).map_err(|e| Error::io(bin_path, e))?;
    std::fs::write(label_path, encode_labels(&scan.labels)).map_err(|e| Error::io(label_path, e))?;
    Ok(())
}

/// Installs an ambient channel; datasets without ambient get zeros regardless of `values`.
pub fn attach_ambient(mut scan: PointScan, values: &[f64], has_ambient: bool) -> Result<PointScan> {
    if values.len() != scan.len() {
        return Err(Error::InvalidScan(format!(
            "ambient has {} values for {} points",
            values.len(),
            scan.len()
        )));
    }
    scan.ambient = Some(if has_ambient {
        values.to_vec()
    } else {
        vec![0.0; values.len()]
    });
    Ok(scan)
}
