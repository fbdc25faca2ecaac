//! Source-to-target class remapping.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::scan::{IGNORE, NUM_CLASSES};

/// Source id written for IGNORE in label files (low 16 bits all set).
pub const IGNORE_WORD: u16 = 0xFFFF;

const SEMANTIC_KITTI: &str = include_str!("../../labelmaps/semantic_kitti.toml");
const WAYMO: &str = include_str!("../../labelmaps/waymo.toml");

/// Total map from source class ids to target ids (0..=7 or [`IGNORE`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub name: String,
    table: BTreeMap<u16, u8>,
}

#[derive(Deserialize)]
struct LabelMapFile {
    name: String,
    map: BTreeMap<String, u16>,
}

impl LabelMap {
    pub fn new(name: impl Into<String>, table: BTreeMap<u16, u8>) -> Result<Self> {
        let name = name.into();
        if let Some((src, dst)) = table.iter().find(|(_, &t)| t as usize >= NUM_CLASSES && t != IGNORE) {
            return Err(Error::Config(format!(
                "label map '{name}' sends {src} to {dst}, outside 0..{NUM_CLASSES} and ignore"
            )));
        }
        Ok(Self { name, table })
    }

    /// Target ids map to themselves; the IGNORE sentinels map to IGNORE.
    pub fn identity() -> Self {
        let mut table: BTreeMap<u16, u8> = (0..NUM_CLASSES as u16).map(|c| (c, c as u8)).collect();
        table.insert(IGNORE as u16, IGNORE);
        table.insert(IGNORE_WORD, IGNORE);
        Self {
            name: "identity".into(),
            table,
        }
    }

    pub fn semantic_kitti() -> Self {
        Self::from_toml_str(SEMANTIC_KITTI).expect("bundled map parses")
    }

    pub fn waymo() -> Self {
        Self::from_toml_str(WAYMO).expect("bundled map parses")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(Self::identity()),
            "semantic_kitti" => Some(Self::semantic_kitti()),
            "waymo" => Some(Self::waymo()),
            _ => None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: LabelMapFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let table = Self::parse_table(&file.name, &file.map)?;
        Self::new(file.name, table)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub(crate) fn parse_table(name: &str, raw: &BTreeMap<String, u16>) -> Result<BTreeMap<u16, u8>> {
        raw.iter()
            .map(|(k, &v)| {
                let src = k
                    .parse::<u16>()
                    .map_err(|_| Error::Config(format!("label map '{name}': bad source id '{k}'")))?;
                let dst = u8::try_from(v)
                    .map_err(|_| Error::Config(format!("label map '{name}': bad target id {v}")))?;
                Ok((src, dst))
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, source: u16) -> Option<u8> {
        self.table.get(&source).copied()
    }

    pub fn lookup(&self, source: u16) -> Result<u8> {
        self.get(source).ok_or_else(|| Error::UnmappedClass {
            class: source,
            map: self.name.clone(),
        })
    }

    pub fn sources(&self) -> impl Iterator<Item = u16> + '_ {
        self.table.keys().copied()
    }
}

pub fn remap_labels(raw: &[u16], map: &LabelMap) -> Result<Vec<u8>> {
    raw.iter().map(|&s| map.lookup(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_maps_cover_their_class_lists() {
        let kitti = LabelMap::semantic_kitti();
        assert_eq!(kitti.len(), 34);
        assert_eq!(kitti.get(0), Some(IGNORE));
        assert_eq!(kitti.get(40), Some(0));
        assert_eq!(kitti.get(1), Some(7));
        let waymo = LabelMap::waymo();
        assert_eq!(waymo.len(), 23);
        assert!(waymo.sources().eq(0..23));
        assert!((0..23).all(|s| waymo.lookup(s).is_ok()));
        // no outlier in waymo
        assert!(waymo.sources().all(|s| waymo.get(s) != Some(7)));
    }

    #[test]
    fn every_target_class_is_reachable_from_kitti() {
        let kitti = LabelMap::semantic_kitti();
        for t in 0..NUM_CLASSES as u8 {
            assert!(kitti.sources().any(|s| kitti.get(s) == Some(t)), "class {t}");
        }
    }

    #[test]
    fn identity_and_unmapped() {
        let id = LabelMap::identity();
        let raw: Vec<u16> = (0..8).collect();
        assert_eq!(remap_labels(&raw, &id).unwrap(), (0..8).collect::<Vec<u8>>());
        assert_eq!(id.lookup(IGNORE_WORD).unwrap(), IGNORE);
        let err = remap_labels(&[3, 9], &id).unwrap_err();
        assert!(matches!(err, Error::UnmappedClass { class: 9, .. }));
    }

    #[test]
    fn out_of_range_target_rejected() {
        let text = "name = \"bad\"\n[map]\n1 = 9\n";
        assert!(LabelMap::from_toml_str(text).is_err());
    }
}
