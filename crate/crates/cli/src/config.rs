//! Run configuration: one TOML file plus `--set key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use roadseg::augment::AugmentConfig;
use roadseg::model::{ExtractorConfig, HeadConfig, ModelConfig};
use roadseg::projection::SensorSpec;
use roadseg::synth::{BenchConfig, PSEUDO_TARGET};
use roadseg::train::{AdamWConfig, EarlyStopConfig, StageConfig};

use crate::CliError;

/// The three ablation axes besides the pretraining corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub ppt: bool,
    pub mixup: bool,
    pub ambient: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            ppt: true,
            mixup: false,
            ambient: true,
        }
    }
}

/// Optional overrides of a stage's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOverrides {
    pub steps: Option<u64>,
    pub max_lr: Option<f64>,
    pub batch: Option<usize>,
    pub datasets: Option<Vec<String>>,
    pub weights: Option<Vec<f64>>,
    pub freeze: Option<Vec<String>>,
    pub early_stop: Option<EarlyStopConfig>,
    pub optimizer: Option<AdamWConfig>,
    pub pct_start: Option<f64>,
    pub div_factor: Option<f64>,
    pub final_div_factor: Option<f64>,
    pub augment: Option<bool>,
}

impl StageOverrides {
    pub fn apply(&self, mut s: StageConfig) -> StageConfig {
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    s.$f = v.clone();
                }
            )*};
        }
        take!(steps, max_lr, batch, datasets, freeze, early_stop, optimizer, pct_start, div_factor, final_div_factor, augment);
        if self.weights.is_some() {
            s.weights = self.weights.clone();
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationTable {
    Dataset,
    Ppt,
    Mixup,
    Ambient,
}

impl AblationTable {
    pub const ALL: [AblationTable; 4] = [Self::Dataset, Self::Ppt, Self::Mixup, Self::Ambient];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dataset => "dataset",
            Self::Ppt => "ppt",
            Self::Mixup => "mixup",
            Self::Ambient => "ambient",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub tables: Vec<AblationTable>,
    /// Regenerate the synthetic benchmark under `out_dir` before running.
    pub generate_benchmark: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            tables: AblationTable::ALL.to_vec(),
            generate_benchmark: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Dataset to evaluate; the target when absent.
    pub dataset: Option<String>,
    pub split: SplitName,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            split: SplitName::Val,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset registry; relative paths resolve against the config file.
    pub registry: PathBuf,
    /// Name of the in-domain dataset used for fine-tuning and validation.
    pub target: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub toggles: Toggles,
    pub augment: AugmentConfig,
    pub extractor: ExtractorConfig,
    pub head: HeadConfig,
    pub ctx_dim: usize,
    pub frozen_norms_use_running_stats: bool,
    /// Sensor overrides keyed by dataset name.
    pub sensors: BTreeMap<String, SensorSpec>,
    pub pretrain: StageOverrides,
    pub finetune: StageOverrides,
    pub bench: BenchConfig,
    pub ablate: AblateConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            registry: PathBuf::from("bench/registry.toml"),
            target: PSEUDO_TARGET.into(),
            out_dir: PathBuf::from("runs"),
            seed: 0,
            toggles: Toggles::default(),
            augment: AugmentConfig::default(),
            extractor: m.extractor,
            head: m.head,
            ctx_dim: m.ctx_dim,
            frozen_norms_use_running_stats: m.frozen_norms_use_running_stats,
            sensors: BTreeMap::new(),
            pretrain: StageOverrides::default(),
            finetune: StageOverrides::default(),
            bench: BenchConfig::default(),
            ablate: AblateConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Model architecture for `num_datasets` datasets with `toggles` applied.
    pub fn model_config(&self, num_datasets: usize, toggles: Toggles, seed: u64) -> ModelConfig {
        let mut head = self.head.clone();
        head.mixup.enabled = toggles.mixup;
        if !toggles.ambient {
            head.ambient_dim = 0;
        }
        ModelConfig {
            num_datasets,
            ppt: toggles.ppt,
            ctx_dim: self.ctx_dim,
            frozen_norms_use_running_stats: self.frozen_norms_use_running_stats,
            seed,
            extractor: self.extractor.clone(),
            head,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.toggles.ambient && self.head.ambient_dim == 0 {
            return Err(CliError::Config(
                "toggles.ambient is on but head.ambient_dim is 0".into(),
            ));
        }
        if self.target.is_empty() {
            return Err(CliError::Config("target dataset name is empty".into()));
        }
        self.augment.validate().map_err(CliError::from)?;
        Ok(())
    }
}

/// Reads `path` (or the defaults when `None`), applies overrides and
/// resolves relative paths against the config file's directory.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, CliError> {
    let (mut table, base) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            let t: Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            (t, p.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (Table::new(), PathBuf::new()),
    };
    for s in sets {
        apply_set(&mut table, s)?;
    }
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    if !base.as_os_str().is_empty() {
        for p in [&mut cfg.registry, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `a.b.c=value`; the value is parsed as TOML and falls back to a bare string.
pub fn apply_set(table: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got '{assignment}'")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("malformed key '{key}'")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("'{k}' in '{key}' is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = load_config(
            None,
            &[
                "seed=9".into(),
                "toggles.mixup=true".into(),
                "pretrain.steps=12".into(),
                "target=mine".into(),
                "head.mixup.alpha=0.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert!(cfg.toggles.mixup);
        assert_eq!(cfg.pretrain.steps, Some(12));
        assert_eq!(cfg.target, "mine");
        assert_eq!(cfg.head.mixup.alpha, 0.5);
    }

    #[test]
    fn bad_keys_are_config_errors() {
        assert!(matches!(load_config(None, &["nope=1".into()]), Err(CliError::Config(_))));
        assert!(matches!(load_config(None, &["seed".into()]), Err(CliError::Config(_))));
        assert!(matches!(load_config(None, &["seed.x=1".into()]), Err(CliError::Config(_))));
        let missing = Path::new("/definitely/not/here.toml");
        assert!(matches!(load_config(Some(missing), &[]), Err(CliError::Config(_))));
    }

    #[test]
    fn toggles_shape_the_model() {
        let cfg = RunConfig::default();
        let off = Toggles {
            ppt: false,
            mixup: true,
            ambient: false,
        };
        let m = cfg.model_config(3, off, 1);
        assert!(!m.ppt && m.head.mixup.enabled);
        assert_eq!(m.head.ambient_dim, 0);
        assert_eq!(cfg.model_config(3, Toggles::default(), 1).head.ambient_dim, 8);
    }

    #[test]
    fn stage_overrides_merge_into_defaults() {
        let o = StageOverrides {
            steps: Some(10),
            freeze: Some(vec![]),
            ..Default::default()
        };
        let s = o.apply(StageConfig::finetune("t", true));
        assert_eq!(s.steps, 10);
        assert!(s.freeze.is_empty());
        assert_eq!(s.max_lr, 0.001);
    }
}
