//! The two training stages and target evaluation, shared by the commands.

use roadseg::eval::{ConfusionMatrix, Metrics};
use roadseg::model::{Model, MixupConfig};
use roadseg::rng::stream_id;
use roadseg::scan::registry::{DatasetRegistry, Split};
use roadseg::train::{evaluate, run_stage, ScanSource, StageConfig, StageOptions, StageReport};

use crate::config::{RunConfig, SplitName, Toggles};
use crate::CliError;

/// A configuration bound to its dataset registry.
pub struct Env {
    pub cfg: RunConfig,
    pub registry: DatasetRegistry,
    pub target: usize,
}

impl Env {
    pub fn new(cfg: RunConfig) -> Result<Self, CliError> {
        let registry = DatasetRegistry::load(&cfg.registry)?;
        Self::with_registry(cfg, registry)
    }

    /// Applies the config's sensor overrides to `registry`.
    pub fn with_registry(cfg: RunConfig, registry: DatasetRegistry) -> Result<Self, CliError> {
        let mut entries = registry.entries().to_vec();
        for (name, sensor) in &cfg.sensors {
            let e = entries
                .iter_mut()
                .find(|e| &e.name == name)
                .ok_or_else(|| CliError::Config(format!("sensor override for unknown dataset '{name}'")))?;
            e.sensor = *sensor;
        }
        let registry = DatasetRegistry::new(entries)?;
        let target = registry.resolve(&cfg.target)?;
        Ok(Self { cfg, registry, target })
    }

    pub fn dataset_names(&self) -> Vec<String> {
        self.registry.entries().iter().map(|e| e.name.clone()).collect()
    }

    /// Every dataset except the target, in id order.
    pub fn sources(&self) -> Vec<String> {
        self.registry
            .entries()
            .iter()
            .filter(|e| e.dataset_id != self.target)
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn fresh_model(&self, toggles: Toggles) -> Result<Model<f64>, CliError> {
        let mc = self.cfg.model_config(self.registry.len(), toggles, self.cfg.seed);
        Ok(Model::new(mc)?)
    }

    fn options(&self, stage_tag: u64) -> StageOptions {
        let has_val = !self.registry.entries()[self.target].val.is_empty();
        StageOptions {
            val_dataset: has_val.then_some(self.target),
            augment: self.cfg.augment.clone(),
            seed: stream_id(&[self.cfg.seed, stage_tag]),
        }
    }

    /// Pretraining stage; `datasets` defaults to every registered dataset.
    pub fn pretrain_config(&self, datasets: Option<Vec<String>>) -> StageConfig {
        let all = self.dataset_names();
        let mut s = self.cfg.pretrain.apply(StageConfig::pretrain(all));
        if let Some(d) = datasets {
            s.datasets = d;
            s.weights = None;
        }
        s
    }

    /// Fine-tuning stage on the target. From scratch nothing is frozen.
    pub fn finetune_config(&self, ppt: bool, from_scratch: bool) -> StageConfig {
        let mut s = self.cfg.finetune.apply(StageConfig::finetune(&self.cfg.target, ppt));
        s.datasets = vec![self.cfg.target.clone()];
        if from_scratch {
            s.freeze.clear();
        }
        s
    }

    pub fn pretrain(&self, model: &mut Model<f64>, stage: &StageConfig) -> Result<StageReport, CliError> {
        Ok(run_stage(model, stage, &self.registry, &self.options(1))?)
    }

    /// Fine-tunes in place; `mixup` replaces the model's mixup setting first.
    pub fn finetune(
        &self,
        model: &mut Model<f64>,
        stage: &StageConfig,
        mixup: Option<MixupConfig>,
    ) -> Result<StageReport, CliError> {
        if let Some(m) = mixup {
            model.set_mixup(m)?;
        }
        if model.config().num_datasets != self.registry.len() {
            return Err(CliError::Config(format!(
                "checkpoint knows {} datasets, registry has {}",
                model.config().num_datasets,
                self.registry.len()
            )));
        }
        Ok(run_stage(model, stage, &self.registry, &self.options(2))?)
    }

    pub fn evaluate(&self, model: &Model<f64>, dataset: usize, split: SplitName) -> Result<ConfusionMatrix, CliError> {
        let split = match split {
            SplitName::Train => Split::Train,
            SplitName::Val => Split::Val,
        };
        Ok(evaluate(model, &self.registry, dataset, split, &self.cfg.augment)?)
    }

    pub fn target_metrics(&self, model: &Model<f64>) -> Result<Metrics, CliError> {
        Ok(self.evaluate(model, self.target, SplitName::Val)?.metrics()?)
    }
}
