//! Optimization: mixed-dataset sampling, freezing, and the training loop
//! shared by the pretraining and fine-tuning stages.

mod optim;
mod source;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{eval_normalize, train_augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::eval::{ConfusionMatrix, Metrics};
use crate::graph::{Graph, Mode};
use crate::model::{glob_match, Model, ModelInput, ParamStore};
use crate::rng::{derive_rng, stream_id, Rng};
use crate::scalar::Scalar;
use crate::scan::registry::Split;
use crate::scan::PointScan;

pub use optim::{adamw_step, one_cycle_lr, AdamWConfig, OptimState, Schedule};
pub use source::{MemoryDataset, MemorySource, ScanSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    /// Evaluations without a new best validation mIoU before stopping.
    pub patience: usize,
    pub eval_every: u64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            patience: 10,
            eval_every: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageKind,
    pub steps: u64,
    pub max_lr: f64,
    /// Scans per step.
    pub batch: usize,
    /// Dataset names to draw training scans from.
    pub datasets: Vec<String>,
    /// Per-dataset sampling weights; `None` samples uniformly over all scans.
    pub weights: Option<Vec<f64>>,
    /// Name patterns of parameters to freeze before training.
    pub freeze: Vec<String>,
    pub early_stop: EarlyStopConfig,
    pub optimizer: AdamWConfig,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub augment: bool,
}

/// Freeze patterns of the fine-tuning stage: the extractor and every
/// normalization layer's scale/shift generators. The context table and the
/// rest of the head stay trainable.
pub fn default_finetune_freeze(ppt: bool) -> Vec<String> {
    let mut p = vec!["extractor.*".to_string()];
    if ppt {
        p.push("*.scale_gen.*".into());
        p.push("*.shift_gen.*".into());
    }
    p
}

impl StageConfig {
    pub fn pretrain(datasets: Vec<String>) -> Self {
        Self {
            stage: StageKind::Pretrain,
            steps: 100_000,
            max_lr: 0.002,
            batch: 2,
            datasets,
            weights: None,
            freeze: Vec::new(),
            early_stop: EarlyStopConfig::default(),
            optimizer: AdamWConfig::default(),
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            augment: true,
        }
    }

    pub fn finetune(target: &str, ppt: bool) -> Self {
        Self {
            stage: StageKind::Finetune,
            steps: 7_600,
            max_lr: 0.001,
            datasets: vec![target.to_string()],
            freeze: default_finetune_freeze(ppt),
            ..Self::pretrain(Vec::new())
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            max_lr: self.max_lr,
            total_steps: self.steps,
            pct_start: self.pct_start,
            div_factor: self.div_factor,
            final_div_factor: self.final_div_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.datasets.is_empty() {
            return Err(Error::Config("stage has no datasets".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least one scan".into()));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.datasets.len() || w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(
                    "weights need one non-negative entry per dataset and a positive sum".into(),
                ));
            }
        }
        if self.stage == StageKind::Finetune && self.datasets.len() != 1 {
            return Err(Error::Config("fine-tuning trains on the target dataset only".into()));
        }
        if self.early_stop.enabled && self.early_stop.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Freezes every parameter matching any pattern; returns how many matched.
/// A pattern that matches nothing is an error.
pub fn apply_freeze<T: Scalar>(store: &mut ParamStore<T>, patterns: &[String]) -> Result<usize> {
    for pat in patterns {
        if !store.params().iter().any(|p| glob_match(pat, &p.name)) {
            return Err(Error::Config(format!("freeze pattern '{pat}' matches no parameter")));
        }
    }
    let mut n = 0;
    for p in store.params_mut() {
        if patterns.iter().any(|pat| glob_match(pat, &p.name)) {
            p.frozen = true;
            n += 1;
        }
    }
    Ok(n)
}

/// `(dataset, index)` draws: uniform over the union of all scans, or
/// dataset-by-weight then uniform within the dataset.
pub fn sample_indices(
    sizes: &[(usize, usize)],
    weights: Option<&[f64]>,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize)>> {
    if sizes.is_empty() {
        return Err(Error::Config("no datasets to sample from".into()));
    }
    match weights {
        None => {
            let total: usize = sizes.iter().map(|s| s.1).sum();
            if total == 0 {
                return Err(Error::Config("selected datasets contain no training scans".into()));
            }
            Ok((0..count)
                .map(|_| {
                    let mut u = rng.random_range(0..total);
                    for &(d, n) in sizes {
                        if u < n {
                            return (d, u);
                        }
                        u -= n;
                    }
                    unreachable!("u < total")
                })
                .collect())
        }
        Some(w) => {
            if w.len() != sizes.len() {
                return Err(Error::Config("one weight per dataset required".into()));
            }
            let dist = WeightedIndex::new(w).map_err(|e| Error::Config(format!("dataset weights: {e}")))?;
            (0..count)
                .map(|_| {
                    let (d, n) = sizes[dist.sample(rng)];
                    if n == 0 {
                        return Err(Error::Config(format!("dataset {d} has weight but no scans")));
                    }
                    Ok((d, rng.random_range(0..n)))
                })
                .collect()
        }
    }
}

/// Draws one training batch. Scans are augmented when `augment` is set and
/// otherwise get the deterministic evaluation normalization.
pub fn sample_batch(
    source: &dyn ScanSource,
    datasets: &[usize],
    weights: Option<&[f64]>,
    batch: usize,
    cfg: &AugmentConfig,
    augment: bool,
    rng: &mut Rng,
) -> Result<Vec<PointScan>> {
    let sizes = datasets
        .iter()
        .map(|&d| Ok((d, source.count(d, Split::Train)?)))
        .collect::<Result<Vec<_>>>()?;
    let picks = sample_indices(&sizes, weights, batch, rng)?;
    picks
        .into_iter()
        .map(|(d, i)| {
            let scan = source.load(d, Split::Train, i)?;
            if augment {
                train_augment(scan, cfg, rng)
            } else {
                eval_normalize(scan, cfg)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over a metric that should increase.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn update(&mut self, metric: f64) -> StopDecision {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// Confusion matrix of `model` over one split of one dataset, after the
/// deterministic evaluation normalization.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    source: &dyn ScanSource,
    dataset: usize,
    split: Split,
    augment: &AugmentConfig,
) -> Result<ConfusionMatrix> {
    let sensor = source.sensor(dataset)?;
    let mut cm = ConfusionMatrix::new();
    for i in 0..source.count(dataset, split)? {
        let scan = eval_normalize(source.load(dataset, split, i)?, augment)?;
        let input = ModelInput::new(&[(&scan, &sensor)])?;
        let (pred, _) = model.predict(&input)?;
        cm.accumulate(&scan.labels, &pred)?;
    }
    Ok(cm)
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: u64,
    pub lr: f64,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    pub val: Option<Metrics>,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("step,lr,train_loss,val_miou,val_acc\n");
    for r in rows {
        let (miou, acc) = match &r.val {
            Some(m) => (crate::eval::pct(m.miou), crate::eval::pct(m.acc)),
            None => (String::new(), String::new()),
        };
        s.push_str(&format!("{},{:.6e},{:.6},{miou},{acc}\n", r.step, r.lr, r.train_loss));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOptions {
    /// Dataset whose validation split drives checkpoint selection and early stopping.
    pub val_dataset: Option<usize>,
    pub augment: AugmentConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub history: Vec<HistoryRow>,
    pub steps_run: u64,
    pub best_step: Option<u64>,
    pub best: Option<Metrics>,
    pub stopped_early: bool,
}

fn stage_tag(kind: StageKind) -> u64 {
    match kind {
        StageKind::Pretrain => 1,
        StageKind::Finetune => 2,
    }
}

/// Runs one training stage in place.
///
/// Each step samples a batch, computes the (optionally mixed) cross-entropy
/// over labeled points, and takes an AdamW step at the one-cycle rate. When a
/// validation dataset is given, the model is evaluated every `eval_every`
/// steps and at the end; the best-mIoU weights are restored on return. A
/// non-finite loss or gradient restores the last good weights and fails.
pub fn run_stage<T: Scalar>(
    model: &mut Model<T>,
    cfg: &StageConfig,
    source: &dyn ScanSource,
    opts: &StageOptions,
) -> Result<StageReport> {
    cfg.validate()?;
    opts.augment.validate()?;
    let datasets = cfg
        .datasets
        .iter()
        .map(|n| source.resolve(n))
        .collect::<Result<Vec<_>>>()?;
    if cfg.stage == StageKind::Finetune && opts.val_dataset.is_some_and(|v| v != datasets[0]) {
        return Err(Error::Config("fine-tuning must train on the validation (target) dataset".into()));
    }
    apply_freeze(model.store_mut(), &cfg.freeze)?;
    let schedule = cfg.schedule();
    let mut state = OptimState::new(model.store(), cfg.optimizer);
    let mut stopper = EarlyStopping::new(cfg.early_stop.patience);
    let mut best: Model<T> = model.clone();
    let mut report = StageReport {
        history: Vec::new(),
        steps_run: 0,
        best_step: None,
        best: None,
        stopped_early: false,
    };
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let tag = stage_tag(cfg.stage);

    for step in 1..=cfg.steps {
        let lr = one_cycle_lr(step - 1, &schedule);
        let mut rng = derive_rng(opts.seed, stream_id(&[tag, step]));
        let scans = sample_batch(
            source,
            &datasets,
            cfg.weights.as_deref(),
            cfg.batch,
            &opts.augment,
            cfg.augment,
            &mut rng,
        )?;
        let sensors = scans
            .iter()
            .map(|s| source.sensor(s.dataset_id))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<_> = scans.iter().zip(&sensors).collect();
        let input = ModelInput::new(&pairs)?;
        if input.labeled_rows().is_empty() {
            log::warn!("step {step}: batch has no labeled points, skipped");
            continue;
        }
        let mut g = Graph::new();
        let (loss, out) = model.loss(&mut g, &input, Mode::Train, Some(&mut rng))?;
        let loss_value = g.value(loss).data()[0].to_f64_lossy();
        if !loss_value.is_finite() {
            *model = best;
            return Err(Error::Diverged { step, loss: loss_value });
        }
        g.backward(loss)?;
        let grads: Vec<_> = out.params.iter().map(|&v| g.grad(v).cloned()).collect();
        if let Err(e) = adamw_step(model.store_mut(), &grads, &mut state, lr) {
            *model = best;
            return Err(e);
        }
        loss_sum += loss_value;
        loss_n += 1;
        report.steps_run = step;

        let due = cfg.early_stop.eval_every > 0 && step % cfg.early_stop.eval_every == 0;
        if !(due || step == cfg.steps) {
            continue;
        }
        let val = match opts.val_dataset {
            Some(d) if source.count(d, Split::Val)? > 0 => {
                Some(evaluate(model, source, d, Split::Val, &opts.augment)?.metrics()?)
            }
            _ => None,
        };
        report.history.push(HistoryRow {
            step,
            lr,
            train_loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN },
            val: val.clone(),
        });
        log::info!(
            "{:?} step {step}/{}: loss {:.4}{}",
            cfg.stage,
            cfg.steps,
            loss_sum / loss_n.max(1) as f64,
            val.as_ref().map_or(String::new(), |m| format!(", val mIoU {:.2}%", 100.0 * m.miou))
        );
        (loss_sum, loss_n) = (0.0, 0);
        match val {
            Some(m) => match stopper.update(m.miou) {
                StopDecision::Improved => {
                    best = model.clone();
                    report.best_step = Some(step);
                    report.best = Some(m);
                }
                StopDecision::Stop if cfg.early_stop.enabled => {
                    report.stopped_early = true;
                    break;
                }
                _ => {}
            },
            None => {
                best = model.clone();
                report.best_step = Some(step);
            }
        }
    }
    *model = best;
    Ok(report)
}
