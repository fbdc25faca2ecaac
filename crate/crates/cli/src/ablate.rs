//! Ablation grids: pretraining corpus, prompt normalization, mixup and ambient.
//!
//! Every cell is a validation score on the target. Runs that several tables
//! share (same corpus, same toggles) are trained once and reused; since each
//! run is a pure function of (config, seed), reuse does not change results.

use std::collections::BTreeMap;

use roadseg::eval::{pct, Metrics};
use roadseg::model::Model;

use crate::config::{AblationTable, Toggles};
use crate::pipeline::Env;
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub label: String,
    pub fine_tuned: bool,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub kind: AblationTable,
    /// Header of the first column.
    pub axis: String,
    /// Deltas are relative to the first row.
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub tables: Vec<Table>,
}

type ToggleKey = (bool, bool, bool);

fn key(t: Toggles) -> ToggleKey {
    (t.ppt, t.mixup, t.ambient)
}

#[derive(Default)]
struct Cache {
    pretrained: BTreeMap<(Vec<String>, ToggleKey), (Model<f64>, Metrics)>,
    finetuned: BTreeMap<(Vec<String>, ToggleKey), Metrics>,
    scratch: BTreeMap<ToggleKey, Metrics>,
}

struct Runner<'a> {
    env: &'a Env,
    cache: Cache,
}

impl Runner<'_> {
    fn pretrained(&mut self, datasets: &[String], t: Toggles) -> Result<&(Model<f64>, Metrics), CliError> {
        let k = (datasets.to_vec(), key(t));
        if !self.cache.pretrained.contains_key(&k) {
            log::info!("pretraining on {datasets:?} with {t:?}");
            let mut model = self.env.fresh_model(t)?;
            let stage = self.env.pretrain_config(Some(datasets.to_vec()));
            self.env.pretrain(&mut model, &stage)?;
            let m = self.env.target_metrics(&model)?;
            self.cache.pretrained.insert(k.clone(), (model, m));
        }
        Ok(&self.cache.pretrained[&k])
    }

    fn score(&mut self, datasets: &[String], t: Toggles, fine_tuned: bool) -> Result<Metrics, CliError> {
        if !fine_tuned {
            return Ok(self.pretrained(datasets, t)?.1.clone());
        }
        let k = (datasets.to_vec(), key(t));
        if let Some(m) = self.cache.finetuned.get(&k) {
            return Ok(m.clone());
        }
        let mut model = self.pretrained(datasets, t)?.0.clone();
        log::info!("fine-tuning the {datasets:?} model");
        let stage = self.env.finetune_config(t.ppt, false);
        let mixup = model.config().head.mixup.clone();
        self.env.finetune(&mut model, &stage, Some(mixup))?;
        let m = self.env.target_metrics(&model)?;
        self.cache.finetuned.insert(k, m.clone());
        Ok(m)
    }

    /// Full model trained on the target alone.
    fn target_only(&mut self, t: Toggles) -> Result<Metrics, CliError> {
        if let Some(m) = self.cache.scratch.get(&key(t)) {
            return Ok(m.clone());
        }
        log::info!("training on the target only");
        let mut model = self.env.fresh_model(t)?;
        let stage = self.env.finetune_config(t.ppt, true);
        self.env.finetune(&mut model, &stage, None)?;
        let m = self.env.target_metrics(&model)?;
        self.cache.scratch.insert(key(t), m.clone());
        Ok(m)
    }

    fn dataset_table(&mut self) -> Result<Table, CliError> {
        let t = Toggles {
            ppt: true,
            mixup: false,
            ambient: self.env.cfg.toggles.ambient,
        };
        let combined = self.env.dataset_names();
        let sources = self.env.sources();
        let mut rows = vec![Row {
            label: "Target Only".into(),
            fine_tuned: false,
            metrics: self.target_only(t)?,
        }];
        for fine_tuned in [false, true] {
            for s in &sources {
                rows.push(Row {
                    label: format!("{s} Only"),
                    fine_tuned,
                    metrics: self.score(std::slice::from_ref(s), t, fine_tuned)?,
                });
            }
            rows.push(Row {
                label: "Combined".into(),
                fine_tuned,
                metrics: self.score(&combined, t, fine_tuned)?,
            });
        }
        Ok(Table {
            kind: AblationTable::Dataset,
            axis: "Pre-training Dataset".into(),
            rows,
        })
    }

    /// Toggle × fine-tuned grid on the combined corpus.
    fn toggle_table(&mut self, kind: AblationTable) -> Result<Table, CliError> {
        let (axis, set): (&str, fn(&mut Toggles, bool)) = match kind {
            AblationTable::Ppt => ("PPT Enabled", |t, v| t.ppt = v),
            AblationTable::Mixup => ("MM Enabled", |t, v| t.mixup = v),
            AblationTable::Ambient => ("Uses Ambient", |t, v| t.ambient = v),
            AblationTable::Dataset => unreachable!("dataset axis has its own table"),
        };
        // axes not under study: ppt and ambient on, mixup only alongside ppt
        let base = Toggles {
            ppt: true,
            mixup: kind == AblationTable::Ppt,
            ambient: true,
        };
        let combined = self.env.dataset_names();
        let mut rows = Vec::new();
        for fine_tuned in [false, true] {
            for on in [false, true] {
                let mut t = base;
                set(&mut t, on);
                rows.push(Row {
                    label: mark(on).into(),
                    fine_tuned,
                    metrics: self.score(&combined, t, fine_tuned)?,
                });
            }
        }
        Ok(Table {
            kind,
            axis: axis.into(),
            rows,
        })
    }
}

fn mark(v: bool) -> &'static str {
    if v {
        "yes"
    } else {
        "no"
    }
}

pub fn run_ablation(env: &Env, tables: &[AblationTable]) -> Result<AblationReport, CliError> {
    let mut runner = Runner {
        env,
        cache: Cache::default(),
    };
    let mut out = Vec::new();
    for &kind in tables {
        out.push(match kind {
            AblationTable::Dataset => runner.dataset_table()?,
            k => runner.toggle_table(k)?,
        });
    }
    Ok(AblationReport { tables: out })
}

fn with_delta(v: f64, base: f64, is_base: bool) -> String {
    if is_base {
        pct(v)
    } else {
        format!("{} ({:+.2})", pct(v), 100.0 * (v - base))
    }
}

impl Table {
    /// `axis,Fine-Tuned,mIoU (%),Acc (%)` with changes against the first row in parentheses.
    pub fn csv(&self) -> String {
        let mut s = format!("{},Fine-Tuned,mIoU (%),Acc (%)\n", self.axis);
        let base = &self.rows[0].metrics;
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.label,
                mark(r.fine_tuned),
                with_delta(r.metrics.miou, base.miou, i == 0),
                with_delta(r.metrics.acc, base.acc, i == 0)
            ));
        }
        s
    }

    pub fn text(&self) -> String {
        let base = &self.rows[0].metrics;
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                [
                    r.label.clone(),
                    mark(r.fine_tuned).into(),
                    with_delta(r.metrics.miou, base.miou, i == 0),
                    with_delta(r.metrics.acc, base.acc, i == 0),
                ]
            })
            .collect();
        let head = [self.axis.clone(), "Fine-Tuned".into(), "mIoU (%)".into(), "Acc (%)".into()];
        let widths: Vec<usize> = (0..4)
            .map(|c| cells.iter().map(|r| r[c].len()).chain([head[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |r: &[String; 4]| {
            let cols: Vec<String> = r.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
            cols.join(" | ").trim_end().to_string() + "\n"
        };
        let mut s = line(&head);
        s.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
        s.push('\n');
        for r in &cells {
            s.push_str(&line(r));
        }
        s
    }
}

impl AblationReport {
    /// Raw numbers of every row, per-class IoU included.
    pub fn results_csv(&self) -> String {
        let mut s = format!("table,row,fine_tuned,{}\n", Metrics::csv_header());
        for t in &self.tables {
            for r in &t.rows {
                s.push_str(&format!("{},{},{},{}\n", t.kind.name(), r.label, mark(r.fine_tuned), r.metrics.csv_row()));
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for t in &self.tables {
            s.push_str(&format!("[{}]\n", t.kind.name()));
            s.push_str(&t.text());
            s.push('\n');
        }
        s
    }

    pub fn table(&self, kind: AblationTable) -> Option<&Table> {
        self.tables.iter().find(|t| t.kind == kind)
    }
}
