//! Command-line pipelines around the `roadseg` library.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 for configuration and
//! usage errors.

pub mod ablate;
pub mod config;
pub mod convert;
pub mod pipeline;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use roadseg::eval::Metrics;
use roadseg::model::{load_checkpoint, save_checkpoint};
use roadseg::synth::make_benchmark;
use roadseg::train::history_csv;

use crate::config::{load_config, RunConfig};
use crate::pipeline::Env;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(roadseg::Error),
}

impl From<roadseg::Error> for CliError {
    fn from(e: roadseg::Error) -> Self {
        match e {
            roadseg::Error::Config(m) => CliError::Config(m),
            e => CliError::Core(e),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Core(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "roadseg", version, about = "Two-stage LiDAR segmentation: pretrain, fine-tune, evaluate, ablate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (also seeds benchmark generation).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override a config value, e.g. `--set pretrain.steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rewrite the configured registry's scans into target-class space.
    Convert,
    /// Generate the synthetic three-domain benchmark.
    Bench,
    /// Train on the mixture of registered datasets.
    Pretrain,
    /// Fine-tune a pretrained checkpoint on the target dataset.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train every parameter from a fresh initialization instead.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Evaluate a checkpoint on a validation split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the ablation grids on the synthetic benchmark.
    Ablate,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(cli.config.as_deref(), &cli.sets)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.bench.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Convert => cmd_convert(&cfg),
        Command::Bench => cmd_bench(&cfg, cli.out.as_deref()),
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::Finetune {
            checkpoint,
            from_scratch,
        } => cmd_finetune(&cfg, checkpoint.as_deref(), *from_scratch),
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint.as_deref()).map(|_| ()),
        Command::Ablate => cmd_ablate(&cfg).map(|_| ()),
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| CliError::Runtime(format!("{}: {e}", d.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn cmd_convert(cfg: &RunConfig) -> Result<(), CliError> {
    let registry = roadseg::scan::registry::DatasetRegistry::load(&cfg.registry)?;
    let s = convert::convert(&registry, &cfg.out_dir)?;
    println!(
        "converted {} scans ({} points, {} dropped) into {}",
        s.scans,
        s.points,
        s.dropped,
        cfg.out_dir.display()
    );
    Ok(())
}

/// Writes to `--out`, else next to the configured registry path.
pub fn cmd_bench(cfg: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let dir = match out {
        Some(o) => o.to_path_buf(),
        None => cfg.registry.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let path = make_benchmark(&dir, &cfg.bench)?;
    println!("benchmark registry written to {}", path.display());
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let env = Env::new(cfg.clone())?;
    let mut model = env.fresh_model(cfg.toggles)?;
    let stage = env.pretrain_config(None);
    let report = env.pretrain(&mut model, &stage)?;
    save_checkpoint(&model, &cfg.out_dir.join("pretrain.ckpt"))?;
    write(&cfg.out_dir.join("pretrain_history.csv"), &history_csv(&report.history))?;
    report_best("pretrain", &report.best, report.best_step);
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig, checkpoint: Option<&Path>, from_scratch: bool) -> Result<(), CliError> {
    let env = Env::new(cfg.clone())?;
    let mut model = if from_scratch {
        env.fresh_model(cfg.toggles)?
    } else {
        let path = checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.out_dir.join("pretrain.ckpt"));
        if !path.exists() {
            return Err(CliError::Config(format!(
                "no pretrained checkpoint at {}; pass --checkpoint or --from-scratch",
                path.display()
            )));
        }
        load_checkpoint(&path)?
    };
    let mc = model.config().clone();
    if mc.ppt != cfg.toggles.ppt || (mc.head.ambient_dim > 0) != cfg.toggles.ambient {
        log::warn!("checkpoint architecture differs from the configured toggles; using the checkpoint's");
    }
    let mut mixup = cfg.head.mixup.clone();
    mixup.enabled = cfg.toggles.mixup;
    let stage = env.finetune_config(mc.ppt, from_scratch);
    let report = env.finetune(&mut model, &stage, Some(mixup))?;
    save_checkpoint(&model, &cfg.out_dir.join("finetune.ckpt"))?;
    write(&cfg.out_dir.join("finetune_history.csv"), &history_csv(&report.history))?;
    report_best("finetune", &report.best, report.best_step);
    Ok(())
}

fn report_best(stage: &str, best: &Option<Metrics>, step: Option<u64>) {
    match (best, step) {
        (Some(m), Some(s)) => println!("{stage}: best validation at step {s}\n{}", m.summary()),
        _ => println!("{stage}: finished (no validation split)"),
    }
}

/// Evaluates `--checkpoint` (default `<out>/finetune.ckpt`) and writes `eval.csv` / `eval.txt`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Metrics, CliError> {
    let env = Env::new(cfg.clone())?;
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("finetune.ckpt"));
    let model = load_checkpoint(&path)?;
    let name = cfg.eval.dataset.clone().unwrap_or_else(|| cfg.target.clone());
    let dataset = roadseg::train::ScanSource::resolve(&env.registry, &name)?;
    let m = env.evaluate(&model, dataset, cfg.eval.split)?.metrics()?;
    let split = match cfg.eval.split {
        config::SplitName::Train => "train",
        config::SplitName::Val => "val",
    };
    let csv = format!("dataset,split,{}\n{name},{split},{}\n", Metrics::csv_header(), m.csv_row());
    write(&cfg.out_dir.join("eval.csv"), &csv)?;
    let text = format!("{name} ({split})\n{}", m.summary());
    write(&cfg.out_dir.join("eval.txt"), &text)?;
    print!("{text}");
    Ok(m)
}

/// Runs the configured ablation tables and writes one CSV per table, the raw
/// `results.csv` and a `summary.txt`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<ablate::AblationReport, CliError> {
    let mut cfg = cfg.clone();
    if cfg.ablate.generate_benchmark {
        cfg.registry = make_benchmark(&cfg.out_dir.join("bench"), &cfg.bench)?;
    }
    let env = Env::new(cfg.clone())?;
    let report = ablate::run_ablation(&env, &cfg.ablate.tables)?;
    for t in &report.tables {
        write(&cfg.out_dir.join(format!("table_{}.csv", t.kind.name())), &t.csv())?;
    }
    write(&cfg.out_dir.join("results.csv"), &report.results_csv())?;
    let summary = report.summary();
    write(&cfg.out_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(report)
}
