use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use resmoe_core::macs::count_macs_with_k;
use resmoe_core::model::ModelConfig;
use resmoe_core::moe::EvalMode;
use resmoe_core::scalar::Scalar;

use resmoe::analyze::analyze;
use resmoe::checkpoint::Checkpoint;
use resmoe::config::{Precision, RunConfig};
use resmoe::data::load_datasets;
use resmoe::report;
use resmoe::sweep::sweep;
use resmoe::train::{evaluate, train};
use resmoe::{Error, Result};

/// Environment variable forcing 64-bit single-threaded deterministic mode
/// regardless of the configured precision.
const DETERMINISTIC_ENV: &str = "RESMOE_DETERMINISTIC";

#[derive(Parser)]
#[command(name = "resmoe", about = "Sparsely-gated MoE residual networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration to start from.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => match self.preset {
                Preset::Desk => RunConfig::desk_preset(),
                Preset::Full => RunConfig::full_preset(),
            },
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        if std::env::var(DETERMINISTIC_ENV).map_or(false, |v| v == "1") {
            cfg.train.precision = Precision::F64;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint + metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Skip the checkpoint/config hash check when resuming.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// sparse | dense | forced:<i>
        #[arg(long, default_value = "sparse")]
        mode: String,
        #[arg(long)]
        force: bool,
    },
    /// Emit specialization, correlation and gate-logit reports.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Print the MAC/parameter budget for baseline and MoE at k = 1..N.
    Macs {
        #[command(flatten)]
        common: Common,
    },
    /// Run one config across several seeds and aggregate.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seed list.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
}

fn parse_mode(s: &str) -> Result<EvalMode> {
    match s {
        "sparse" => Ok(EvalMode::Sparse),
        "dense" => Ok(EvalMode::Dense),
        _ => match s.strip_prefix("forced:") {
            Some(i) => i
                .parse()
                .map(EvalMode::Forced)
                .map_err(|_| Error::Config(format!("bad forced expert index in `{s}`"))),
            None => Err(Error::Config(format!(
                "mode must be sparse, dense or forced:<i>, got `{s}`"
            ))),
        },
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs/run"))
}

fn cmd_train(common: &Common, resume: Option<&Path>, force: bool) -> Result<()> {
    let cfg = common.resolve()?;
    let (train_ds, eval_ds) = load_datasets(&cfg)?;
    let resume = match resume {
        Some(path) => Some(Checkpoint::load(path, Some(&cfg), force)?),
        None => None,
    };

    fn run<S: Scalar>(
        cfg: &RunConfig,
        train_ds: &resmoe::data::Dataset,
        eval_ds: &resmoe::data::Dataset,
        resume: Option<&Checkpoint>,
    ) -> Result<()> {
        let outcome = train::<S>(cfg, train_ds, resume)?;
        let (mut model, _, _) = outcome.checkpoint.restore::<S>(cfg)?;
        let eval = evaluate(&mut model, eval_ds, cfg.train.batch_size, EvalMode::Sparse)?;
        let dir = out_dir(cfg);
        outcome.checkpoint.save(&dir.join("checkpoint.bin"))?;
        report::write(&dir.join("metrics.csv"), &report::metrics_log_csv(&outcome.log))?;
        report::write(
            &dir.join("summary.txt"),
            &report::run_summary(eval.accuracy, eval.utilization.as_ref(), &outcome.log),
        )?;
        println!(
            "trained {} epochs, eval accuracy {:.4}, artifacts in {}",
            outcome.log.len(),
            eval.accuracy,
            dir.display()
        );
        Ok(())
    }

    match cfg.train.precision {
        Precision::F32 => run::<f32>(&cfg, &train_ds, &eval_ds, resume.as_ref()),
        Precision::F64 => run::<f64>(&cfg, &train_ds, &eval_ds, resume.as_ref()),
    }
}

fn cmd_eval(common: &Common, ckpt_path: &Path, mode: &str, force: bool) -> Result<()> {
    let cfg = common.resolve()?;
    let mode = parse_mode(mode)?;
    let (_, eval_ds) = load_datasets(&cfg)?;
    let ckpt = Checkpoint::load(ckpt_path, Some(&cfg), force)?;

    fn run<S: Scalar>(
        cfg: &RunConfig,
        ckpt: &Checkpoint,
        ds: &resmoe::data::Dataset,
        mode: EvalMode,
    ) -> Result<()> {
        let (mut model, _, _) = ckpt.restore::<S>(cfg)?;
        let eval = evaluate(&mut model, ds, cfg.train.batch_size, mode)?;
        println!("accuracy={}", eval.accuracy);
        if let Some(u) = &eval.utilization {
            println!(
                "cv_imp={} cv_act={} live_experts={}",
                u.cv_imp, u.cv_act, u.live_experts
            );
        }
        if let Some(out) = &cfg.out {
            report::write(
                &out.join("eval_summary.txt"),
                &report::run_summary(eval.accuracy, eval.utilization.as_ref(), &[]),
            )?;
        }
        Ok(())
    }

    match cfg.train.precision {
        Precision::F32 => run::<f32>(&cfg, &ckpt, &eval_ds, mode),
        Precision::F64 => run::<f64>(&cfg, &ckpt, &eval_ds, mode),
    }
}

fn cmd_analyze(common: &Common, ckpt_path: &Path, force: bool) -> Result<()> {
    let cfg = common.resolve()?;
    let (_, eval_ds) = load_datasets(&cfg)?;
    let ckpt = Checkpoint::load(ckpt_path, Some(&cfg), force)?;

    fn run<S: Scalar>(
        cfg: &RunConfig,
        ckpt: &Checkpoint,
        ds: &resmoe::data::Dataset,
    ) -> Result<()> {
        let a = analyze::<S>(ckpt, cfg, ds, cfg.train.batch_size)?;
        let dir = out_dir(cfg);
        report::write(
            &dir.join("specialization.csv"),
            &report::specialization_csv(&a.specialization, &ds.class_names),
        )?;
        report::write(&dir.join("correlation.csv"), &report::correlation_csv(&a.correlation))?;
        report::write(&dir.join("gate_logits.csv"), &report::gate_logits_csv(&a.records))?;
        println!(
            "sparse accuracy {:.4}; MoE >= best forced expert on {}/{} classes; reports in {}",
            a.sparse_accuracy,
            a.specialization.moe_at_least_best,
            a.specialization.classes_scored,
            dir.display()
        );
        Ok(())
    }

    match cfg.train.precision {
        Precision::F32 => run::<f32>(&cfg, &ckpt, &eval_ds),
        Precision::F64 => run::<f64>(&cfg, &ckpt, &eval_ds),
    }
}

fn cmd_macs(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let mc = cfg.model_config()?;
    let mut text = String::new();

    let mut show = |label: &str, mc: &ModelConfig, k: Option<usize>| -> Result<()> {
        let rep = count_macs_with_k(mc, k)?;
        text.push_str(&format!(
            "{label}: {:.4} GMac, {} params\n",
            rep.total_gmac(),
            rep.param_count
        ));
        for c in &rep.components {
            text.push_str(&format!("  {:<18} {:>12} macs {:>10} params\n", c.name, c.macs, c.params));
        }
        Ok(())
    };

    let baseline = ModelConfig {
        moe: None,
        ..mc.clone()
    };
    show("baseline", &baseline, None)?;
    if let Some(moe) = &mc.moe {
        for k in 1..=moe.num_experts {
            show(&format!("moe k={k}"), &mc, Some(k))?;
        }
    }
    print!("{text}");
    if let Some(out) = &cfg.out {
        report::write(&out.join("macs.txt"), &text)?;
    }
    Ok(())
}

fn cmd_sweep(common: &Common, seeds: &str) -> Result<()> {
    let cfg = common.resolve()?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad seed `{s}`")))
        })
        .collect::<Result<_>>()?;
    let (train_ds, eval_ds) = load_datasets(&cfg)?;
    let result = match cfg.train.precision {
        Precision::F32 => sweep::<f32>(&cfg, &seeds, &train_ds, &eval_ds)?,
        Precision::F64 => sweep::<f64>(&cfg, &seeds, &train_ds, &eval_ds)?,
    };
    for r in &result.per_seed {
        println!(
            "seed {}: accuracy {:.4} live_experts {:?}",
            r.seed, r.accuracy, r.live_experts
        );
    }
    println!(
        "accuracy {:.4} ± {:.4} over {} seeds",
        result.mean_accuracy,
        result.std_accuracy,
        result.per_seed.len()
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train {
            common,
            resume,
            force,
        } => cmd_train(common, resume.as_deref(), *force),
        Cmd::Eval {
            common,
            checkpoint,
            mode,
            force,
        } => cmd_eval(common, checkpoint, mode, *force),
        Cmd::Analyze {
            common,
            checkpoint,
            force,
        } => cmd_analyze(common, checkpoint, *force),
        Cmd::Macs { common } => cmd_macs(common),
        Cmd::Sweep { common, seeds } => cmd_sweep(common, seeds),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
