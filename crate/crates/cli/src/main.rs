use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hwm::blocks::Variant;
use hwm::evalbench::{EvalReport, ReportTable};
use hwm::run::{self, ParamRow, RunConfig, Source};

#[derive(Parser)]
#[command(name = "hwm", version, about = "Action-conditioned video world models on a synthetic latent world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes config.json, metrics.tsv and checkpoint.hwmc to the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Predict futures for fresh episodes; writes episode files and PNGs.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Defaults to `<out_dir>/samples`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Score held-out episodes against the oracle future.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the world's own dynamics instead of a checkpoint.
        #[arg(long)]
        oracle: bool,
    },
    /// Throughput and memory of the configured model.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Bench all four block variants of the configured paradigm.
        #[arg(long)]
        all_variants: bool,
    },
    /// Parameter counts; a table of every preset unless --preset is given.
    Params {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// One of masked-{base,split,modshare,fullshare}, flow-{...}.
    #[arg(long)]
    preset: Option<String>,
    /// Use the full-scale model instead of the toy one.
    #[arg(long)]
    full_scale: bool,
    /// JSON run config; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `world.G=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long)]
    json: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(_), Some(_)) => bail!("--config and --preset are mutually exclusive"),
            (Some(path), None) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RunConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            (None, preset) => RunConfig::preset(preset.as_deref().unwrap_or("masked-base"), self.full_scale)?,
        };
        for s in &self.sets {
            cfg.set(s)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_weights(cfg: &RunConfig, checkpoint: &Option<PathBuf>) -> Result<hwm::train::Checkpoint> {
    let path = checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
    if !path.exists() {
        bail!("checkpoint {} not found; run `hwm train` first or pass --checkpoint", path.display());
    }
    Ok(cfg.load_params(&path).with_context(|| format!("loading {}", path.display()))?)
}

fn print_reports(reports: &[EvalReport], json: bool) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(reports)?);
    } else {
        print!("{}", ReportTable(reports));
    }
    Ok(())
}

fn print_params(rows: &[ParamRow], json: bool) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(rows)?);
        return Ok(());
    }
    println!("{:<18} {:>14} {:>16}", "preset", "toy", "full (B)");
    for r in rows {
        println!("{:<18} {:>14} {:>16.4}", r.preset, r.toy, r.full as f64 / 1e9);
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { common, resume } => {
            let cfg = common.resolve()?;
            let summary = run::train(&cfg, resume)?;
            if common.json {
                println!(
                    "{}",
                    serde_json::json!({
                        "steps": summary.steps,
                        "final_loss": summary.final_loss,
                        "skipped_steps": summary.skipped_steps,
                        "checkpoint": summary.checkpoint,
                        "metrics": summary.metrics,
                    })
                );
            } else {
                println!("trained {} for {} steps, final loss {:.6}", cfg.name(), summary.steps, summary.final_loss);
                println!("checkpoint: {}", summary.checkpoint.display());
                println!("metrics:    {}", summary.metrics.display());
            }
        }
        Command::Sample { common, checkpoint, count, dir } => {
            let cfg = common.resolve()?;
            let ck = load_weights(&cfg, &checkpoint)?;
            let dir = dir.unwrap_or_else(|| cfg.out_dir.join("samples"));
            let preds = run::predict(&cfg, Source::Weights(&ck.params), &run::sample_seeds(&cfg, count), cfg.seed)?;
            let mut files = run::write_samples(&dir, &preds)?;
            let config = dir.join("config.json");
            std::fs::write(&config, cfg.to_json()?).with_context(|| format!("writing {}", config.display()))?;
            files.push(config);
            if common.json {
                println!("{}", serde_json::to_string_pretty(&files)?);
            } else {
                for f in files {
                    println!("{}", f.display());
                }
            }
        }
        Command::Eval { common, checkpoint, oracle } => {
            let cfg = common.resolve()?;
            let report = if oracle {
                run::evaluate(&cfg, Source::Oracle)?
            } else {
                let ck = load_weights(&cfg, &checkpoint)?;
                run::evaluate(&cfg, Source::Weights(&ck.params))?
            };
            std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
            std::fs::write(cfg.out_dir.join("eval.json"), report.to_json()?)?;
            std::fs::write(cfg.out_dir.join("eval_config.json"), cfg.to_json()?)?;
            print_reports(&[report], common.json)?;
        }
        Command::Bench { common, all_variants } => {
            let cfg = common.resolve()?;
            let mut reports = Vec::new();
            let variants: Vec<Variant> = if all_variants { Variant::ALL.to_vec() } else { vec![cfg.variant()] };
            for v in variants {
                let mut c = cfg.clone();
                c.masked.variant = v;
                c.flow.variant = v;
                reports.push(run::bench(&c)?);
            }
            print_reports(&reports, common.json)?;
        }
        Command::Params { common } => {
            if common.preset.is_none() && common.config.is_none() && common.sets.is_empty() {
                return print_params(&run::params_table()?, common.json);
            }
            let cfg = common.resolve()?;
            let n = cfg.param_count()?;
            if common.json {
                println!("{}", serde_json::json!({ "preset": cfg.name(), "params": n, "billions": n as f64 / 1e9 }));
            } else {
                println!("{}: {n} parameters ({:.4}B)", cfg.name(), n as f64 / 1e9);
            }
        }
    }
    Ok(())
}
