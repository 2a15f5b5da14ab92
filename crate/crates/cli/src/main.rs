use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hierenv::pipeline::{self, Strategy};
use hierenv::{Error, RunConfig};
use serde_json::json;

/// Hierarchical environment inference and invariant graph classification.
///
/// Configuration is read from `--config` (flat TOML), then `HIERENV_<KEY>`
/// environment variables, then `--set key=value` and the dedicated flags.
#[derive(Debug, Parser)]
#[command(name = "hierenv", version)]
struct Cli {
    /// Flat TOML config file.
    #[arg(long, global = true, env = "HIERENV_CONFIG_FILE")]
    config: Option<PathBuf>,

    /// Master seed for all random streams.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Environment strategy: erm, real, hier, rand#k or infer-flat#k.
    #[arg(long, global = true)]
    strategy: Option<String>,

    /// Seed list for sweeps, e.g. `1..5` or `1,3,7`.
    #[arg(long, global = true)]
    seeds: Option<String>,

    /// Override any config key, e.g. `--set lambda=1.0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset and its manifest.
    GenerateData,
    /// Train the environment inference stage.
    TrainEnv,
    /// Assign environments to the training graphs.
    AssignEnv,
    /// Train the invariant classifier on assigned environments.
    TrainInv,
    /// Run every stage end to end.
    Pipeline,
    /// Predict the test split and write metrics.
    Evaluate,
    /// Compare environment distributions with K-S statistics.
    Diversity,
    /// Finite-difference check of all training losses.
    Gradcheck,
    /// Run several strategies over the seed list.
    Ablation {
        /// Comma-separated strategies.
        #[arg(long, default_value = "erm,rand#2,infer-flat#2,hier")]
        strategies: String,
    },
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = spec.split_once("..") {
        let a: u64 = a.trim().parse().context("seed range start")?;
        let b: u64 = b.trim().parse().context("seed range end")?;
        if b < a {
            bail!("empty seed range {spec}");
        }
        return Ok((a..=b).collect());
    }
    spec.split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed {s:?}")))
        .collect()
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let quote = |s: &str| serde_json::to_string(s).expect("string serializes");
    if let Some(seed) = cli.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    if let Some(dir) = &cli.out {
        out.push(("out".into(), quote(&dir.to_string_lossy())));
    }
    if let Some(s) = &cli.strategy {
        out.push(("strategy".into(), quote(s)));
    }
    if let Some(s) = &cli.seeds {
        out.push(("seeds".into(), format!("{:?}", parse_seeds(s)?)));
    }
    Ok(out)
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides(cli)?)?;
    log::info!("output directory {}", cfg.out.display());
    let value = match &cli.command {
        Command::GenerateData => json!({ "manifest": pipeline::cmd_generate_data(&cfg)? }),
        Command::TrainEnv => {
            let t = pipeline::cmd_train_env(&cfg)?;
            json!({ "best_epoch": t.best_epoch, "epochs": t.history.len() })
        }
        Command::AssignEnv => {
            let a = pipeline::cmd_assign_env(&cfg)?;
            json!({ "graphs": a.records.len(), "num_envs": a.num_envs() })
        }
        Command::TrainInv => {
            let c = pipeline::cmd_train_inv(&cfg)?;
            json!({ "best_epoch": c.best_epoch, "best_val_accuracy": c.best_val_accuracy })
        }
        Command::Pipeline => serde_json::to_value(pipeline::cmd_pipeline(&cfg)?.metrics)?,
        Command::Evaluate => serde_json::to_value(pipeline::cmd_evaluate(&cfg)?.metrics)?,
        Command::Diversity => {
            let r = pipeline::cmd_diversity(&cfg)?;
            json!({ "strategy": r.strategy, "inter_env_distance": r.inter_env_distance, "skipped": r.skipped })
        }
        Command::Gradcheck => serde_json::to_value(pipeline::cmd_gradcheck(&cfg)?)?,
        Command::Ablation { strategies } => {
            let list = strategies
                .split(',')
                .map(|s| Strategy::parse(s.trim()))
                .collect::<hierenv::Result<Vec<_>>>()?;
            let report = pipeline::cmd_ablation(&cfg, &list)?;
            serde_json::to_value(&report.rows)?
        }
    };
    Ok(value)
}

fn error_record(err: &anyhow::Error) -> (serde_json::Value, u8) {
    let (kind, code, path) = match err.downcast_ref::<Error>() {
        Some(Error::MissingArtifact(p)) => ("missing_artifact", 3, Some(p.display().to_string())),
        Some(Error::Config(_)) => ("config", 2, None),
        Some(Error::GradientCheck { .. }) => ("gradient_check", 4, None),
        Some(Error::Diverged { .. }) => ("diverged", 5, None),
        Some(Error::Parse { path, .. }) => ("parse", 6, Some(path.clone())),
        Some(_) => ("runtime", 1, None),
        None => ("usage", 2, None),
    };
    let record = json!({
        "error": kind,
        "message": format!("{err:#}"),
        "path": path,
    });
    (record, code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (record, code) = error_record(&e);
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1..5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_seeds("3, 7").unwrap(), vec![3, 7]);
        assert!(parse_seeds("5..1").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn flags_become_overrides() {
        let cli = Cli::parse_from(["hierenv", "--seed", "4", "--seeds", "1..2", "--set", "lambda=1.0", "pipeline"]);
        let ov = overrides(&cli).unwrap();
        assert!(ov.contains(&("seed".into(), "4".into())));
        assert!(ov.contains(&("seeds".into(), "[1, 2]".into())));
        assert!(ov.contains(&("lambda".into(), "1.0".into())));
    }
}
