//! Argument parsing and verb dispatch.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use irss_core::trainer::Method;

use crate::bound::run_bound;
use crate::config::{load_bound, load_experiment, parse_seeds, read_json, ConfigError, Overrides};
use crate::data::dump_datasets;
use crate::run::{run_experiment, seed_dir};
use crate::sweep::{parse_axis, plan, run_sweep, Axis};

/// Exit status for configuration problems.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status for failures after the configuration was accepted.
pub const EXIT_RUNTIME: u8 = 1;

#[derive(Debug, Parser)]
#[command(name = "irss", version, about = "Style-aligned invariant risk minimization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every seed of an experiment config.
    Run(Common),
    /// Run a grid of overrides, one directory per cell.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `dotted.path=v1,v2,...`; repeat for more axes.
        #[arg(long = "grid", value_name = "PATH=VALUES")]
        grid: Vec<String>,
    },
    /// Check the risk bound's conditions and confront it with trained IRM models.
    Bound {
        #[command(flatten)]
        common: Common,
        /// Skip training; report the bound and conditions only.
        #[arg(long)]
        no_empirical: bool,
    },
    /// Write the train/test sets of each seed as binary dumps.
    GenData(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long, short = 'c')]
    pub config: PathBuf,
    /// `dotted.path=value` override, applied in order.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
    /// `3`, `0,1,2` or `0..5`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Output directory, replacing the config's `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Weight preset.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

impl Common {
    fn overrides(&self) -> Result<Overrides, ConfigError> {
        Ok(Overrides {
            set: self.set.clone(),
            seeds: self.seeds.as_deref().map(parse_seeds).transpose()?,
            out: self.out.clone(),
            method: self.method,
        })
    }
}

/// Config problems exit with 2, everything else with 1.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some() || matches!(e.downcast_ref::<irss_core::Error>(), Some(irss_core::Error::Config(_)))
    });
    if config {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// The error chain joined by `: `, skipping causes already spelled out by
/// the message above them.
pub fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

/// Runs a parsed command, printing a one-line report or the error chain.
pub fn dispatch(cli: Cli) -> ExitCode {
    match execute(cli.command) {
        Ok(message) => {
            println!("{message}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

fn execute(command: Command) -> anyhow::Result<String> {
    match command {
        Command::Run(common) => {
            let cfg = load_experiment(&common.config, &common.overrides()?)?;
            let s = run_experiment(&cfg)?;
            Ok(format!(
                "{}: {} seeds, ood_acc {:.4} ± {:.4}, train_acc {:.4} ± {:.4} -> {}",
                s.run_id,
                s.per_seed.len(),
                s.ood_acc.mean,
                s.ood_acc.sd,
                s.train_acc.mean,
                s.train_acc.sd,
                cfg.out.display()
            ))
        }
        Command::Sweep { common, grid } => {
            let axes = grid.iter().map(|g| parse_axis(g)).collect::<Result<Vec<Axis>, _>>()?;
            let doc = read_json(&common.config)?;
            let (root, cells) = plan(&doc, &common.overrides()?, &axes)?;
            let rows = run_sweep(&root, &cells)?;
            let best = rows.iter().max_by(|a, b| a.mean_ood_acc.total_cmp(&b.mean_ood_acc)).expect("grid is non-empty");
            Ok(format!(
                "{} cells -> {}; best cell {} ({}) ood_acc {:.4}",
                rows.len(),
                root.display(),
                best.cell,
                best.assignment,
                best.mean_ood_acc
            ))
        }
        Command::Bound { common, no_empirical } => {
            if common.method.is_some() {
                return Err(ConfigError::new("--method", "not used by `bound`").into());
            }
            let cfg = load_bound(&common.config, &common.overrides()?)?;
            let r = run_bound(&cfg, !no_empirical)?;
            let mut line = format!("bound {:.6}, conditions satisfied: {}", r.bound, r.conditions.all_satisfied);
            if let Some(e) = &r.empirical {
                line.push_str(&format!(", IRM risk {:.4} ± {:.4}", e.risk_mean, e.risk_sd));
            }
            Ok(line)
        }
        Command::GenData(common) => {
            let cfg = load_experiment(&common.config, &common.overrides()?)?;
            for &seed in &cfg.seeds {
                dump_datasets(&cfg, seed, &seed_dir(&cfg.out, seed))?;
            }
            Ok(format!("{} datasets -> {}", cfg.seeds.len(), cfg.out.display()))
        }
    }
}
