//! Command-line entry points for the federated learning simulator.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedskd_core::metrics::Scope;
use fedskd_core::runner::{cli_ablate, cli_evaluate, cli_run, AblateAxis};

#[derive(Parser)]
#[command(
    name = "fedskd",
    about = "Aggregation-free model-heterogeneous federated learning simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    Components,
    Layers,
    Timing,
}

impl From<AxisArg> for AblateAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Components => Self::Components,
            AxisArg::Layers => Self::Layers,
            AxisArg::Timing => Self::Timing,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeArg {
    Local,
    Global,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Local => Self::Local,
            ScopeArg::Global => Self::Global,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment from a TOML config.
    Run {
        /// Config file path.
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. --set gamma=2 --set model.base_width=8.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Sweep one ablation axis of the distillation setup.
    Ablate {
        /// Axis to sweep.
        #[arg(long)]
        axis: AxisArg,
        /// Base config file path.
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Recompute metrics from a run directory's checkpoints.
    Evaluate {
        /// Run directory produced by `run`.
        #[arg(long)]
        run_dir: PathBuf,
        /// Restrict output to one scope.
        #[arg(long)]
        scope: Option<ScopeArg>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Run { config, set } => match cli_run(&config, &set) {
            Ok(summary) => {
                println!("run dir: {}", summary.run_dir.display());
                println!(
                    "local  mean AUC {:.4} +- {:.4}",
                    summary.local.mean, summary.local.std
                );
                println!(
                    "global mean AUC {:.4} +- {:.4}",
                    summary.global.mean, summary.global.std
                );
                if let Some(gap) = summary.fairness {
                    println!("fairness gap {gap:.4}");
                }
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Cmd::Ablate { axis, config, set } => match cli_ablate(axis.into(), &config, &set) {
            Ok(summary) => {
                println!("summary: {}", summary.summary_csv.display());
                println!("{} rows", summary.rows.len());
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Cmd::Evaluate { run_dir, scope } => {
            match cli_evaluate(&run_dir, scope.map(Into::into)) {
                Ok(rows) => {
                    println!("method,round,client,scope,auc,fairness_gap,seed,fold");
                    for r in rows {
                        println!(
                            "{},{},{},{},{:.6},{},{},{}",
                            r.method,
                            r.round,
                            r.client,
                            r.scope,
                            r.auc,
                            r.fairness_gap.map(|g| format!("{g:.6}")).unwrap_or_default(),
                            r.seed,
                            r.fold
                        );
                    }
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
