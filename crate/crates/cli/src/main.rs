use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fbo_cli::config::{parse_config, Override, ProblemInstance};
use fbo_cli::csv::export_csv;
use fbo_cli::svg::{render_svg, write_svg, XAxis};
use fbo_cli::sweep::{sweep, Grid};
use fbo_cli::{estimate, execute, oracle_suite, CliError};
use fbo_core::synthetic::{make_quadratic, QuadraticSpec};
use fbo_core::EstimatorKind;

#[derive(Parser)]
#[command(name = "fbo", version, about = "Federated bilevel optimization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Rounds,
    K,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Aggitd,
    Aid,
    Local,
}

#[derive(Subcommand)]
enum Command {
    /// Run the solver and write metrics.csv, plot.svg and the resolved config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set K=500` or `--set problem.d1=4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Also run another estimator with identical settings and plot both.
        #[arg(long)]
        compare: Option<Baseline>,
        #[arg(long, default_value = "grad_norm_sq")]
        metric: String,
        #[arg(long, value_enum, default_value = "rounds")]
        x_axis: Axis,
        /// Linear instead of logarithmic y axis.
        #[arg(long)]
        linear: bool,
    },
    /// Compute one hypergradient estimate at the starting point and dump its trace.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the oracle cross-checks on a quadratic instance.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the Cartesian product of a parameter grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// JSON object mapping config keys to value lists.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn overrides(set: &[String]) -> Result<Vec<Override>> {
    Ok(set.iter().map(|s| s.parse()).collect::<Result<Vec<_>, CliError>>()?)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
    Ok(())
}

fn write(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    Ok(())
}

fn run_command(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            set,
            compare,
            metric,
            x_axis,
            linear,
        } => {
            let exp = parse_config(&config, &overrides(&set)?)?;
            let out = exp.config.out_dir.clone();
            create_dir(&out)?;
            write(
                &out.join("config.resolved.json"),
                serde_json::to_string_pretty(&exp.config.to_file())? + "\n",
            )?;
            let mut reports = vec![(exp.config.run.estimator, execute(&exp).context("main run")?)];
            if let Some(b) = compare {
                let kind = match b {
                    Baseline::Aggitd => EstimatorKind::Aggitd,
                    Baseline::Aid => EstimatorKind::Aid,
                    Baseline::Local => EstimatorKind::Local,
                };
                let mut other = exp.clone();
                other.config.run.estimator = kind;
                reports.push((kind, execute(&other).context("comparison run")?));
            }
            let single = reports.len() == 1;
            for (kind, report) in &reports {
                let name = if single { "metrics.csv".to_string() } else { format!("metrics_{}.csv", kind.name()) };
                export_csv(report, &out.join(&name))?;
                let last = report.rows.last().expect("at least one row");
                println!(
                    "{}: K={} rounds={} final grad_norm_sq={:e} lower_gap={:e} -> {}",
                    kind.name(),
                    last.k,
                    report.ledger.rounds_total,
                    last.grad_norm_sq,
                    last.lower_gap,
                    out.join(&name).display()
                );
            }
            let series: Vec<(String, &fbo_core::RunReport)> =
                reports.iter().map(|(k, r)| (k.name().to_string(), r)).collect();
            let axis = match x_axis {
                Axis::Rounds => XAxis::Rounds,
                Axis::K => XAxis::Iteration,
            };
            let chart = render_svg(&series, axis, &metric, !linear)?;
            for w in &chart.warnings {
                eprintln!("warning: {w}");
            }
            write_svg(&chart, &out.join("plot.svg"))?;
        }
        Command::Estimate { config, set } => {
            let exp = parse_config(&config, &overrides(&set)?)?;
            let r = estimate(&exp)?;
            create_dir(&exp.config.out_dir)?;
            let path = exp.config.out_dir.join("estimate.json");
            write(&path, serde_json::to_string_pretty(&r)? + "\n")?;
            println!(
                "{}: |h - grad f| = {:e}, rounds = {}, loops = {} -> {}",
                exp.config.run.estimator.name(),
                r.error,
                r.rounds,
                r.loops,
                path.display()
            );
        }
        Command::Verify { config, set } => {
            let (inst, seed) = match config {
                Some(path) => {
                    let exp = parse_config(&path, &overrides(&set)?)?;
                    match exp.problem {
                        ProblemInstance::Quadratic(q) => (q, exp.config.run.seed),
                        ProblemInstance::Hyperrep(_) => {
                            return Err(CliError::Config("verify needs a quadratic problem".into()).into())
                        }
                    }
                }
                None => (make_quadratic(&QuadraticSpec::default()).map_err(CliError::from)?, 0),
            };
            let checks = oracle_suite(&inst, seed)?;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                bail!("{failed} oracle check(s) failed");
            }
        }
        Command::Sweep { config, grid, set } => {
            let fixed = overrides(&set)?;
            let base = std::fs::read_to_string(&config).map_err(|e| CliError::io(&config, e))?;
            let grid_text = std::fs::read_to_string(&grid).map_err(|e| CliError::io(&grid, e))?;
            let grid = Grid::parse(&grid_text, &grid.display().to_string())?;
            let exp = parse_config(&config, &fixed)?;
            let index = sweep(&base, &config.display().to_string(), &fixed, &grid, &exp.config.out_dir)?;
            for c in &index.cells {
                match (&c.csv, &c.error) {
                    (Some(csv), _) => println!("cell {}: {}", c.index, csv),
                    (None, Some(e)) => println!("cell {}: failed: {e}", c.index),
                    _ => {}
                }
            }
            println!("index -> {}", exp.config.out_dir.join("index.json").display());
            if index.failures() > 0 {
                return Err(CliError::Core(fbo_core::Error::Divergence {
                    iteration: 0,
                    detail: format!("{} sweep cell(s) failed", index.failures()),
                })
                .into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map(CliError::exit_code).unwrap_or(1);
            ExitCode::from(code)
        }
    }
}
