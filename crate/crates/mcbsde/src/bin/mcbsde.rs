//! Command-line front end: solve one instance, simulate paths, or run the
//! verification suites.
//!
//! Exit codes: 0 when everything passes, 1 on a check failure or solver
//! error, 2 on usage or config errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mcbsde::bsde::solve_bsde;
use mcbsde::harness::{run_suite, ExperimentConfig, SuiteId};
use mcbsde::montecarlo::substream_seed;
use mcbsde::rbsde::{solve_rbsde_with, LadderPolicy};
use mcbsde::Error;

#[derive(Parser)]
#[command(name = "mcbsde", version, about = "BSDE and reflected BSDE solvers driven by finite-state Markov chains")]
struct Cli {
    /// Experiment config (TOML); the shipped default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the Monte Carlo seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the solver step count.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Override the Monte Carlo path count.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Override the ladder stopping tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Output directory (default `out`, or the MCBSDE_OUT variable).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the configured instance and export the value grid as CSV.
    Solve,
    /// Simulate chain paths and export them as CSV.
    Simulate,
    /// Run a single verification suite.
    Verify {
        /// Suite name (kebab-case), e.g. `isometry` or `comparison`.
        suite: String,
    },
    /// Run every suite selected in the config.
    Suite,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(all_passed) => {
            if all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::InvalidArgument(_) | Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_toml_str(&text)?
        }
        None => ExperimentConfig::shipped_default(),
    };
    if let Some(seed) = cli.seed {
        cfg.mc.seed = seed;
    }
    if let Some(steps) = cli.steps {
        cfg.solver.steps = steps;
    }
    if let Some(paths) = cli.paths {
        cfg.mc.paths = paths;
    }
    if let Some(tol) = cli.tol {
        cfg.solver.tol = tol;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("MCBSDE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Error> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn run(cli: Cli) -> Result<bool, Error> {
    let cfg = load_config(&cli)?;
    let dir = out_dir(&cli);
    match &cli.command {
        Command::Solve => solve_command(&cfg, &dir),
        Command::Simulate => simulate_command(&cfg, &dir),
        Command::Verify { suite } => {
            let id: SuiteId = suite
                .parse()
                .map_err(|()| Error::Config(format!("unknown suite `{suite}`")))?;
            let mut one = cfg.clone();
            one.suite.run = vec![id.name().to_string()];
            suite_command(&one, &dir)
        }
        Command::Suite => suite_command(&cfg, &dir),
    }
}

fn solve_command(cfg: &ExperimentConfig, dir: &Path) -> Result<bool, Error> {
    let exp = cfg.build()?;
    for warning in &exp.warnings {
        eprintln!("warning: {warning}");
    }
    println!(
        "assumption margin: {:.4} ({})",
        exp.assumption_margin,
        if exp.assumption_margin < 1.0 {
            "holds"
        } else {
            "violated"
        }
    );
    match &exp.obstacle {
        None => {
            let sol = solve_bsde(&exp.model, &exp.driver, &exp.xi, exp.solver.steps)?;
            let mut csv = Vec::new();
            sol.write_csv(&mut csv)?;
            let path = write_file(dir, "bsde_values.csv", &String::from_utf8_lossy(&csv))?;
            println!("wrote {}", path.display());
        }
        Some(obstacle) => {
            let policy = LadderPolicy {
                max_level: exp.solver.ladder_max_level,
                tol: Some(exp.solver.tol),
                max_rate_per_step: 1.0,
            };
            let sol = solve_rbsde_with(
                &exp.model,
                &exp.driver,
                obstacle,
                &exp.xi,
                exp.solver.steps,
                policy,
            )?;
            let mut csv = Vec::new();
            sol.write_csv(&mut csv)?;
            let path = write_file(dir, "rbsde_solution.csv", &String::from_utf8_lossy(&csv))?;
            println!("wrote {}", path.display());
            let ladder = write_file(dir, "ladder.txt", &sol.ladder_report())?;
            println!("wrote {}", ladder.display());
        }
    }
    Ok(true)
}

fn simulate_command(cfg: &ExperimentConfig, dir: &Path) -> Result<bool, Error> {
    let exp = cfg.build()?;
    let mut csv = String::from("path,t,state\n");
    for p in 0..exp.mc.paths {
        let path = exp
            .model
            .simulate_path(exp.x0, substream_seed(exp.mc.seed, p as u64));
        csv.push_str(&format!("{p},0,{}\n", path.x0() + 1));
        for &(t, state) in path.jumps() {
            csv.push_str(&format!("{p},{t},{}\n", state + 1));
        }
    }
    let path = write_file(dir, "paths.csv", &csv)?;
    println!("wrote {}", path.display());
    Ok(true)
}

fn suite_command(cfg: &ExperimentConfig, dir: &Path) -> Result<bool, Error> {
    let exp = cfg.build()?;
    for warning in &exp.warnings {
        eprintln!("warning: {warning}");
    }
    let report = run_suite(cfg)?;
    print!("{}", report.text());
    let text_path = write_file(dir, "report.txt", &report.text())?;
    let json_path = write_file(dir, "report.json", &report.json())?;
    println!("wrote {}", text_path.display());
    println!("wrote {}", json_path.display());
    Ok(report.passed)
}
