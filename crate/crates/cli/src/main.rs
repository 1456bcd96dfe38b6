//! `bedd`: run fleet experiments, recompute metrics, draw trajectory plots.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use bedd::experiment::{
    build_config, metrics_from_dir, plot_svg, read_trajectory, run_dirs, run_seeds, trajectory_file, MetricsReport, Preset,
};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bedd", version, about = "Cooperative AUV localization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a fleet and write trajectories, metrics and plots.
    Run {
        /// a (dead-reckoning), b (bearing) or c (bearing-outliers).
        #[arg(long, value_parser = parse_preset)]
        preset: Option<Preset>,
        /// Number of consecutive seeds to run.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scenario file (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "BEDD_OUT_DIR", default_value = "bedd_out")]
        out: PathBuf,
        /// Scenario override, `key.path=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Recompute metrics from a run directory.
    Metrics {
        #[arg(long = "in", env = "BEDD_OUT_DIR", default_value = "bedd_out")]
        input: PathBuf,
    },
    /// Draw a top-down trajectory plot from a run directory.
    Plot {
        #[arg(long = "in", env = "BEDD_OUT_DIR", default_value = "bedd_out")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Computing agent whose view is drawn.
        #[arg(long, default_value_t = 0)]
        agent: usize,
    },
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    Preset::parse(s).ok_or_else(|| format!("unknown preset `{s}`; expected a, b, c or their long names"))
}

fn print_report(label: &str, m: &MetricsReport) {
    println!("{label}");
    println!("  agent       ate   final   fleet  relative  deliveries  outliers  iterations  divergences");
    for a in &m.agents {
        println!(
            "  {:>5} {:>9.3} {:>7.3} {:>7.3} {:>9.3} {:>11} {:>9} {:>11} {:>12}",
            a.agent, a.ate, a.final_error, a.fleet_ate, a.relative_error, a.deliveries, a.outliers, a.iterations, a.divergences
        );
    }
    println!(
        "  mean  {:>9.3} {:>7.3} {:>7.3} {:>9.3}",
        m.mean_ate(),
        m.mean_final_error(),
        m.mean_fleet_ate(),
        m.mean_relative_error()
    );
}

fn execute(cli: Cli) -> Result<u64, String> {
    match cli.command {
        Command::Run { preset, seeds, seed, config, out, sets } => {
            let text = config.map(|p| fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))).transpose()?;
            let cfg = build_config(preset, text.as_deref(), &sets).map_err(|e| e.to_string())?;
            let seeds: Vec<u64> = (seed..seed + seeds.max(1)).collect();
            let runs = run_seeds(&cfg, &seeds, Some(&out)).map_err(|e| e.to_string())?;
            let mut divergences = 0;
            for r in &runs {
                print_report(&format!("seed {}", r.seed), &r.metrics);
                divergences += r.metrics.divergences();
            }
            println!("wrote {}", out.display());
            Ok(divergences)
        }
        Command::Metrics { input } => {
            let dirs = run_dirs(&input).map_err(|e| e.to_string())?;
            if dirs.is_empty() {
                return Err(format!("no run directories under {}", input.display()));
            }
            let mut divergences = 0;
            for d in dirs {
                let m = metrics_from_dir(&d).map_err(|e| e.to_string())?;
                print_report(&d.display().to_string(), &m);
                divergences += m.divergences();
            }
            Ok(divergences)
        }
        Command::Plot { input, out, agent } => {
            let dir = run_dirs(&input)
                .map_err(|e| e.to_string())?
                .into_iter()
                .next()
                .ok_or_else(|| format!("no run directories under {}", input.display()))?;
            let rows = read_trajectory(&dir.join(trajectory_file(agent))).map_err(|e| e.to_string())?;
            fs::write(&out, plot_svg(&rows)).map_err(|e| format!("{}: {e}", out.display()))?;
            println!("wrote {}", out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} solver divergence(s)");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
