use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use pnsde::config::ExperimentConfig;
use pnsde::experiment::{calibrate, convergence, simulate};
use pnsde::Error;

/// Probabilistic solvers for additive-noise SDEs.
#[derive(Parser)]
#[command(name = "pnsde", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample trajectories at the first configured step and write paths.csv.
    Simulate(Common),
    /// Estimate strong and weak errors against a coupled fine reference and fit orders.
    Convergence(Common),
    /// Calibrate the alg3 prior scale from its innovations and report Z-scores.
    Calibrate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; every key is optional.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, value_name = "N", default_value_t = 0)]
    threads: usize,
    /// Output directory, overriding the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        Ok(cfg)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4e}")).unwrap_or_else(|| "-".into())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = c.load()?;
            let s = simulate(&cfg, c.threads)?;
            println!("simulated {} paths of {} steps (delta = {}) in {:.2?}", s.paths, s.steps, s.delta, s.elapsed);
            println!("terminal mean {:?}", s.terminal_mean.as_slice());
            println!("terminal variance {:?}", s.terminal_var.as_slice());
            println!("wrote {}", s.file.display());
        }
        Command::Convergence(c) => {
            let cfg = c.load()?;
            let r = convergence(&cfg, c.threads)?;
            println!("{:>12} {:>12} {:>12} {:>12} {:>8}", "delta", "eps_local", "eps_global", "eps_weak", "N");
            for e in &r.estimates {
                println!(
                    "{:>12} {:>12} {:>12} {:>12.4e} {:>8}",
                    e.delta,
                    fmt_opt(e.eps_local),
                    fmt_opt(e.eps_global),
                    e.eps_weak,
                    e.n
                );
            }
            for (name, fit) in [("local", r.local), ("global", r.global), ("weak", Some(r.weak))] {
                if let Some(f) = fit {
                    println!("{name:>6}: a_hat = {:.4}  ln_b_hat = {:.4}  c_hat = {:.4}  R2 = {:.4}", f.a_hat, f.ln_b_hat, f.c_hat, f.r2);
                }
            }
            println!("wrote {}", cfg.resolved().out.join("convergence.csv").display());
        }
        Command::Calibrate(c) => {
            let cfg = c.load()?;
            let s = calibrate(&cfg, c.threads)?;
            println!("prior eta^2 = {}, delta = {}", s.eta2_initial, s.delta);
            println!("eta^2 estimate (path 0) = {:.6}", s.eta2_hat);
            println!("eta^2 estimate (mean over {} paths) = {:.6}", s.paths, s.eta2_hat_mean);
            println!("|Z| <= 2 coverage: initial {:.3}, calibrated {}", s.coverage_initial, fmt_opt(s.coverage_calibrated));
            println!("wrote {}", s.file.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
