//! `scherk` command-line driver.
//!
//! Exit codes: 0 success (or admissible), 2 violations or unbalanced, 3 equality-only, 1 any error.
//! `SCHERK_THREADS` caps the worker pool; outputs do not depend on it.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scherk::meshing::DEFAULT_H;

use crate::config::{Artifacts, RunConfig};

#[derive(Parser)]
#[command(name = "scherk", version, about = "Ideal Scherk graphs: admissibility, truncated solves, flux audits, exhaustion and ring moduli")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Admissibility report on stdout.
    Check {
        #[arg(long)]
        polygon: PathBuf,
        /// Also write check.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the cap sequence and write solution files and plots.
    Solve(SequenceArgs),
    /// Side and chord flux audit with random cycle checks.
    Flux {
        #[command(flatten)]
        seq: SequenceArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One extension step with perturbation bound `tau0`.
    Extend {
        #[arg(long)]
        polygon: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        tau0: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterated extension with `tau_n = tau0 * 2^-n`.
    Exhaust {
        #[arg(long)]
        polygon: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        tau0: f64,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ring moduli of height bands on the last graph and the curvature series.
    Modulus {
        #[command(flatten)]
        seq: SequenceArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.4,0.8,1.6")]
        ring_levels: Vec<f64>,
    },
}

#[derive(Args)]
struct SequenceArgs {
    #[arg(long)]
    polygon: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    n_list: Vec<u32>,
    #[arg(long, default_value_t = DEFAULT_H)]
    mesh_h: f64,
    #[arg(long)]
    out: PathBuf,
}

fn configure_threads() -> scherk::Result<()> {
    if let Ok(v) = std::env::var("SCHERK_THREADS") {
        let n: usize = v.parse().map_err(|_| scherk::Error::Parse(format!("SCHERK_THREADS={v} is not a count")))?;
        // a second initialization only happens in tests and is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(())
}

fn sequence_config(command: &str, seq: &SequenceArgs, spec: scherk::polygon::PolygonSpec) -> RunConfig {
    let mut config = RunConfig::new(command, &seq.polygon, spec);
    config.n_list = Some(seq.n_list.clone());
    config.mesh_h = Some(seq.mesh_h);
    config
}

fn run(cli: Cli) -> scherk::Result<u8> {
    configure_threads()?;
    match cli.command {
        Command::Check { polygon, out } => {
            let (g, spec) = commands::load(&polygon)?;
            commands::check(&RunConfig::new("check", &polygon, spec), &g, out.as_deref())
        }
        Command::Solve(seq) => {
            let (g, spec) = commands::load(&seq.polygon)?;
            let config = sequence_config("solve", &seq, spec);
            commands::solve(&Artifacts::create(&seq.out, &config)?, &g, &seq.n_list, seq.mesh_h)
        }
        Command::Flux { seq, seed } => {
            let (g, spec) = commands::load(&seq.polygon)?;
            let mut config = sequence_config("flux", &seq, spec);
            config.seed = Some(seed);
            commands::flux(&Artifacts::create(&seq.out, &config)?, &g, &seq.n_list, seq.mesh_h, seed)
        }
        Command::Extend { polygon, tau0, out } => {
            let (g, spec) = commands::load(&polygon)?;
            let mut config = RunConfig::new("extend", &polygon, spec);
            config.tau0 = Some(tau0);
            commands::extend(&Artifacts::create(&out, &config)?, &g, tau0)
        }
        Command::Exhaust { polygon, tau0, steps, out } => {
            let (g, spec) = commands::load(&polygon)?;
            let mut config = RunConfig::new("exhaust", &polygon, spec);
            config.tau0 = Some(tau0);
            config.steps = Some(steps);
            commands::exhaust_cmd(&Artifacts::create(&out, &config)?, &g, steps, tau0)
        }
        Command::Modulus { seq, ring_levels } => {
            let (g, spec) = commands::load(&seq.polygon)?;
            let mut config = sequence_config("modulus", &seq, spec);
            config.ring_levels = Some(ring_levels.clone());
            commands::modulus(&Artifacts::create(&seq.out, &config)?, &g, &seq.n_list, seq.mesh_h, &ring_levels)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage errors share the generic failure code; 2 is reserved for violations
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
