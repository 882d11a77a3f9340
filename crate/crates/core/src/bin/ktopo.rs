//! Command-line front end: run validation experiments, precompute moment
//! caches, solve for optimal coefficients, and compare emitted curves.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ktopo::harness::output::read_csv_column;
use ktopo::harness::{
    compare_curves, emit_outputs, linear_five_node, nonlinear_three_node, prepare, run_with,
    ExperimentConfig,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "ktopo",
    about = "kernel-based graph topology inference and validation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full validation experiment and emit curve files
    Run {
        #[arg(long)]
        config: PathBuf,
        /// output directory (also used as the moment cache)
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// override the configured ensemble size
        #[arg(long)]
        runs: Option<usize>,
        /// override the configured master seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Precompute and cache the moment set for a configuration
    Moments {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Solve for the optimal coefficient vector and print a summary
    SolveGamma {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare a curve column between two CSV files in decibels
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// column name (or 0-based index) in the first file
        #[arg(long, default_value = "msd_emp")]
        column_a: String,
        /// column name (or 0-based index) in the second file
        #[arg(long, default_value = "msd_theo")]
        column_b: String,
        /// iterations to skip before comparing; defaults to a tenth
        #[arg(long)]
        burn_in: Option<usize>,
    },
    /// Write a built-in configuration to stdout
    Preset {
        /// `linear5` or `nonlinear3`
        name: String,
    },
}

fn load_config(path: &PathBuf, runs: Option<usize>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(r) = runs {
        cfg.run.runs = r;
    }
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    cfg.validate().context("validating config")?;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            runs,
            seed,
        } => {
            let cfg = load_config(&config, runs, seed)?;
            let prep = prepare(&cfg, Some(&out)).context("preparing experiment")?;
            let art = run_with(&cfg, prep).context("running experiment")?;
            emit_outputs(&art, &out).context("writing outputs")?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())
                .context("writing config copy")?;
            let gap = compare_curves(&art.msd_emp, &art.msd_theory, None)?;
            println!(
                "wrote {} (k_s = {}, step size = {:.6e})",
                out.display(),
                art.k_s,
                art.step_size
            );
            println!(
                "MSD measured-vs-model gap after burn-in: {:.3} dB (segments {:?})",
                gap.max_db,
                gap.segment_max_db
                    .iter()
                    .map(|g| format!("{g:.3}"))
                    .collect::<Vec<_>>()
            );
            if let Some(ss) = art.steady_state_msd {
                println!("steady-state MSD: {ss:.6e}");
            } else if let Some(note) = &art.steady_state_note {
                println!("steady-state MSD unavailable: {note}");
            }
            if art.diverged_runs > 0 {
                println!("note: {}/{} runs diverged", art.diverged_runs, art.runs);
            }
            println!(
                "edge strengths: {:?} -> recovered row {:?}",
                art.edge_strengths,
                art.adjacency_row
                    .iter()
                    .map(|&b| u8::from(b))
                    .collect::<Vec<_>>()
            );
        }
        Command::Moments { config, out } => {
            let cfg = load_config(&config, None, None)?;
            let prep = prepare(&cfg, Some(&out)).context("computing moments")?;
            println!(
                "moment set cached in {} (k_s = {})",
                out.display(),
                prep.moments.k_s()
            );
        }
        Command::SolveGamma { config, out } => {
            let cfg = load_config(&config, None, None)?;
            let prep = prepare(&cfg, Some(&out)).context("solving coefficients")?;
            let path = out.join("gamma_star.txt");
            std::fs::create_dir_all(&out).context("creating output directory")?;
            let mut text = String::new();
            for v in prep.optimal.iter() {
                text.push_str(&format!("{v:.16e}\n"));
            }
            std::fs::write(&path, text).context("writing coefficients")?;
            println!(
                "optimal coefficients ({} entries, norm {:.6e}) -> {}",
                prep.optimal.len(),
                prep.optimal.norm(),
                path.display()
            );
        }
        Command::Compare {
            a,
            b,
            column_a,
            column_b,
            burn_in,
        } => {
            let ca = read_csv_column(&a, &column_a)
                .with_context(|| format!("reading {}", a.display()))?;
            let cb = read_csv_column(&b, &column_b)
                .with_context(|| format!("reading {}", b.display()))?;
            let gap = compare_curves(&ca, &cb, burn_in).context("comparing curves")?;
            println!(
                "max gap {:.4} dB over iterations {}.. ({} points excluded)",
                gap.max_db, gap.burn_in, gap.excluded
            );
            println!(
                "per-segment max: {:?}",
                gap.segment_max_db
                    .iter()
                    .map(|g| format!("{g:.4}"))
                    .collect::<Vec<_>>()
            );
        }
        Command::Preset { name } => {
            let cfg = match name.as_str() {
                "linear5" => linear_five_node(),
                "nonlinear3" => nonlinear_three_node(),
                other => anyhow::bail!("unknown preset {other}; use linear5 or nonlinear3"),
            };
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}
