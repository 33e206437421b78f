use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dmpcrl::experiment::{self, Algorithm, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dmpcrl", version, about = "Distributed MPC-based Q-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one instance and write its outputs under <out>/<algo>_seed<seed>.
    Run {
        /// TOML config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        algo: Option<Algorithm>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Record every inter-agent message (needed by audit-messages).
        #[arg(long)]
        message_log: bool,
    },
    /// Run every (alpha, seed) arm and rank the step sizes.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        algo: Option<Algorithm>,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        /// Seeds; the config's seed list when omitted.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Percentile bands across all runs found below <in>.
    Aggregate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check message logs for non-neighbor traffic and disallowed payloads.
    AuditMessages {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn load(config: Option<PathBuf>, algo: Option<Algorithm>, steps: Option<usize>) -> dmpcrl::Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(&p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(a) = algo {
        cfg.algorithm = a;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> dmpcrl::Result<bool> {
    match cmd {
        Command::Run {
            config,
            algo,
            seed,
            steps,
            out,
            message_log,
        } => {
            let mut cfg = load(config, algo, steps)?;
            cfg.output.message_log |= message_log;
            let (result, dir) = experiment::run_to_dir(&cfg, seed, &out)?;
            let m = &result.metrics;
            println!(
                "{} seed {}: {} steps, {} updates ({} skipped), end-window cost {:.6}, written to {}",
                cfg.algorithm,
                seed,
                result.steps.len(),
                m.updates.len(),
                m.skipped_updates(),
                experiment::end_window_cost(&result),
                dir.display()
            );
        }
        Command::Sweep {
            config,
            algo,
            alphas,
            seeds,
            steps,
            out,
        } => {
            let cfg = load(config, algo, steps)?;
            let seeds = if seeds.is_empty() { cfg.seeds.clone() } else { seeds };
            let rows = experiment::sweep(&cfg, &alphas, &seeds, Some(&out))?;
            for (k, r) in rows.iter().enumerate() {
                println!("{k}\talpha {:e}\tend-window cost {:.6}", r.alpha, r.metric);
            }
            if let Some(best) = rows.first() {
                println!("best alpha for {}: {:e}", cfg.algorithm, best.alpha);
            }
        }
        Command::Aggregate { input, out } => {
            let counts = experiment::aggregate(&input, &out)?;
            for (a, n) in counts {
                println!("{a}: {n} runs");
            }
        }
        Command::AuditMessages { input } => {
            let audits = experiment::audit_messages(&input)?;
            if audits.is_empty() {
                println!("no message logs found under {}", input.display());
                return Ok(false);
            }
            let mut ok = true;
            for a in &audits {
                let status = if a.passed() { "pass" } else { "FAIL" };
                println!("{status}\t{}\t{} messages", a.dir.display(), a.report.messages);
                for v in a.report.violations.iter().chain(&a.payload_violations).take(20) {
                    println!("\t{v}");
                }
                ok &= a.passed();
            }
            return Ok(ok);
        }
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml_string()?);
        }
    }
    Ok(true)
}
