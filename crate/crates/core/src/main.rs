use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ganlab::harness::{emit_outputs, emit_sweep_outputs, sweep, train, write_adam_curves, write_scaling_factors, RunConfig};
use ganlab::optim::{approx_update_magnitude, simulate_schedule, ScheduleSpec};

#[derive(Parser)]
#[command(name = "ganlab", version, about = "GAN cost-formulation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one generator/discriminator pair and write CSV/JSON outputs.
    Train {
        /// TOML run configuration; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Exit successfully even if the run aborts on non-finite values.
        #[arg(long)]
        allow_divergence: bool,
    },
    /// Train every formulation against every seed in parallel.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated formulation tags, e.g. `NS,MM_NSAT,NS_ADD(0.1)`.
        #[arg(long, value_delimiter = ',', required = true)]
        formulations: Vec<String>,
        /// Inclusive range `a..b` or a comma-separated list.
        #[arg(long, default_value = "0..9")]
        seeds: String,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(long)]
        allow_divergence: bool,
    },
    /// Adam under an exponentially scaled gradient `exp(a t)`; prints CSV.
    SimulateAdam {
        #[arg(long, allow_hyphen_values = true)]
        a: f64,
        #[arg(long, default_value_t = 0.99)]
        beta1: f64,
        #[arg(long, default_value_t = 0.999)]
        beta2: f64,
        #[arg(long, default_value_t = 20_000)]
        steps: u64,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1e-8)]
        eps: f64,
    },
    /// Data for the scaling-factor or Adam-update plots.
    PlotData {
        #[arg(long, value_enum)]
        what: PlotKind,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    ScalingFactors,
    AdamCurves,
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: u64 = lo.trim().parse().context("seed range start")?;
        let hi: u64 = hi.trim().parse().context("seed range end")?;
        if hi < lo {
            bail!("empty seed range {text}");
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed `{s}`")))
        .collect()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            allow_divergence,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let record = train(&cfg)?;
            emit_outputs(&record, &out)?;
            match (&record.abort, record.final_row()) {
                (Some(a), _) => eprintln!("run aborted at step {}: {}", a.step, a.reason),
                (None, Some(r)) => eprintln!(
                    "step {}: n_covered {} none {:.4} js {:.4}",
                    r.step, r.modes.n_covered, r.modes.none_freq, r.modes.js_to_data
                ),
                (None, None) => {}
            }
            Ok(record.abort.is_none() || allow_divergence)
        }
        Command::Sweep {
            config,
            formulations,
            seeds,
            out,
            allow_divergence,
        } => {
            let cfg = load_config(config.as_ref())?;
            let seeds = parse_seeds(&seeds)?;
            let result = sweep(&cfg, &formulations, &seeds)?;
            emit_sweep_outputs(&result, &out)?;
            for a in &result.summary.aggregates {
                eprintln!(
                    "{}: median js {:.4} n_covered {} none {:.4} ({} failed)",
                    a.formulation, a.js.median, a.n_covered.median, a.none_freq.median, a.failed
                );
            }
            let failed = result.summary.runs.iter().any(|r| r.failure.is_some());
            Ok(!failed || allow_divergence)
        }
        Command::SimulateAdam {
            a,
            beta1,
            beta2,
            steps,
            alpha,
            eps,
        } => {
            let spec = ScheduleSpec {
                beta1,
                beta2,
                alpha,
                eps,
                ..ScheduleSpec::new(a, steps)
            };
            let points = simulate_schedule(&spec)?;
            let stdout = io::stdout();
            let mut w = csv::Writer::from_writer(stdout.lock());
            w.write_record(["t", "gradient", "update", "predicted"])?;
            for p in points {
                let predicted = approx_update_magnitude(&spec, p.t as f64)
                    .map(|u| u.magnitude.to_string())
                    .unwrap_or_default();
                w.write_record([p.t.to_string(), p.gradient.to_string(), p.update.abs().to_string(), predicted])?;
            }
            w.flush()?;
            io::stdout().flush()?;
            Ok(true)
        }
        Command::PlotData { what, out } => {
            match what {
                PlotKind::ScalingFactors => write_scaling_factors(&out, 1000)?,
                PlotKind::AdamCurves => write_adam_curves(&out, &[-0.0002, -0.001, -0.02], 20_000, 10)?,
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
