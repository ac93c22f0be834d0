use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shadowprec::harness::{run_training, sweep, write_outputs, HarnessError, RunConfig, SweepAxis};
use shadowprec::metrics::report;
use shadowprec::precond::Method;

#[derive(Debug, Parser)]
#[command(name = "shadowprec", version, about = "Simulated second-order training with asynchronous preconditioner refresh")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one training job and write its outputs.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one job per value of a config axis.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// staleness, nodes or budget.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u64>,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Compare step-time spikes of synchronous and bounded-staleness refresh.
    BenchSpikes {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Refresh cost as a multiple of step compute, e.g. `5x`.
        #[arg(long, default_value = "5x", value_parser = parse_multiple)]
        job_cost: f64,
        /// Staleness budget of the asynchronous run.
        #[arg(long, default_value_t = 5)]
        staleness: u64,
        #[arg(long, default_value = "runs/spikes")]
        out: PathBuf,
    },
    /// Summarize the runs found under a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn parse_multiple(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim_end_matches(['x', 'X']).parse().map_err(|_| format!("expected a multiple like 5x, got {s:?}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("job cost must be nonnegative, got {s:?}"))
    }
}

fn load(config: Option<&Path>, fallback: impl FnOnce() -> RunConfig) -> Result<RunConfig, HarnessError> {
    match config {
        Some(p) => RunConfig::from_json_file(p),
        None => Ok(fallback()),
    }
}

fn spike_default() -> RunConfig {
    let mut c = RunConfig::default();
    c.optimizer.method = Method::Soap;
    c.optimizer.lr = 3e-3;
    c.optimizer.pf = 10;
    c.steps = 600;
    c
}

fn execute(cmd: Command) -> Result<(), HarnessError> {
    match cmd {
        Command::Train { config, out } => {
            let mut cfg = RunConfig::from_json_file(&config)?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            let res = run_training(&cfg)?;
            let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs/train"));
            write_outputs(&dir, &cfg, &res)?;
            let s = &res.summary;
            println!(
                "{} steps, final eval loss {:.6}, simulated time {} us, outputs in {}",
                s.steps,
                s.final_eval_loss,
                s.total_time_us,
                dir.display()
            );
        }
        Command::Sweep { config, axis, values, out } => {
            let axis: SweepAxis = axis.parse()?;
            let mut cfg = load(config.as_deref(), RunConfig::default)?;
            cfg.output_dir = Some(out.clone());
            let table = sweep(&cfg, axis, &values)?;
            print!("{}", table.to_markdown());
            report(&out)?;
        }
        Command::BenchSpikes { config, job_cost, staleness, out } => {
            let mut base = load(config.as_deref(), spike_default)?;
            base.sched.inject_job_delay_steps = job_cost;
            for (name, s) in [("sync", 0), ("async", staleness)] {
                let mut c = base.clone();
                c.sched.staleness_s = s;
                let dir = out.join(name);
                c.output_dir = Some(dir.clone());
                let mut res = run_training(&c)?;
                res.summary.label = Some(format!("{name} S={s}"));
                write_outputs(&dir, &c, &res)?;
                let Some(sp) = res.summary.spike else {
                    println!("{name:5} S={s:<3} too few steps for spike statistics");
                    continue;
                };
                println!(
                    "{name:5} S={s:<3} spike_ratio {:.3}  median {:.0} us  max {:.0} us at step {}  final eval loss {:.6}",
                    sp.spike_ratio,
                    sp.median,
                    sp.max,
                    sp.argmax + 1,
                    res.summary.final_eval_loss
                );
            }
            report(&out)?;
        }
        Command::Report { dir } => {
            let table = report(&dir)?;
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
