use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use apalm::io::{self, RunConfig, RunSummary};
use apalm::runtime::{self, ApalmOutput, ChannelTransport, ProcessTransport, StreamEndpoint};

#[derive(Parser)]
#[command(name = "apalm", version, about = "Adaptive parallel arc-length continuation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    /// Worker threads in this process.
    Threads,
    /// Worker child processes talking over pipes.
    Process,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a configuration and write the solution CSV and a JSON summary.
    Run {
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// CSV output path; overrides the config.
        #[arg(long)]
        output: Option<PathBuf>,
        /// JSON summary path; printed to stdout when absent.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "threads")]
        transport: Transport,
    },
    /// Run twice with different worker counts and compare the solutions.
    Compare {
        config: PathBuf,
        /// Two worker counts, e.g. `1,4`.
        #[arg(long, value_delimiter = ',', required = true)]
        workers: Vec<usize>,
        #[arg(long, value_enum, default_value = "threads")]
        transport: Transport,
    },
    /// Time the parallel stage over a list of worker counts.
    Scale {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        workers: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Timing CSV path; printed to stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "threads")]
        transport: Transport,
    },
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        id: usize,
    },
}

fn execute(config_path: &Path, config: &RunConfig, workers: usize, transport: Transport) -> Result<ApalmOutput> {
    if workers == 0 {
        bail!("--workers must be >= 1");
    }
    let problem = config.build_problem()?;
    let out = match transport {
        Transport::Threads => {
            let mut t = ChannelTransport::spawn_workers(&problem, &config.alm, workers);
            runtime::apalm_with(&problem, &config.alm, &config.engine, &mut t)?
        }
        Transport::Process => {
            let exe = std::env::current_exe().context("locating the apalm executable")?;
            let mut t = ProcessTransport::spawn(workers, |id| {
                let mut c = Command::new(&exe);
                c.arg("worker").arg("--config").arg(config_path).arg("--id").arg(id.to_string());
                c
            })?;
            runtime::apalm_with(&problem, &config.alm, &config.engine, &mut t)?
        }
    };
    for w in out.engine.warnings() {
        log::warn!("{w}");
    }
    Ok(out)
}

fn write_json(value: &impl serde::Serialize, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().command {
        Cmd::Run {
            config: path,
            workers,
            output,
            summary,
            transport,
        } => {
            let config = io::load_config(&path)?;
            let workers = workers.unwrap_or(config.workers);
            let out = execute(&path, &config, workers, transport)?;
            if let Some(csv) = output.or_else(|| config.output.clone()) {
                io::write_csv(&out.engine.collect(), &csv).with_context(|| format!("writing {}", csv.display()))?;
            }
            write_json(&RunSummary::from_apalm(config.problem.name(), workers, &out), summary.as_deref())?;
        }
        Cmd::Compare {
            config: path,
            workers,
            transport,
        } => {
            let [wa, wb] = workers[..] else {
                bail!("--workers takes exactly two counts");
            };
            let config = io::load_config(&path)?;
            let a = execute(&path, &config, wa, transport)?;
            let b = execute(&path, &config, wb, transport)?;
            let report = io::compare(&a.engine.collect(), &b.engine.collect(), 10.0 * config.alm.newton_tol);
            write_json(&report, None)?;
            if !report.pass {
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Scale {
            config: path,
            workers,
            repeats,
            output,
            transport,
        } => {
            let config = io::load_config(&path)?;
            let rows = io::scale_harness(&workers, repeats, |w| {
                execute(&path, &config, w, transport).map_err(|e| runtime::RuntimeError::Transport(format!("{e:#}")))
            })?;
            match output {
                Some(p) => io::write_scale_csv(&rows, std::fs::File::create(&p)?)?,
                None => io::write_scale_csv(&rows, std::io::stdout().lock())?,
            }
        }
        Cmd::Worker { config, id } => {
            let config = io::load_config(&config)?;
            let problem = config.build_problem()?;
            let mut endpoint = StreamEndpoint::new(std::io::stdin().lock(), std::io::stdout().lock());
            runtime::run_worker(&problem, &config.alm, id, &mut endpoint)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
