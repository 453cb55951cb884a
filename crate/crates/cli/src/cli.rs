//! Argument parsing and dispatch for the `linmix` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::{parse_config, RunConfig};
use crate::verify::{format_row, list_checks, run_checks, VerifyOptions};
use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "linmix",
    version,
    about = "Benchmark, pre-train and verify linear-time sequence mixers"
)]
pub struct Cli {
    /// Config file of `key = value` lines
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Any config setting; repeatable, applied before the dedicated flags
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Forward-pass scaling sweep; writes bench.csv and a summary table
    Bench {
        /// Comma-separated mixer kinds, or `all`
        #[arg(long)]
        kinds: Option<String>,
        /// Comma-separated raw frame counts (100 per second)
        #[arg(long)]
        lengths: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Payload byte cap per forward pass, or `none`
        #[arg(long)]
        memory_limit: Option<String>,
        /// Parameter target for matched configs, or `none`
        #[arg(long)]
        budget: Option<String>,
    },
    /// Masked-prediction pre-training; writes loss.csv and checkpoint.bin
    Pretrain {
        #[arg(long)]
        mixer: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        /// Synthetic feature spec, e.g. `n=64,len=400..800,d=80`
        #[arg(long, value_name = "SPEC", conflicts_with = "features")]
        synthetic: Option<String>,
        /// Feature container file
        #[arg(long, value_name = "PATH")]
        features: Option<PathBuf>,
        #[arg(long)]
        frame_cap: Option<usize>,
        #[arg(long)]
        log_every: Option<u64>,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Property suite; exits 0 only if every selected check passes
    Verify {
        /// Run only checks carrying this tag, e.g. `mamba` or `grad`
        #[arg(long, value_name = "TAG")]
        only: Option<String>,
        /// Print check names and tags without running them
        #[arg(long)]
        list: bool,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn push<T: ToString>(overrides: &mut Vec<(String, String)>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        overrides.push((key.to_string(), v.to_string()));
    }
}

impl Cli {
    /// `--set` pairs first, then the dedicated flags, which win.
    pub fn overrides(&self) -> CliResult<Vec<(String, String)>> {
        let mut o = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            o.push((k.trim().to_string(), v.trim().to_string()));
        }
        push(&mut o, "seed", &self.seed);
        push(&mut o, "out", &self.out.as_ref().map(|p| p.display()));
        match &self.command {
            Command::Bench {
                kinds,
                lengths,
                repeats,
                warmup,
                batch_size,
                memory_limit,
                budget,
            } => {
                push(&mut o, "kinds", kinds);
                push(&mut o, "lengths", lengths);
                push(&mut o, "repeats", repeats);
                push(&mut o, "warmup", warmup);
                push(&mut o, "batch_size", batch_size);
                push(&mut o, "memory_limit", memory_limit);
                push(&mut o, "budget", budget);
            }
            Command::Pretrain {
                mixer,
                steps,
                synthetic,
                features,
                frame_cap,
                log_every,
                ..
            } => {
                push(&mut o, "mixer", mixer);
                push(&mut o, "steps", steps);
                push(
                    &mut o,
                    "features",
                    &synthetic.as_ref().map(|s| format!("synthetic:{s}")),
                );
                push(&mut o, "features", &features.as_ref().map(|p| p.display()));
                push(&mut o, "frame_cap", frame_cap);
                push(&mut o, "log_every", log_every);
            }
            Command::Verify { .. } => {}
        }
        Ok(o)
    }

    pub fn run_config(&self) -> CliResult<RunConfig> {
        parse_config(self.config.as_deref(), &self.overrides()?)
    }
}

pub fn cmd_verify(only: Option<&str>, opts: &VerifyOptions) -> CliResult<()> {
    if let Some(tag) = only {
        if !list_checks().iter().any(|(_, tags)| tags.iter().any(|t| t == tag)) {
            return Err(CliError::Usage(format!(
                "no check carries tag {tag:?}; see `verify --list`"
            )));
        }
    }
    let results = run_checks(only, opts, |r| println!("{}", format_row(r)));
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    println!("{} of {} checks passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("failed checks: {}", failed.join(", "))))
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Bench { .. } => crate::bench::cmd_bench(&cli.run_config()?),
        Command::Pretrain { resume, .. } => crate::pretrain::cmd_pretrain(&cli.run_config()?, resume.as_deref()),
        Command::Verify { list: true, .. } => {
            for (name, tags) in list_checks() {
                println!("{name:<28} {}", tags.join(","));
            }
            Ok(())
        }
        Command::Verify { only, inject_fault, .. } => cmd_verify(
            only.as_deref(),
            &VerifyOptions {
                inject_fault: *inject_fault,
            },
        ),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 for usage and config errors, 1 for
/// failures while running.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
