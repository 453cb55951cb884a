//! `linmix bench`: scaling sweep over matched configs, CSV and summary.

use std::fmt::Write as _;
use std::fs;

use linmix_core::bench::{build_report, emit_csv, run_scaling_sweep, BenchmarkRecord, ScalingReport, SweepSpec};
use linmix_core::encoder::{build_matched_configs, EncoderConfig, ParamBudget};
use linmix_core::mixers::MixerKind;

use crate::config::RunConfig;
use crate::{CliError, CliResult};

pub fn sweep_spec(cfg: &RunConfig) -> SweepSpec {
    SweepSpec {
        lengths: cfg.lengths.clone(),
        batch_size: cfg.batch_size,
        repeats: cfg.repeats,
        warmup: cfg.warmup,
        kinds: cfg.kinds.clone(),
        seed: cfg.seed(),
        memory_limit: cfg.memory_limit,
    }
}

/// One encoder config per kind in [`MixerKind::ALL`] order: matched to the
/// budget when one is set, otherwise the model settings with the kind swapped.
pub fn bench_configs(cfg: &RunConfig) -> CliResult<Vec<EncoderConfig>> {
    let base = cfg.encoder();
    match cfg.budget {
        Some(target) => Ok(build_matched_configs(ParamBudget::new(target, cfg.tolerance)?, base)?),
        None => Ok(MixerKind::ALL
            .iter()
            .map(|&k| {
                let mut c = base.clone();
                c.mixer.kind = k;
                c
            })
            .collect()),
    }
}

pub fn run_bench(cfg: &RunConfig, on_cell: impl FnMut(&BenchmarkRecord)) -> CliResult<ScalingReport> {
    let spec = sweep_spec(cfg);
    spec.validate()?;
    let configs = bench_configs(cfg)?;
    let pick = |kind: MixerKind| {
        Ok(configs
            .iter()
            .find(|c| c.kind() == kind)
            .expect("one config per kind")
            .clone())
    };
    let records = run_scaling_sweep(&spec, pick, on_cell)?;
    Ok(build_report(&records, cfg.seed())?)
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.3}"))
}

/// Per-kind exponents, then relative time and memory against MHSA.
pub fn summary_table(report: &ScalingReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:>9} {:>9} {:>9} {:>8}",
        "kind", "time_exp", "mem_exp", "mac_exp", "max_cv"
    );
    for f in &report.fits {
        let _ = writeln!(
            s,
            "{:<14} {:>9} {:>9} {:>9} {:>8.3}",
            f.kind.name(),
            opt(f.time_exponent),
            opt(f.memory_exponent),
            opt(f.mac_exponent),
            f.max_time_cv
        );
    }
    if report.missing_baseline {
        s.push_str("\nno mhsa cells, so no deltas\n");
    } else if !report.deltas.is_empty() {
        let _ = writeln!(s, "\nrelative to mhsa (negative is lower)");
        let _ = writeln!(s, "{:<14} {:>7} {:>9} {:>9}", "kind", "frames", "time", "memory");
        for d in &report.deltas {
            let _ = writeln!(
                s,
                "{:<14} {:>7} {:>8.1}% {:>8.1}%",
                d.kind.name(),
                d.length_frames,
                100.0 * d.time,
                100.0 * d.memory
            );
        }
    }
    for (kind, len) in &report.failed {
        let _ = writeln!(s, "failed: {kind} at {len} frames");
    }
    s
}

/// Writes `bench.csv`, `bench_summary.txt` and `config.txt` under `out`.
pub fn cmd_bench(cfg: &RunConfig) -> CliResult<()> {
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    write(out.join("config.txt"), &cfg.echo())?;
    let report = run_bench(cfg, |r| {
        let status = match &r.failure {
            Some(f) => format!("failed: {f}"),
            None => format!("{:.3} s", r.wall_times.iter().sum::<f64>() / r.wall_times.len() as f64),
        };
        eprintln!("{:<14} {:>6} frames  {status}", r.kind.name(), r.length_frames);
    })?;
    emit_csv(&report, &out.join("bench.csv"))?;
    let table = summary_table(&report);
    write(out.join("bench_summary.txt"), &table)?;
    print!("{table}");
    println!("wrote {}", out.join("bench.csv").display());
    Ok(())
}

pub(crate) fn write(path: std::path::PathBuf, text: &str) -> CliResult<()> {
    fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}
