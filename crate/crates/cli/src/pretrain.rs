//! `linmix pretrain`: the masked-prediction loop over bucketed batches.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use linmix_core::bestrq::{load_checkpoint, save_checkpoint, Pretrainer};

use crate::batching::Batcher;
use crate::config::RunConfig;
use crate::{CliError, CliResult};

pub const LOG_HEADER: &str = "step,loss";

/// A trainer and the batch stream it consumes.
pub struct Session {
    pub trainer: Pretrainer,
    pub batcher: Batcher,
}

/// Fresh run from `cfg`, or the state saved at `resume`. A checkpoint must
/// have been written with the same model settings.
pub fn open_session(cfg: &RunConfig, resume: Option<&Path>) -> CliResult<Session> {
    let trainer = match resume {
        Some(path) => {
            let t = load_checkpoint(path).map_err(|e| CliError::Runtime(e.to_string()))?;
            let saved = t.config.entries();
            if let Some(((k, was), (_, now))) = saved.iter().zip(cfg.model.entries()).find(|(a, b)| a.1 != b.1) {
                return Err(CliError::Usage(format!(
                    "checkpoint {} has {k} = {was} but the run config has {now}",
                    path.display()
                )));
            }
            t
        }
        None => Pretrainer::new(&cfg.model)?,
    };
    let seqs = cfg.features.load(cfg.encoder().d_feat, cfg.seed())?;
    let batcher = Batcher::new(seqs, cfg.frame_cap, cfg.seed())?;
    Ok(Session { trainer, batcher })
}

impl Session {
    pub fn step_count(&self) -> u64 {
        self.trainer.step
    }

    /// Trains until `steps` total steps, calling `on_step(step, loss)` with
    /// the one-based step number after each update.
    pub fn run_to(&mut self, steps: u64, mut on_step: impl FnMut(u64, f64) -> CliResult<()>) -> CliResult<()> {
        while self.trainer.step < steps {
            let step = self.trainer.step + 1;
            let batch = self.batcher.batch(self.trainer.step)?;
            let loss = self
                .trainer
                .step(&batch)
                .map_err(|e| CliError::Runtime(format!("step {step}: {e}")))?;
            if !loss.is_finite() {
                return Err(CliError::Runtime(format!(
                    "loss became {loss} at step {step}; aborting"
                )));
            }
            on_step(step, loss)?;
        }
        Ok(())
    }
}

/// Rows of an existing log up to and including `step`.
fn kept_rows(path: &Path, step: u64) -> CliResult<Vec<String>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(CliError::Runtime(format!("{}: {e}", path.display()))),
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step)
        })
        .map(str::to_string)
        .collect())
}

/// Writes `config.txt`, `loss.csv` and the final `checkpoint.bin` under `out`.
/// On resume the log keeps its rows up to the checkpoint's step.
pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>) -> CliResult<()> {
    let out = &cfg.out;
    let io = |p: &Path, e: std::io::Error| CliError::Runtime(format!("{}: {e}", p.display()));
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    crate::bench::write(out.join("config.txt"), &cfg.echo())?;
    let mut session = open_session(cfg, resume)?;
    let log_path = out.join("loss.csv");
    let previous = if resume.is_some() {
        kept_rows(&log_path, session.step_count())?
    } else {
        Vec::new()
    };
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io(&log_path, e))?);
    writeln!(log, "{LOG_HEADER}").map_err(|e| io(&log_path, e))?;
    for row in &previous {
        writeln!(log, "{row}").map_err(|e| io(&log_path, e))?;
    }
    let mut last = None;
    let result = session.run_to(cfg.steps, |step, loss| {
        last = Some((step, loss));
        if step % cfg.log_every == 0 {
            writeln!(log, "{step},{loss}").map_err(|e| io(&log_path, e))?;
        }
        Ok(())
    });
    log.flush().map_err(|e| io(&log_path, e))?;
    result?;
    let ckpt = out.join("checkpoint.bin");
    save_checkpoint(&ckpt, &session.trainer)?;
    if let Some((step, loss)) = last {
        println!("step {step} loss {loss:.4}");
    }
    println!("wrote {} and {}", log_path.display(), ckpt.display());
    Ok(())
}
