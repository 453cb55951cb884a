//! Forward-pass scaling sweep over sequence length: wall time, peak payload
//! bytes and multiply-accumulate counts per mixer kind.

mod report;
mod stats;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use report::{
    build_report, emit_csv, parse_csv, to_csv, CellSummary, CsvRow, Delta, KindFit, ParsedCsv, ScalingReport,
    CSV_HEADER,
};
pub use stats::{bootstrap_ci, coefficient_of_variation, fit_exponent, mean};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::mixers::MixerKind;
use crate::tensorcore::{count_macs, no_grad, AllocationMeter, Tensor};

/// Raw frames per second of audio at a 10 ms hop.
pub const FRAMES_PER_SECOND: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    /// Raw input frames, strictly increasing.
    pub lengths: Vec<usize>,
    pub batch_size: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub kinds: Vec<MixerKind>,
    pub seed: u64,
    /// Payload cap per forward pass; a cell exceeding it is recorded as failed.
    pub memory_limit: Option<usize>,
}

impl Default for SweepSpec {
    /// 10, 20, 40 and 80 s of audio, batch 6, 10 timed runs after 2 warmups.
    fn default() -> Self {
        SweepSpec {
            lengths: vec![1000, 2000, 4000, 8000],
            batch_size: 6,
            repeats: 10,
            warmup: 2,
            kinds: MixerKind::ALL.to_vec(),
            seed: 0,
            memory_limit: None,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.kinds.is_empty() {
            return Err(Error::Config("sweep needs at least one length and one kind".into()));
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) || self.lengths[0] == 0 {
            return Err(Error::Config(format!(
                "sweep lengths must be positive and strictly increasing, got {:?}",
                self.lengths
            )));
        }
        if self.repeats < 3 {
            return Err(Error::Config(format!(
                "repeats must be at least 3, got {}",
                self.repeats
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRecord {
    pub kind: MixerKind,
    pub length_frames: usize,
    pub wall_times: Vec<f64>,
    pub peak_bytes: Vec<usize>,
    pub mac_count: u64,
    /// Set when the cell could not run, e.g. over the memory limit.
    pub failure: Option<String>,
}

impl BenchmarkRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// Seeded standard-normal features, `[batch, frames, d_feat]`.
pub fn random_features(batch: usize, frames: usize, d_feat: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * frames * d_feat)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::new(data, &[batch, frames, d_feat])
}

/// Runs every `(kind, length)` cell in order. `config_for` supplies the
/// model for a kind; `on_cell` sees each record as soon as it is done.
pub fn run_scaling_sweep(
    spec: &SweepSpec,
    mut config_for: impl FnMut(MixerKind) -> Result<EncoderConfig>,
    mut on_cell: impl FnMut(&BenchmarkRecord),
) -> Result<Vec<BenchmarkRecord>> {
    spec.validate()?;
    let mut out = Vec::new();
    for &kind in &spec.kinds {
        let cfg = config_for(kind)?;
        let model = Encoder::new(&cfg)?;
        for &len in &spec.lengths {
            let rec = run_cell(spec, &model, kind, len)?;
            on_cell(&rec);
            out.push(rec);
        }
    }
    Ok(out)
}

fn run_cell(spec: &SweepSpec, model: &Encoder, kind: MixerKind, len: usize) -> Result<BenchmarkRecord> {
    let mut rec = BenchmarkRecord {
        kind,
        length_frames: len,
        wall_times: Vec::with_capacity(spec.repeats),
        peak_bytes: Vec::with_capacity(spec.repeats),
        mac_count: 0,
        failure: None,
    };
    let x = random_features(spec.batch_size, len, model.config.d_feat, spec.seed ^ len as u64)?;
    let meter = AllocationMeter::new();
    for run in 0..spec.warmup + spec.repeats {
        // payload above what is live at entry: activations, not weights or input
        meter.set_limit(spec.memory_limit);
        let base = meter.live_bytes();
        let start = Instant::now();
        let ((result, macs), peak) = AllocationMeter::scoped(&meter, || {
            meter.with_metering(|| count_macs(|| no_grad(|| model.encode(&x).map(drop))))
        })?;
        let elapsed = start.elapsed().as_secs_f64();
        match result {
            Ok(()) => {}
            Err(e @ Error::OutOfMemory { .. }) => {
                rec.failure = Some(e.to_string());
                rec.wall_times.clear();
                rec.peak_bytes.clear();
                return Ok(rec);
            }
            Err(e) => return Err(e),
        }
        if run >= spec.warmup {
            rec.wall_times.push(elapsed.max(f64::MIN_POSITIVE));
            rec.peak_bytes.push(peak - base);
            rec.mac_count = macs;
        }
    }
    Ok(rec)
}
