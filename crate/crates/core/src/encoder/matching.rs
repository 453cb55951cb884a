use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::mixers::MixerKind;

/// Upper bound for any width knob during the search.
const KNOB_MAX: usize = 1 << 22;

/// Target trainable-parameter count and the allowed relative deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamBudget {
    pub target: usize,
    pub tolerance: f64,
}

impl ParamBudget {
    pub fn new(target: usize, tolerance: f64) -> Result<Self> {
        if !(tolerance > 0.0 && tolerance <= 0.05) {
            return Err(Error::Config(format!(
                "budget tolerance must lie in (0, 0.05], got {tolerance}"
            )));
        }
        if target == 0 {
            return Err(Error::Config("budget target must be positive".into()));
        }
        Ok(ParamBudget { target, tolerance })
    }

    pub fn relative_error(&self, count: usize) -> f64 {
        (count as f64 - self.target as f64).abs() / self.target as f64
    }

    pub fn admits(&self, count: usize) -> bool {
        self.relative_error(count) <= self.tolerance
    }
}

/// Name and current value of the width adjusted for `cfg`'s mixer kind.
pub fn knob(cfg: &EncoderConfig) -> (&'static str, usize) {
    match cfg.kind() {
        MixerKind::Mhsa | MixerKind::Fastformer => ("d_ffn", cfg.d_ffn),
        MixerKind::SummaryMixing => ("d_summary", cfg.mixer.d_summary),
        MixerKind::HyperMixing => ("d_tmmlp", cfg.mixer.d_tmmlp),
        MixerKind::Mamba => ("d_inner", cfg.mixer.d_inner),
    }
}

pub fn set_knob(cfg: &mut EncoderConfig, value: usize) {
    match cfg.kind() {
        MixerKind::Mhsa | MixerKind::Fastformer => cfg.d_ffn = value,
        MixerKind::SummaryMixing => cfg.mixer.d_summary = value,
        MixerKind::HyperMixing => cfg.mixer.d_tmmlp = value,
        MixerKind::Mamba => cfg.mixer.d_inner = value,
    }
}

fn count_at(cfg: &EncoderConfig, value: usize) -> usize {
    let mut c = cfg.clone();
    set_knob(&mut c, value);
    c.param_count()
}

/// One config per mixer kind, in [`MixerKind::ALL`] order, each with its
/// width knob chosen to bring the count closest to the budget.
pub fn build_matched_configs(budget: ParamBudget, base: &EncoderConfig) -> Result<Vec<EncoderConfig>> {
    base.validate()?;
    MixerKind::ALL
        .iter()
        .map(|&kind| {
            let mut cfg = base.clone();
            cfg.mixer.kind = kind;
            match_one(budget, cfg)
        })
        .collect()
}

fn match_one(budget: ParamBudget, mut cfg: EncoderConfig) -> Result<EncoderConfig> {
    let target = budget.target;
    // smallest knob whose count reaches the target
    let (mut lo, mut hi) = (1usize, KNOB_MAX);
    if count_at(&cfg, hi) < target {
        lo = hi;
    } else {
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if count_at(&cfg, mid) >= target {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
    }
    let mut best = lo;
    if lo > 1 {
        let below = lo - 1;
        if budget.relative_error(count_at(&cfg, below)) < budget.relative_error(count_at(&cfg, lo)) {
            best = below;
        }
    }
    let closest = count_at(&cfg, best);
    if !budget.admits(closest) {
        return Err(Error::InfeasibleBudget {
            kind: format!("{} ({})", cfg.kind(), knob(&cfg).0),
            target,
            closest,
        });
    }
    set_knob(&mut cfg, best);
    Ok(cfg)
}
