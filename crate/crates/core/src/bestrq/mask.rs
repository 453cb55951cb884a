use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::STACK;
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

/// Standard deviation of the noise written over masked frames.
pub const NOISE_STD: f64 = 0.1;

/// Masked positions on the stacked time axis of a batch, flattened as
/// `[B · T']` with `segment_len = T'`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub mask: Vec<bool>,
    /// Flattened positions that started a span, ascending.
    pub starts: Vec<usize>,
    pub span_length: usize,
    pub start_prob: f64,
    pub segment_len: usize,
}

impl MaskPlan {
    pub fn empty(n_positions: usize) -> Self {
        MaskPlan {
            mask: vec![false; n_positions],
            starts: Vec::new(),
            span_length: 1,
            start_prob: 0.0,
            segment_len: n_positions.max(1),
        }
    }

    /// Rebuilds the mask from span starts; spans stop at segment ends.
    pub fn from_starts(
        n_positions: usize,
        segment_len: usize,
        starts: &[usize],
        span_length: usize,
        start_prob: f64,
    ) -> Result<Self> {
        if segment_len == 0 || !n_positions.is_multiple_of(segment_len) {
            return Err(Error::Contract(format!(
                "{n_positions} positions do not split into segments of {segment_len}"
            )));
        }
        let mut mask = vec![false; n_positions];
        for &s in starts {
            if s >= n_positions {
                return Err(Error::Contract(format!(
                    "span start {s} outside {n_positions} positions"
                )));
            }
            let end = ((s / segment_len + 1) * segment_len).min(s + span_length);
            mask[s..end].iter_mut().for_each(|m| *m = true);
        }
        Ok(MaskPlan {
            mask,
            starts: starts.to_vec(),
            span_length,
            start_prob,
            segment_len,
        })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.masked_count() as f64 / self.mask.len() as f64
        }
    }
}

fn check_mask_params(start_prob: f64, span_length: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&start_prob) {
        return Err(Error::Config(format!(
            "mask start probability {start_prob} outside [0, 1]"
        )));
    }
    if span_length == 0 {
        return Err(Error::Config("mask span length must be at least 1".into()));
    }
    Ok(())
}

/// Each position starts a span of `span_length` with probability
/// `start_prob`; spans are clipped at the end of the sequence.
pub fn make_mask(n_positions: usize, start_prob: f64, span_length: usize, rng: &mut impl Rng) -> Result<MaskPlan> {
    make_batch_mask(1, n_positions, start_prob, span_length, rng)
}

/// [`make_mask`] for `batch` sequences of `len` positions each; spans never
/// cross into the next sequence.
pub fn make_batch_mask(
    batch: usize,
    len: usize,
    start_prob: f64,
    span_length: usize,
    rng: &mut impl Rng,
) -> Result<MaskPlan> {
    check_mask_params(start_prob, span_length)?;
    let n = batch * len;
    if n == 0 {
        return Ok(MaskPlan {
            span_length,
            start_prob,
            ..MaskPlan::empty(0)
        });
    }
    let starts: Vec<usize> = (0..n).filter(|_| rng.random_bool(start_prob)).collect();
    MaskPlan::from_starts(n, len, &starts, span_length, start_prob)
}

/// Overwrites the four raw frames behind every masked position with
/// `N(0, 0.1²)` noise. Other frames are copied unchanged.
pub fn apply_mask(features: &Tensor, plan: &MaskPlan, rng: &mut impl Rng) -> Result<Tensor> {
    if features.rank() != 3 {
        return Err(Error::shape(
            "apply_mask",
            format!("expected [B, T, d_feat], got {:?}", features.shape()),
        ));
    }
    let (b, t, f) = (features.dim(0), features.dim(1), features.dim(2));
    let tp = t / STACK;
    if plan.len() != b * tp || (!plan.is_empty() && plan.segment_len != tp) {
        return Err(Error::shape(
            "apply_mask",
            format!(
                "plan covers {} positions in segments of {}, features give {b} x {tp}",
                plan.len(),
                plan.segment_len
            ),
        ));
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut out = features.to_vec();
    for i in plan.masked_indices() {
        let (bi, j) = (i / tp, i % tp);
        let start = (bi * t + j * STACK) * f;
        for v in &mut out[start..start + STACK * f] {
            *v = noise.sample(rng);
        }
    }
    Tensor::new(out, features.shape())
}
