//! Length-bucketed batches under a total frame cap.

use linmix_core::bestrq::STACK;
use linmix_core::{Error, Result, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SHUFFLE_TAG: u64 = 0x6261_7463;

/// Sequences sorted by length are packed greedily: each batch takes as many
/// of the next-shortest sequences as fit under the cap when all are cropped
/// to the first one's length. Batch order is reshuffled every epoch, and the
/// batch for a step depends only on the seed and the step.
#[derive(Clone, Debug)]
pub struct Batcher {
    seqs: Vec<Tensor>,
    batches: Vec<Vec<usize>>,
    crops: Vec<usize>,
    d_feat: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(seqs: Vec<Tensor>, frame_cap: usize, seed: u64) -> Result<Self> {
        let d_feat = seqs
            .first()
            .map(|s| s.dim(1))
            .ok_or_else(|| Error::Config("no feature sequences".into()))?;
        if let Some(s) = seqs.iter().find(|s| s.shape().len() != 2 || s.dim(1) != d_feat) {
            return Err(Error::Shape {
                op: "batcher",
                detail: format!("sequence {:?} vs width {d_feat}", s.shape()),
            });
        }
        if frame_cap < STACK {
            return Err(Error::Config(format!(
                "frame_cap must be at least {STACK}, got {frame_cap}"
            )));
        }
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.sort_by_key(|&i| (seqs[i].dim(0), i));
        let (mut batches, mut crops) = (Vec::new(), Vec::new());
        let mut rest = &order[..];
        while let Some(&first) = rest.first() {
            let crop = seqs[first].dim(0).min(frame_cap) / STACK * STACK;
            if crop == 0 {
                return Err(Error::TooShort {
                    min: STACK,
                    got: seqs[first].dim(0),
                });
            }
            let take = (frame_cap / crop).clamp(1, rest.len());
            batches.push(rest[..take].to_vec());
            crops.push(crop);
            rest = &rest[take..];
        }
        Ok(Batcher {
            seqs,
            batches,
            crops,
            d_feat,
            seed,
        })
    }

    /// Batches per epoch.
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    fn slot(&self, step: u64) -> usize {
        let n = self.len() as u64;
        let mut perm: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ SHUFFLE_TAG);
        rng.set_stream(step / n);
        perm.shuffle(&mut rng);
        perm[(step % n) as usize]
    }

    /// `(sequences, frames per sequence)` of the batch used at `step`.
    pub fn shape_at(&self, step: u64) -> (usize, usize) {
        let b = self.slot(step);
        (self.batches[b].len(), self.crops[b])
    }

    /// `[B, T, d_feat]` batch for the zero-based `step`.
    pub fn batch(&self, step: u64) -> Result<Tensor> {
        let b = self.slot(step);
        let t = self.crops[b];
        let mut data = Vec::with_capacity(self.batches[b].len() * t * self.d_feat);
        for &i in &self.batches[b] {
            data.extend_from_slice(&self.seqs[i].data()[..t * self.d_feat]);
        }
        Tensor::new(data, &[self.batches[b].len(), t, self.d_feat])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(lens: &[usize]) -> Vec<Tensor> {
        lens.iter()
            .enumerate()
            .map(|(i, &t)| Tensor::full(&[t, 2], i as f64).unwrap())
            .collect()
    }

    #[test]
    fn batches_respect_cap_and_cover_every_sequence() {
        let lens = [40, 9, 100, 33, 12, 57, 81, 16, 23, 64];
        let b = Batcher::new(seqs(&lens), 96, 3).unwrap();
        let mut seen: Vec<usize> = b.batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..lens.len()).collect::<Vec<_>>());
        for step in 0..50 {
            let x = b.batch(step).unwrap();
            assert!(x.dim(0) * x.dim(1) <= 96);
            assert_eq!(x.dim(1) % STACK, 0);
        }
    }

    #[test]
    fn long_sequence_is_cropped_to_cap() {
        let b = Batcher::new(seqs(&[500]), 64, 0).unwrap();
        assert_eq!(b.shape_at(0), (1, 64));
    }

    #[test]
    fn each_epoch_visits_every_batch_once() {
        let b = Batcher::new(seqs(&[8, 12, 16, 20, 24, 28, 32]), 24, 5).unwrap();
        let n = b.len() as u64;
        for epoch in 0..3 {
            let mut slots: Vec<usize> = (epoch * n..(epoch + 1) * n).map(|s| b.slot(s)).collect();
            slots.sort();
            assert_eq!(slots, (0..b.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn too_short_sequence_is_an_error() {
        assert!(Batcher::new(seqs(&[3, 10]), 64, 0).is_err());
    }
}
