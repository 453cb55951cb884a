//! Random-projection quantizer targets, span masking and the masked
//! cross-entropy objective.

mod checkpoint;
mod loss;
mod mask;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use loss::{cross_entropy_oracle, pretrain_loss};
pub use mask::{apply_mask, make_batch_mask, make_mask, MaskPlan, NOISE_STD};
pub use optim::{Adam, AdamConfig};
pub use train::{pretrain_step, PretrainConfig, Pretrainer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

/// Raw frames per stacked target vector.
pub const STACK: usize = 4;

/// Codebook rows with a smaller norm are redrawn.
pub const MIN_ROW_NORM: f64 = 1e-6;

/// `[B, T, F]` → `[B, ⌊T/4⌋, 4F]`, concatenating each group of four frames in
/// order and dropping the remainder.
pub fn stack_frames(features: &Tensor) -> Result<Tensor> {
    if features.rank() != 3 {
        return Err(Error::shape(
            "stack_frames",
            format!("expected [B, T, d_feat], got {:?}", features.shape()),
        ));
    }
    let (b, t, f) = (features.dim(0), features.dim(1), features.dim(2));
    if t < STACK {
        return Err(Error::TooShort { min: STACK, got: t });
    }
    let tp = t / STACK;
    let mut out = Vec::with_capacity(b * tp * STACK * f);
    for bi in 0..b {
        let start = bi * t * f;
        out.extend_from_slice(&features.data()[start..start + tp * STACK * f]);
    }
    // row-major layout makes four consecutive frames one contiguous block
    Tensor::new(out, &[b, tp, STACK * f])
}

fn normal_matrix(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Frozen matrix `A`, `[4·d_feat, d_code]`; targets are `m · A`.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    matrix: Tensor,
}

impl RandomProjection {
    pub fn new(seed: u64, d_in: usize, d_code: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f6a);
        RandomProjection::from_matrix(Tensor::new(normal_matrix(&mut rng, d_in * d_code), &[d_in, d_code])?)
    }

    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::shape(
                "RandomProjection",
                format!("expected a matrix, got {:?}", matrix.shape()),
            ));
        }
        Ok(RandomProjection {
            matrix: matrix.detach(),
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn d_in(&self) -> usize {
        self.matrix.dim(0)
    }

    pub fn d_code(&self) -> usize {
        self.matrix.dim(1)
    }

    /// `m · A` for a single stacked vector.
    pub fn project(&self, m: &[f64]) -> Result<Vec<f64>> {
        if m.len() != self.d_in() {
            return Err(Error::shape(
                "quantize",
                format!(
                    "stacked vector has {} entries, projection expects {}",
                    m.len(),
                    self.d_in()
                ),
            ));
        }
        let (a, dc) = (self.matrix.data(), self.d_code());
        let mut out = vec![0.0; dc];
        for (i, &mi) in m.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(&a[i * dc..(i + 1) * dc]) {
                *o += mi * w;
            }
        }
        Ok(out)
    }
}

/// Frozen codebook, `[V, d_code]`, stored with unit-normalized rows alongside.
#[derive(Clone, Debug)]
pub struct Codebook {
    rows: Tensor,
    unit: Vec<f64>,
}

impl Codebook {
    pub fn new(seed: u64, vocab: usize, d_code: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x626f_6f6b);
        let mut data = Vec::with_capacity(vocab * d_code);
        for _ in 0..vocab {
            loop {
                let row = normal_matrix(&mut rng, d_code);
                if norm(&row) >= MIN_ROW_NORM {
                    data.extend(row);
                    break;
                }
            }
        }
        Codebook::from_rows(Tensor::new(data, &[vocab, d_code])?)
    }

    pub fn from_rows(rows: Tensor) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(Error::shape(
                "Codebook",
                format!("expected [V, d_code], got {:?}", rows.shape()),
            ));
        }
        let dc = rows.dim(1);
        let mut unit = Vec::with_capacity(rows.numel());
        for (i, r) in rows.data().chunks(dc).enumerate() {
            let n = norm(r);
            if n < MIN_ROW_NORM {
                return Err(Error::Contract(format!("codebook row {i} has norm {n:e}")));
            }
            unit.extend(r.iter().map(|v| v / n));
        }
        Ok(Codebook {
            rows: rows.detach(),
            unit,
        })
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn vocab(&self) -> usize {
        self.rows.dim(0)
    }

    pub fn d_code(&self) -> usize {
        self.rows.dim(1)
    }

    /// Row `i` scaled to unit length.
    pub fn unit_row(&self, i: usize) -> &[f64] {
        let dc = self.d_code();
        &self.unit[i * dc..(i + 1) * dc]
    }
}

impl PartialEq for RandomProjection {
    fn eq(&self, other: &Self) -> bool {
        self.matrix.shape() == other.matrix.shape() && self.matrix.data() == other.matrix.data()
    }
}

impl PartialEq for Codebook {
    fn eq(&self, other: &Self) -> bool {
        self.rows.shape() == other.rows.shape() && self.rows.data() == other.rows.data()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Index of the codebook row nearest to `m · A` after scaling both to unit
/// length. The lowest index wins a tie.
pub fn quantize(m: &[f64], proj: &RandomProjection, book: &Codebook) -> Result<usize> {
    if proj.d_code() != book.d_code() {
        return Err(Error::shape(
            "quantize",
            format!("projection width {} vs codebook width {}", proj.d_code(), book.d_code()),
        ));
    }
    let z = proj.project(m)?;
    let n = norm(&z);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateProjection);
    }
    let z: Vec<f64> = z.iter().map(|v| v / n).collect();
    let mut best = (0, f64::INFINITY);
    for i in 0..book.vocab() {
        let d: f64 = book.unit_row(i).iter().zip(&z).map(|(c, v)| (c - v) * (c - v)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

/// Targets for clean features: stack, then quantize every position.
/// Returns one index per `[B · ⌊T/4⌋]` position in row-major order.
pub fn compute_targets(features: &Tensor, proj: &RandomProjection, book: &Codebook) -> Result<Vec<usize>> {
    let stacked = stack_frames(features)?;
    let w = stacked.dim(2);
    stacked.data().chunks(w).map(|m| quantize(m, proj, book)).collect()
}
