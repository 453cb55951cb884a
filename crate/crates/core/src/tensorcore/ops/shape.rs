use super::FnBackward;
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

fn transpose_block(src: &[f64], dst: &mut [f64], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

fn transpose_last2(x: &[f64], batches: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let blk = rows * cols;
    for b in 0..batches {
        transpose_block(&x[b * blk..(b + 1) * blk], &mut out[b * blk..(b + 1) * blk], rows, cols);
    }
    out
}

fn swap_12(x: &[f64], a: usize, b: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ai in 0..a {
        for bi in 0..b {
            for ci in 0..c {
                let src = ((ai * b + bi) * c + ci) * d;
                let dst = ((ai * c + ci) * b + bi) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

impl Tensor {
    /// `[A, B, C, D]` → `[A, C, B, D]`.
    pub fn swap_axes_12(&self) -> Result<Tensor> {
        let &[a, b, c, d] = self.shape() else {
            return Err(Error::shape(
                "swap_axes_12",
                format!("expected rank 4, got {:?}", self.shape()),
            ));
        };
        Tensor::from_op(
            "swap_axes_12",
            swap_12(self.data(), a, b, c, d),
            &[a, c, b, d],
            &[self],
            FnBackward::new("swap_axes_12", move |_, g| vec![Some(swap_12(g, a, c, b, d))]),
        )
    }

    /// Same payload, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::share_payload(
            self,
            shape,
            FnBackward::new("reshape", |_, g| vec![Some(g.to_vec())]),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", "needs rank >= 2"));
        }
        let (rows, cols) = (self.dim(r - 2), self.dim(r - 1));
        let batches = self.numel() / (rows * cols);
        let out = transpose_last2(self.data(), batches, rows, cols);
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Tensor::from_op(
            "transpose",
            out,
            &shape,
            &[self],
            FnBackward::new("transpose", move |_, g| {
                vec![Some(transpose_last2(g, batches, cols, rows))]
            }),
        )
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_lastdim(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_lastdim", "no inputs"))?;
        let lead = &first.shape()[..first.rank() - 1];
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        for p in parts {
            if &p.shape()[..p.rank() - 1] != lead {
                return Err(Error::shape(
                    "concat_lastdim",
                    format!("leading dims {:?} vs {:?}", p.shape(), first.shape()),
                ));
            }
        }
        let total: usize = widths.iter().sum();
        let rows = first.numel() / widths[0];
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let widths_b = widths.clone();
        Tensor::from_op(
            "concat_lastdim",
            out,
            &shape,
            parts,
            FnBackward::new("concat_lastdim", move |ctx, g| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths_b.len());
                for (i, &w) in widths_b.iter().enumerate() {
                    if ctx.inputs[i].requires_grad() {
                        let mut gi = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gi.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        grads.push(Some(gi));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        )
    }

    /// Columns `start..start + len` of the last axis.
    pub fn narrow_lastdim(&self, start: usize, len: usize) -> Result<Tensor> {
        let d = *self.shape().last().unwrap();
        if len == 0 || start + len > d {
            return Err(Error::shape(
                "narrow_lastdim",
                format!("range {start}..{} outside width {d}", start + len),
            ));
        }
        let rows = self.numel() / d;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Tensor::from_op(
            "narrow_lastdim",
            out,
            &shape,
            &[self],
            FnBackward::new("narrow_lastdim", move |_, g| {
                let mut gi = vec![0.0; rows * d];
                for r in 0..rows {
                    gi[r * d + start..r * d + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![Some(gi)]
            }),
        )
    }

    /// Reverses axis 1 of a `[B, T, D]` tensor.
    pub fn reverse_time(&self) -> Result<Tensor> {
        let &[b, t, d] = self.shape() else {
            return Err(Error::shape(
                "reverse_time",
                format!("expected [B, T, D], got {:?}", self.shape()),
            ));
        };
        let flip = move |x: &[f64]| {
            let mut out = vec![0.0; x.len()];
            for bi in 0..b {
                for ti in 0..t {
                    let src = (bi * t + ti) * d;
                    let dst = (bi * t + (t - 1 - ti)) * d;
                    out[dst..dst + d].copy_from_slice(&x[src..src + d]);
                }
            }
            out
        };
        Tensor::from_op(
            "reverse_time",
            flip(self.data()),
            self.shape(),
            &[self],
            FnBackward::new("reverse_time", move |_, g| vec![Some(flip(g))]),
        )
    }

    /// Rows of a `[V, D]` table: output `[indices.len(), D]`.
    pub fn embedding_lookup(&self, indices: &[usize]) -> Result<Tensor> {
        let &[v, d] = self.shape() else {
            return Err(Error::shape(
                "embedding_lookup",
                format!("table must be [V, D], got {:?}", self.shape()),
            ));
        };
        if indices.is_empty() {
            return Err(Error::shape("embedding_lookup", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("index {bad} outside vocabulary {v}"),
            ));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        let idx = indices.to_vec();
        Tensor::from_op(
            "embedding_lookup",
            out,
            &[indices.len(), d],
            &[self],
            FnBackward::new("embedding_lookup", move |_, g| {
                let mut gt = vec![0.0; v * d];
                for (r, &i) in idx.iter().enumerate() {
                    gt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(gt)]
            }),
        )
    }
}
