use super::{want, FnBackward};
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tensor {
    fn last_dim(&self) -> usize {
        *self.shape().last().expect("tensors have rank >= 1")
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let d = self.last_dim();
        let mut out = self.to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        Tensor::from_op(
            "softmax_lastdim",
            out,
            self.shape(),
            &[self],
            FnBackward::new("softmax_lastdim", move |ctx, g| {
                let y = ctx.output.data();
                let mut gi = vec![0.0; y.len()];
                for ((gr, yr), gir) in g.chunks(d).zip(y.chunks(d)).zip(gi.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in gir.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(gi)]
            }),
        )
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `scale` and `shift` (both shaped like the last axis).
    pub fn layer_norm(&self, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
        let d = self.last_dim();
        if scale.shape() != [d] || shift.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("scale {:?} / shift {:?} must be [{d}]", scale.shape(), shift.shape()),
            ));
        }
        let (gamma, beta) = (scale.data(), shift.data());
        let mut out = self.to_vec();
        for row in out.chunks_mut(d) {
            let (mean, inv_std) = moments(row);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * gamma[j] + beta[j];
            }
        }
        Tensor::from_op(
            "layer_norm",
            out,
            self.shape(),
            &[self, scale, shift],
            FnBackward::new("layer_norm", move |ctx, g| {
                let x = ctx.inputs[0].data();
                let gamma = ctx.inputs[1].data();
                let mut gx = want(ctx, 0).then(|| vec![0.0; x.len()]);
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, (xr, gr)) in x.chunks(d).zip(g.chunks(d)).enumerate() {
                    let (mean, inv_std) = moments(xr);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * inv_std;
                        dxhat[j] = gr[j] * gamma[j];
                        gg[j] += gr[j] * xhat[j];
                        gb[j] += gr[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    if let Some(gx) = gx.as_mut() {
                        let (m1, m2) = (m1 / d as f64, m2 / d as f64);
                        for j in 0..d {
                            gx[r * d + j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                vec![gx, want(ctx, 1).then_some(gg), want(ctx, 2).then_some(gb)]
            }),
        )
    }

    /// `[B, T, D] -> [B, D]`: average over the time axis.
    pub fn mean_over_time(&self) -> Result<Tensor> {
        let &[b, t, d] = self.shape() else {
            return Err(Error::shape(
                "mean_over_time",
                format!("expected [B, T, D], got {:?}", self.shape()),
            ));
        };
        let x = self.data();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let acc = &mut out[bi * d..(bi + 1) * d];
            for ti in 0..t {
                let row = &x[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= t as f64);
        }
        Tensor::from_op(
            "mean_over_time",
            out,
            &[b, d],
            &[self],
            FnBackward::new("mean_over_time", move |_, g| {
                let mut gi = vec![0.0; b * t * d];
                let inv = 1.0 / t as f64;
                for bi in 0..b {
                    for ti in 0..t {
                        for j in 0..d {
                            gi[(bi * t + ti) * d + j] = g[bi * d + j] * inv;
                        }
                    }
                }
                vec![Some(gi)]
            }),
        )
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum_all",
            vec![s],
            &[1],
            &[self],
            FnBackward::new("sum_all", move |_, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        self.sum_all()?.scale(1.0 / self.numel() as f64)
    }

    /// Sum over the last axis, dropping it (rank-1 inputs give `[1]`).
    pub fn sum_lastdim(&self) -> Result<Tensor> {
        let d = self.last_dim();
        let out: Vec<f64> = self.data().chunks(d).map(|r| r.iter().sum()).collect();
        let mut shape = self.shape()[..self.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::from_op(
            "sum_lastdim",
            out,
            &shape,
            &[self],
            FnBackward::new("sum_lastdim", move |_, g| {
                vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect())]
            }),
        )
    }
}

fn moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}
