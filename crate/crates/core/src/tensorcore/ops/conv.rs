use super::{gemm, want, FnBackward};
use crate::error::{Error, Result};
use crate::tensorcore::meter::add_macs;
use crate::tensorcore::Tensor;

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    len_in: usize,
    len_out: usize,
    c_in: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// `[B·T_out, C_in·K]` patch matrix; column index is `ci·K + k`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let Geometry {
            batch,
            len_in,
            len_out,
            c_in,
            kernel,
            stride,
            pad,
        } = *self;
        let width = c_in * kernel;
        let mut cols = vec![0.0; batch * len_out * width];
        for b in 0..batch {
            for t in 0..len_out {
                let row = &mut cols[(b * len_out + t) * width..(b * len_out + t + 1) * width];
                for k in 0..kernel {
                    let src = (t * stride + k) as isize - pad as isize;
                    if src < 0 || src as usize >= len_in {
                        continue;
                    }
                    let frame = &x[(b * len_in + src as usize) * c_in..][..c_in];
                    for (ci, &v) in frame.iter().enumerate() {
                        row[ci * kernel + k] = v;
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let Geometry {
            batch,
            len_in,
            len_out,
            c_in,
            kernel,
            stride,
            pad,
        } = *self;
        let width = c_in * kernel;
        let mut x = vec![0.0; batch * len_in * c_in];
        for b in 0..batch {
            for t in 0..len_out {
                let row = &cols[(b * len_out + t) * width..(b * len_out + t + 1) * width];
                for k in 0..kernel {
                    let src = (t * stride + k) as isize - pad as isize;
                    if src < 0 || src as usize >= len_in {
                        continue;
                    }
                    let frame = &mut x[(b * len_in + src as usize) * c_in..][..c_in];
                    for (ci, v) in frame.iter_mut().enumerate() {
                        *v += row[ci * kernel + k];
                    }
                }
            }
        }
        x
    }
}

impl Tensor {
    /// 1-D convolution over the time axis of `[B, T, C_in]` with weights
    /// `[C_out, C_in, K]` and bias `[C_out]`; output `[B, T_out, C_out]` with
    /// `T_out = (T + 2·pad - K) / stride + 1`.
    pub fn conv1d(&self, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let &[batch, len_in, c_in] = self.shape() else {
            return Err(Error::shape(
                "conv1d",
                format!("input must be [B, T, C], got {:?}", self.shape()),
            ));
        };
        let &[c_out, wc_in, kernel] = weight.shape() else {
            return Err(Error::shape(
                "conv1d",
                format!("weight must be [C_out, C_in, K], got {:?}", weight.shape()),
            ));
        };
        if wc_in != c_in || bias.shape() != [c_out] || stride == 0 {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input {:?}, weight {:?}, bias {:?}, stride {stride}",
                    self.shape(),
                    weight.shape(),
                    bias.shape()
                ),
            ));
        }
        if len_in + 2 * pad < kernel {
            return Err(Error::shape(
                "conv1d",
                format!("length {len_in} with padding {pad} shorter than kernel {kernel}"),
            ));
        }
        let len_out = (len_in + 2 * pad - kernel) / stride + 1;
        let geo = Geometry {
            batch,
            len_in,
            len_out,
            c_in,
            kernel,
            stride,
            pad,
        };
        let width = c_in * kernel;
        let rows = batch * len_out;
        let cols = geo.im2col(self.data());
        let mut out = vec![0.0; rows * c_out];
        for row in out.chunks_mut(c_out) {
            row.copy_from_slice(bias.data());
        }
        gemm(rows, width, c_out, &cols, false, weight.data(), true, &mut out, 1.0);
        drop(cols);
        Tensor::from_op(
            "conv1d",
            out,
            &[batch, len_out, c_out],
            &[self, weight, bias],
            FnBackward::new("conv1d", move |ctx, g| {
                let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let gx = want(ctx, 0).then(|| {
                    let mut gcols = vec![0.0; rows * width];
                    gemm(rows, c_out, width, g, false, w, false, &mut gcols, 0.0);
                    geo.col2im(&gcols)
                });
                let gw = want(ctx, 1).then(|| {
                    let cols = geo.im2col(x);
                    let mut gw = vec![0.0; c_out * width];
                    gemm(c_out, rows, width, g, true, &cols, false, &mut gw, 0.0);
                    gw
                });
                let gb = want(ctx, 2).then(|| {
                    let mut gb = vec![0.0; c_out];
                    for row in g.chunks(c_out) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// Per-channel convolution over time with "same" padding:
    /// `[B, T, C]` with weights `[C, K]` (K odd) and bias `[C]`.
    pub fn depthwise_conv1d(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let &[batch, len, ch] = self.shape() else {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("input must be [B, T, C], got {:?}", self.shape()),
            ));
        };
        let &[wc, kernel] = weight.shape() else {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("weight must be [C, K], got {:?}", weight.shape()),
            ));
        };
        if wc != ch || bias.shape() != [ch] || kernel % 2 == 0 {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!(
                    "input {:?}, weight {:?}, bias {:?} (kernel must be odd)",
                    self.shape(),
                    weight.shape(),
                    bias.shape()
                ),
            ));
        }
        let pad = kernel / 2;
        let x = self.data();
        let w = weight.data();
        let mut out = vec![0.0; x.len()];
        for b in 0..batch {
            for t in 0..len {
                let o = &mut out[(b * len + t) * ch..][..ch];
                o.copy_from_slice(bias.data());
                for k in 0..kernel {
                    let src = (t + k) as isize - pad as isize;
                    if src < 0 || src as usize >= len {
                        continue;
                    }
                    let frame = &x[(b * len + src as usize) * ch..][..ch];
                    for c in 0..ch {
                        o[c] += w[c * kernel + k] * frame[c];
                    }
                }
            }
        }
        add_macs((batch * len * ch * kernel) as u64);
        Tensor::from_op(
            "depthwise_conv1d",
            out,
            self.shape(),
            &[self, weight, bias],
            FnBackward::new("depthwise_conv1d", move |ctx, g| {
                let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; w.len()];
                let mut gb = vec![0.0; ch];
                for b in 0..batch {
                    for t in 0..len {
                        let go = &g[(b * len + t) * ch..][..ch];
                        gb.iter_mut().zip(go).for_each(|(a, v)| *a += v);
                        for k in 0..kernel {
                            let src = (t + k) as isize - pad as isize;
                            if src < 0 || src as usize >= len {
                                continue;
                            }
                            let base = (b * len + src as usize) * ch;
                            for c in 0..ch {
                                gw[c * kernel + k] += go[c] * x[base + c];
                                gx[base + c] += go[c] * w[c * kernel + k];
                            }
                        }
                    }
                }
                vec![
                    want(ctx, 0).then_some(gx),
                    want(ctx, 1).then_some(gw),
                    want(ctx, 2).then_some(gb),
                ]
            }),
        )
    }
}
