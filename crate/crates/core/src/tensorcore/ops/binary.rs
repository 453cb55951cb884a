use super::{want, FnBackward};
use crate::error::{Error, Result};
use crate::tensorcore::meter::add_macs;
use crate::tensorcore::Tensor;

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
        }
    }
}

/// Broadcast result shape under trailing-axis alignment; size-1 axes stretch.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (0 along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, src_index)` for every element of `out`.
fn for_each_mapped(out: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out.len();
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..total {
        f(o, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            src -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Index of input element feeding each output element.
fn source_indices(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, out);
    let mut v = vec![0; out.iter().product()];
    for_each_mapped(out, &strides, |o, s| v[o] = s);
    v
}

/// Sums a gradient over broadcast axes back to `shape`.
pub(crate) fn reduce_to(g: &[f64], out: &[usize], shape: &[usize]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    if n == g.len() {
        return g.to_vec();
    }
    let mut acc = vec![0.0; n];
    if out.ends_with(shape) {
        for chunk in g.chunks(n) {
            acc.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
        }
        return acc;
    }
    let strides = broadcast_strides(shape, out);
    for_each_mapped(out, &strides, |o, s| acc[s] += g[o]);
    acc
}

fn binary(lhs: &Tensor, rhs: &Tensor, op: BinOp) -> Result<Tensor> {
    let (ls, rs) = (lhs.shape(), rhs.shape());
    let out_shape = broadcast_shape(ls, rs)
        .ok_or_else(|| Error::shape(op.name(), format!("cannot broadcast {ls:?} with {rs:?}")))?;
    let (a, b) = (lhs.data(), rhs.data());
    let total: usize = out_shape.iter().product();
    let data: Vec<f64> = if ls == rs {
        a.iter().zip(b).map(|(&x, &y)| op.apply(x, y)).collect()
    } else if out_shape == ls && out_shape.ends_with(rs) {
        let nb = b.len();
        a.chunks(nb)
            .flat_map(|ch| ch.iter().zip(b).map(|(&x, &y)| op.apply(x, y)))
            .collect()
    } else if out_shape == rs && out_shape.ends_with(ls) {
        let na = a.len();
        b.chunks(na)
            .flat_map(|ch| a.iter().zip(ch).map(|(&x, &y)| op.apply(x, y)))
            .collect()
    } else {
        let ia = source_indices(ls, &out_shape);
        let ib = source_indices(rs, &out_shape);
        (0..total).map(|o| op.apply(a[ia[o]], b[ib[o]])).collect()
    };
    if let BinOp::Mul = op {
        add_macs(total as u64);
    }
    let (ls, rs, os) = (ls.to_vec(), rs.to_vec(), out_shape.clone());
    Tensor::from_op(
        op.name(),
        data,
        &out_shape,
        &[lhs, rhs],
        FnBackward::new(op.name(), move |ctx, g| {
            let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
            match op {
                BinOp::Add | BinOp::Sub => {
                    let ga = want(ctx, 0).then(|| reduce_to(g, &os, &ls));
                    let gb = want(ctx, 1).then(|| {
                        let mut gb = reduce_to(g, &os, &rs);
                        if let BinOp::Sub = op {
                            gb.iter_mut().for_each(|v| *v = -*v);
                        }
                        gb
                    });
                    vec![ga, gb]
                }
                BinOp::Mul => {
                    let expand = |t: &Tensor, shape: &[usize]| -> Vec<f64> {
                        if shape == os.as_slice() {
                            t.to_vec()
                        } else {
                            source_indices(shape, &os).into_iter().map(|i| t.data()[i]).collect()
                        }
                    };
                    let ga = want(ctx, 0).then(|| {
                        let full: Vec<f64> = expand(b, &rs).iter().zip(g).map(|(x, y)| x * y).collect();
                        reduce_to(&full, &os, &ls)
                    });
                    let gb = want(ctx, 1).then(|| {
                        let full: Vec<f64> = expand(a, &ls).iter().zip(g).map(|(x, y)| x * y).collect();
                        reduce_to(&full, &os, &rs)
                    });
                    vec![ga, gb]
                }
            }
        }),
    )
}

impl Tensor {
    /// Elementwise sum with broadcasting over leading or size-1 axes.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinOp::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinOp::Sub)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinOp::Mul)
    }

    /// Materializes a broadcast view of this tensor at `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        match broadcast_shape(self.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::shape(
                    "broadcast_to",
                    format!("{:?} does not broadcast to {shape:?}", self.shape()),
                ))
            }
        }
        let src = source_indices(self.shape(), shape);
        let data = src.iter().map(|&i| self.data()[i]).collect();
        let (from, to) = (self.shape().to_vec(), shape.to_vec());
        Tensor::from_op(
            "broadcast_to",
            data,
            shape,
            &[self],
            FnBackward::new("broadcast_to", move |_, g| vec![Some(reduce_to(g, &to, &from))]),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[2, 3, 4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }

    #[test]
    fn bias_add_and_middle_axis_broadcast() {
        let x = Tensor::new((0..6).map(f64::from).collect(), &[1, 2, 3]).unwrap();
        let b = Tensor::new(vec![10.0, 20.0, 30.0], &[3]).unwrap();
        assert_eq!(x.add(&b).unwrap().to_vec(), vec![10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let q = Tensor::new(vec![2.0, 3.0, 4.0], &[1, 1, 3]).unwrap();
        assert_eq!(x.mul(&q).unwrap().to_vec(), vec![0.0, 3.0, 8.0, 6.0, 12.0, 20.0]);
    }

    #[test]
    fn reduce_sums_broadcast_axes() {
        let g = vec![1.0; 12];
        assert_eq!(reduce_to(&g, &[2, 3, 2], &[2]), vec![6.0, 6.0]);
        assert_eq!(reduce_to(&g, &[2, 3, 2], &[2, 1, 2]), vec![3.0; 4]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 2]).unwrap();
        assert!(matches!(a.add(&b), Err(Error::Shape { .. })));
    }
}
