//! Differentiable primitives. Every primitive is a method on [`Tensor`]
//! returning a new tensor; backward rules live next to their forward code.

mod binary;
mod conv;
mod matmul;
mod reduce;
mod shape;
mod unary;

pub(crate) use matmul::gemm;

use super::tensor::{Backward, BackwardCtx};

/// Backward rule from a closure.
pub struct FnBackward<F> {
    name: &'static str,
    f: F,
}

impl<F> FnBackward<F>
where
    F: Fn(&BackwardCtx<'_>, &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync,
{
    pub fn new(name: &'static str, f: F) -> Self {
        FnBackward { name, f }
    }
}

impl<F> Backward for FnBackward<F>
where
    F: Fn(&BackwardCtx<'_>, &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync,
{
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        (self.f)(ctx, grad_out)
    }
}

/// Gradient slot for input `i`: computed only when that input needs one.
pub(crate) fn want(ctx: &BackwardCtx<'_>, i: usize) -> bool {
    ctx.inputs[i].requires_grad()
}
