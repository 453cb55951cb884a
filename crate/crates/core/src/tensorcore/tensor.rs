use std::cell::Cell;
use std::fmt;
use std::sync::{Arc, Mutex};

use super::meter::Buffer;
use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Inputs and output of a recorded operation, handed to its backward rule.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [Tensor],
    pub output: &'a Tensor,
}

/// Vector-Jacobian product of one recorded operation.
///
/// Returns one entry per input, `None` where the input needs no gradient.
pub trait Backward: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardCtx<'_>, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

pub(crate) struct Node {
    pub(crate) op: Box<dyn Backward>,
    pub(crate) inputs: Vec<Tensor>,
}

pub(crate) struct Inner {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Buffer>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Mutex<Option<Vec<f64>>>,
    pub(crate) node: Option<Node>,
}

/// Dense row-major `f64` array that can take part in reverse-mode
/// differentiation. Cheap to clone; payloads are immutable.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Inner>);

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op,
            detail: format!("element {i} is {}", data[i]),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(data, shape, false)
    }

    /// A trainable leaf: gradients accumulate into it on backward.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(data, shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Self::new(vec![0.0; shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        Self::new(vec![value; shape.iter().product()], shape)
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Self::new(vec![value], &[1])
    }

    fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(Error::shape("new", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        check_finite("new", &data)?;
        Ok(Tensor(Arc::new(Inner {
            shape: shape.to_vec(),
            data: Arc::new(Buffer::new(data)?),
            requires_grad,
            grad: Mutex::new(None),
            node: None,
        })))
    }

    /// Builds the result of an operation, recording it when graph recording
    /// is on and any input requires a gradient.
    pub fn from_op(
        op_name: &'static str,
        data: Vec<f64>,
        shape: &[usize],
        inputs: &[&Tensor],
        op: impl Backward + 'static,
    ) -> Result<Tensor> {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        check_finite(op_name, &data)?;
        let record = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = record.then(|| Node {
            op: Box::new(op),
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        });
        Ok(Tensor(Arc::new(Inner {
            shape: shape.to_vec(),
            data: Arc::new(Buffer::new(data)?),
            requires_grad: record,
            grad: Mutex::new(None),
            node,
        })))
    }

    /// Same result as `from_op` for operations with no inputs needing
    /// gradients; used by shape-only views that share the payload.
    pub(crate) fn share_payload(src: &Tensor, shape: &[usize], op: impl Backward + 'static) -> Tensor {
        let record = grad_enabled() && src.requires_grad();
        let node = record.then(|| Node {
            op: Box::new(op),
            inputs: vec![src.clone()],
        });
        Tensor(Arc::new(Inner {
            shape: shape.to_vec(),
            data: Arc::clone(&src.0.data),
            requires_grad: record,
            grad: Mutex::new(None),
            node,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.data()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// A leaf sharing this payload, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Arc::new(Inner {
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            requires_grad: false,
            grad: Mutex::new(None),
            node: None,
        }))
    }

    /// A trainable leaf sharing this payload.
    pub fn as_param(&self) -> Tensor {
        Tensor(Arc::new(Inner {
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            requires_grad: true,
            grad: Mutex::new(None),
            node: None,
        }))
    }

    pub(crate) fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_validates_shape_and_finiteness() {
        assert!(Tensor::new(vec![1.0; 6], &[2, 3]).is_ok());
        assert!(matches!(Tensor::new(vec![1.0; 5], &[2, 3]), Err(Error::Shape { .. })));
        assert!(matches!(Tensor::new(vec![f64::NAN], &[1]), Err(Error::Numeric { .. })));
        assert!(Tensor::new(vec![], &[0]).is_err());
    }

    #[test]
    fn no_grad_restores_previous_mode() {
        assert!(grad_enabled());
        no_grad(|| {
            assert!(!grad_enabled());
            no_grad(|| assert!(!grad_enabled()));
            assert!(!grad_enabled());
        });
        assert!(grad_enabled());
    }
}
