//! Dense `f64` tensors with define-by-run reverse-mode differentiation and
//! payload metering.

pub mod container;
pub mod gradcheck;
pub mod meter;
pub mod nn;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{floored_relative_error, grad_check, relative_error, GradCheck, GradCheckReport, Stencil};
pub use meter::{add_macs, count_macs, with_metering, AllocationMeter};
pub use ops::FnBackward;
pub use tape::{backward, Tape};
pub use tensor::{grad_enabled, no_grad, Backward, BackwardCtx, Tensor};

#[doc(hidden)]
pub mod testutil {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::Tensor;

    /// Uniform `[-1, 1]` entries from a fixed seed.
    pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Tensor::new(data, shape).expect("finite random data")
    }
}
