//! Sequence mixers, the BEST-RQ masked-prediction objective and a scaling
//! benchmark harness, on top of a small reverse-mode tensor engine.

pub mod bench;
pub mod bestrq;
pub mod encoder;
pub mod error;
pub mod mixers;
pub mod tensorcore;

pub use error::{Error, Result};
pub use tensorcore::Tensor;
