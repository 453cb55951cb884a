//! Parameter containers and the two layers every model here shares.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::error::Result;

/// Anything that owns named trainable tensors.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_parameters(m: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Number of trainable scalars held by the module.
pub fn num_params(m: &dyn Module) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t| n += t.numel());
    n
}

pub fn zero_grads(m: &dyn Module) {
    m.visit("", &mut |_, t| t.zero_grad());
}

/// 64-bit FNV-1a; used to derive per-module seeds and payload checksums.
pub fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Checksum of a tensor's exact bit pattern.
pub fn checksum(t: &Tensor) -> u64 {
    fnv1a(t.data().iter().flat_map(|v| v.to_le_bytes()))
}

/// Seeded parameter initializer. Each named scope gets an independent
/// stream, so adding a module never shifts the draws of another.
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64, scope: &str) -> Self {
        let mixed = seed ^ fnv1a(scope.bytes());
        ParamInit {
            rng: ChaCha8Rng::seed_from_u64(mixed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::param(data, shape)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        self.uniform(shape, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::param(data, shape)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Affine map on the last axis: `x·W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(seed: u64, scope: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let mut init = ParamInit::new(seed, scope);
        let weight = init.fan_in(&[d_in, d_out], d_in)?;
        let bias = if bias { Some(init.fan_in(&[d_out], d_in)?) } else { None };
        Ok(Linear { weight, bias })
    }

    pub fn param_count(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn d_in(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn d_out(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Learned scale and shift around [`Tensor::layer_norm`].
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Result<Self> {
        Ok(LayerNorm {
            scale: Tensor::param(vec![1.0; d], &[d])?,
            shift: Tensor::param(vec![0.0; d], &[d])?,
        })
    }

    pub fn param_count(d: usize) -> usize {
        2 * d
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.scale, &self.shift)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "scale"), &self.scale);
        f(&join(prefix, "shift"), &self.shift);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "scale"), &mut self.scale);
        f(&join(prefix, "shift"), &mut self.shift);
    }
}
