use super::{sinusoidal, MixerConfig};
use crate::error::{Error, Result};
use crate::tensorcore::nn::{join, LayerNorm, Linear, Module};
use crate::tensorcore::Tensor;

/// Token-mixing MLP with per-item weights: `LayerNorm(W1·GELU(W2ᵀ·X))` for
/// `X: [B, T, d]`, `W1, W2: [B, T, d_tmmlp]`.
pub fn tm_mlp(x: &Tensor, w1: &Tensor, w2: &Tensor, norm: &LayerNorm) -> Result<Tensor> {
    let &[b, t, _] = x.shape() else {
        return Err(Error::shape(
            "tm_mlp",
            format!("x must be [B, T, d], got {:?}", x.shape()),
        ));
    };
    for (name, w) in [("W1", w1), ("W2", w2)] {
        if w.rank() != 3 || w.dim(0) != b || w.dim(1) != t {
            return Err(Error::shape(
                "tm_mlp",
                format!("{name} {:?} does not have the {t} rows of x {:?}", w.shape(), x.shape()),
            ));
        }
    }
    if w1.shape() != w2.shape() {
        return Err(Error::shape(
            "tm_mlp",
            format!("W1 {:?} and W2 {:?} differ", w1.shape(), w2.shape()),
        ));
    }
    let hidden = w2.transpose()?.matmul(x)?.gelu()?;
    norm.forward(&w1.matmul(&hidden)?)
}

/// TM-MLP whose weight rows are emitted token by token from a shared
/// hypernetwork, followed by a channel projection.
#[derive(Clone, Debug)]
pub struct HyperMixing {
    pub trunk: Linear,
    pub head_w1: Linear,
    pub head_w2: Linear,
    pub norm: LayerNorm,
    pub out: Linear,
    pub positional: bool,
}

impl HyperMixing {
    pub fn new(cfg: &MixerConfig) -> Result<Self> {
        let d = cfg.d_model;
        let d_in = if cfg.hyper_positional { 2 * d } else { d };
        Ok(HyperMixing {
            trunk: Linear::new(cfg.seed, "hypermixing.trunk", d_in, d, true)?,
            head_w1: Linear::new(cfg.seed, "hypermixing.head_w1", d, cfg.d_tmmlp, true)?,
            head_w2: Linear::new(cfg.seed, "hypermixing.head_w2", d, cfg.d_tmmlp, true)?,
            norm: LayerNorm::new(d)?,
            out: Linear::new(cfg.seed, "hypermixing.out", d, d, true)?,
            positional: cfg.hyper_positional,
        })
    }

    pub fn param_count(cfg: &MixerConfig) -> usize {
        let d = cfg.d_model;
        let d_in = if cfg.hyper_positional { 2 * d } else { d };
        Linear::param_count(d_in, d, true)
            + 2 * Linear::param_count(d, cfg.d_tmmlp, true)
            + LayerNorm::param_count(d)
            + Linear::param_count(d, d, true)
    }

    /// Per-token rows of `W1` and `W2`.
    pub fn generate(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let input = if self.positional {
            let (b, t, d) = (x.dim(0), x.dim(1), x.dim(2));
            let pe = sinusoidal(t, d)?.reshape(&[1, t, d])?.broadcast_to(&[b, t, d])?;
            Tensor::concat_lastdim(&[x, &pe])?
        } else {
            x.clone()
        };
        let h = self.trunk.forward(&input)?.gelu()?;
        Ok((self.head_w1.forward(&h)?, self.head_w2.forward(&h)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (w1, w2) = self.generate(x)?;
        self.out.forward(&tm_mlp(x, &w1, &w2, &self.norm)?)
    }
}

impl Module for HyperMixing {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.trunk.visit(&join(prefix, "trunk"), f);
        self.head_w1.visit(&join(prefix, "head_w1"), f);
        self.head_w2.visit(&join(prefix, "head_w2"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.trunk.visit_mut(&join(prefix, "trunk"), f);
        self.head_w1.visit_mut(&join(prefix, "head_w1"), f);
        self.head_w2.visit_mut(&join(prefix, "head_w2"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixers::MixerKind;
    use crate::tensorcore::testutil::rand_tensor;

    fn gelu(v: f64) -> f64 {
        0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
    }

    fn norm_row(row: &[f64]) -> Vec<f64> {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
    }

    /// Triple loop over `(token, hidden unit, channel)`.
    fn tm_oracle(x: &[f64], w1: &[f64], w2: &[f64], t: usize, d: usize, m: usize) -> Vec<f64> {
        let mut hidden = vec![0.0; m * d];
        for j in 0..m {
            for c in 0..d {
                let s: f64 = (0..t).map(|i| w2[i * m + j] * x[i * d + c]).sum();
                hidden[j * d + c] = gelu(s);
            }
        }
        let mut out = Vec::new();
        for i in 0..t {
            let row: Vec<f64> = (0..d)
                .map(|c| (0..m).map(|j| w1[i * m + j] * hidden[j * d + c]).sum())
                .collect();
            out.extend(norm_row(&row));
        }
        out
    }

    #[test]
    fn zero_input_gives_zero() {
        let x = Tensor::zeros(&[1, 4, 3]).unwrap();
        let w = rand_tensor(&[1, 4, 2], 1);
        let y = tm_mlp(&x, &w, &w, &LayerNorm::new(3).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_weights_broadcast_token_sum() {
        let x = Tensor::new(vec![1.0, 2.0, 0.5, -1.0, 3.0, 0.0], &[1, 3, 2]).unwrap();
        let ones = Tensor::full(&[1, 3, 1], 1.0).unwrap();
        let y = tm_mlp(&x, &ones, &ones, &LayerNorm::new(2).unwrap()).unwrap();
        // column sums 4.5 and 1.0; every token row is LN([gelu 4.5, gelu 1.0])
        let row = norm_row(&[gelu(4.5), gelu(1.0)]);
        for t in 0..3 {
            for c in 0..2 {
                assert!((y.data()[t * 2 + c] - row[c]).abs() < 1e-12);
            }
        }
        assert!(row[0] > 0.99 && row[1] < -0.99);
    }

    #[test]
    fn tm_mlp_matches_triple_loop() {
        let (t, d, m) = (5, 4, 3);
        let x = rand_tensor(&[1, t, d], 2);
        let w1 = rand_tensor(&[1, t, m], 3);
        let w2 = rand_tensor(&[1, t, m], 4);
        let y = tm_mlp(&x, &w1, &w2, &LayerNorm::new(d).unwrap()).unwrap();
        let o = tm_oracle(x.data(), w1.data(), w2.data(), t, d, m);
        for (a, b) in y.data().iter().zip(o) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn mismatched_rows_rejected() {
        let x = rand_tensor(&[1, 5, 4], 2);
        let w = rand_tensor(&[1, 4, 3], 3);
        assert!(matches!(
            tm_mlp(&x, &w, &w, &LayerNorm::new(4).unwrap()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn forward_matches_composed_oracle() {
        let mut cfg = MixerConfig::new(MixerKind::HyperMixing, 4).with_seed(5);
        cfg.d_tmmlp = 3;
        let h = HyperMixing::new(&cfg).unwrap();
        let x = rand_tensor(&[1, 5, 4], 6);
        let (w1, w2) = h.generate(&x).unwrap();
        // hypernetwork rows computed token by token
        for t in 0..5 {
            let tok = Tensor::new(x.data()[t * 4..(t + 1) * 4].to_vec(), &[1, 1, 4]).unwrap();
            let (r1, r2) = h.generate(&tok).unwrap();
            for j in 0..3 {
                assert!((r1.data()[j] - w1.data()[t * 3 + j]).abs() < 1e-14);
                assert!((r2.data()[j] - w2.data()[t * 3 + j]).abs() < 1e-14);
            }
        }
        let mixed = tm_oracle(x.data(), w1.data(), w2.data(), 5, 4, 3);
        let mixed = Tensor::new(mixed, &[1, 5, 4]).unwrap();
        let expect = h.out.forward(&mixed).unwrap();
        let y = h.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_tokens_generate_identical_rows() {
        let cfg = MixerConfig::new(MixerKind::HyperMixing, 4);
        let h = HyperMixing::new(&cfg).unwrap();
        let x = rand_tensor(&[1, 1, 4], 8).broadcast_to(&[1, 2, 4]).unwrap();
        let (w1, w2) = h.generate(&x).unwrap();
        let m = cfg.d_tmmlp;
        assert_eq!(w1.data()[..m], w1.data()[m..]);
        assert_eq!(w2.data()[..m], w2.data()[m..]);
    }
}
