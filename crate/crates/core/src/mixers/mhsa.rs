use super::MixerConfig;
use crate::error::Result;
use crate::tensorcore::nn::{join, Linear, Module};
use crate::tensorcore::Tensor;

/// Multi-head scaled dot-product self-attention without a causal mask.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl Mhsa {
    pub fn new(cfg: &MixerConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Mhsa {
            query: Linear::new(cfg.seed, "mhsa.query", d, d, true)?,
            key: Linear::new(cfg.seed, "mhsa.key", d, d, true)?,
            value: Linear::new(cfg.seed, "mhsa.value", d, d, true)?,
            out: Linear::new(cfg.seed, "mhsa.out", d, d, true)?,
            n_heads: cfg.n_heads,
        })
    }

    pub fn param_count(cfg: &MixerConfig) -> usize {
        4 * Linear::param_count(cfg.d_model, cfg.d_model, true)
    }

    /// All heads at once: scores are one `[B·H, T, T]` tensor.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        let (h, dh) = (self.n_heads, d / self.n_heads);
        let split =
            |y: Tensor| -> Result<Tensor> { y.reshape(&[b, t, h, dh])?.swap_axes_12()?.reshape(&[b * h, t, dh]) };
        let q = split(self.query.forward(x)?.scale(1.0 / (dh as f64).sqrt())?)?;
        let k = split(self.key.forward(x)?)?;
        let v = split(self.value.forward(x)?)?;
        let weights = q.matmul(&k.transpose()?)?.softmax_lastdim()?;
        let heads = weights.matmul(&v)?.reshape(&[b, h, t, dh])?.swap_axes_12()?;
        self.out.forward(&heads.reshape(&[b, t, d])?)
    }
}

impl Module for Mhsa {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixers::MixerKind;
    use crate::tensorcore::testutil::rand_tensor;

    fn affine(l: &Linear, row: &[f64]) -> Vec<f64> {
        let (din, dout) = (l.d_in(), l.d_out());
        let w = l.weight.data();
        (0..dout)
            .map(|j| {
                let mut s = l.bias.as_ref().map_or(0.0, |b| b.data()[j]);
                for i in 0..din {
                    s += row[i] * w[i * dout + j];
                }
                s
            })
            .collect()
    }

    /// Explicit loop over every query/key pair.
    fn oracle(m: &Mhsa, x: &Tensor) -> Vec<f64> {
        let (t, d) = (x.dim(1), x.dim(2));
        let dh = d / m.n_heads;
        let rows: Vec<&[f64]> = x.data().chunks(d).collect();
        let q: Vec<Vec<f64>> = rows.iter().map(|r| affine(&m.query, r)).collect();
        let k: Vec<Vec<f64>> = rows.iter().map(|r| affine(&m.key, r)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| affine(&m.value, r)).collect();
        let mut out = Vec::new();
        for i in 0..t {
            let mut ctx = vec![0.0; d];
            for h in 0..m.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = (0..t)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..t {
                    let a = (scores[j] - mx).exp() / z;
                    for c in cols.clone() {
                        ctx[c] += a * v[j][c];
                    }
                }
            }
            out.extend(affine(&m.out, &ctx));
        }
        out
    }

    #[test]
    fn matches_pairwise_oracle() {
        let cfg = MixerConfig::new(MixerKind::Mhsa, 4).with_heads(1).with_seed(3);
        let m = Mhsa::new(&cfg).unwrap();
        let x = rand_tensor(&[1, 5, 4], 11);
        let y = m.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(oracle(&m, &x)) {
            assert!((a - b).abs() < 1e-10);
        }
        let cfg = MixerConfig::new(MixerKind::Mhsa, 8).with_heads(2).with_seed(4);
        let m = Mhsa::new(&cfg).unwrap();
        let x = rand_tensor(&[1, 6, 8], 12);
        let y = m.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(oracle(&m, &x)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn single_token_is_projected_value() {
        let cfg = MixerConfig::new(MixerKind::Mhsa, 8).with_heads(2);
        let m = Mhsa::new(&cfg).unwrap();
        let x = rand_tensor(&[1, 1, 8], 2);
        let y = m.forward(&x).unwrap();
        let expect = m.out.forward(&m.value.forward(&x).unwrap()).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let cfg = MixerConfig::new(MixerKind::Mhsa, 8).with_heads(2);
        let m = Mhsa::new(&cfg).unwrap();
        let tok = rand_tensor(&[1, 1, 8], 5);
        let x = tok.broadcast_to(&[1, 4, 8]).unwrap();
        let y = m.forward(&x).unwrap();
        for t in 1..4 {
            for j in 0..8 {
                assert!((y.data()[t * 8 + j] - y.data()[j]).abs() < 1e-14);
            }
        }
    }
}
