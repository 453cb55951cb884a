use super::MixerConfig;
use crate::error::{Error, Result};
use crate::tensorcore::nn::{join, Linear, Module, ParamInit};
use crate::tensorcore::Tensor;

/// Softmax-weighted sum over time with scores `wᵀm_t / √d_head`:
/// `[B, T, d_head]`, `[d_head]` → `[B, d_head]`.
pub fn fastformer_additive_pool(m: &Tensor, w: &Tensor) -> Result<Tensor> {
    let &[b, t, dh] = m.shape() else {
        return Err(Error::shape(
            "fastformer_additive_pool",
            format!("expected [B, T, d_head], got {:?}", m.shape()),
        ));
    };
    if w.shape() != [dh] {
        return Err(Error::shape(
            "fastformer_additive_pool",
            format!("score vector {:?} does not match width {dh}", w.shape()),
        ));
    }
    let scores = m
        .matmul(&w.reshape(&[dh, 1])?)?
        .scale(1.0 / (dh as f64).sqrt())?
        .reshape(&[b, 1, t])?;
    scores.softmax_lastdim()?.matmul(m)?.reshape(&[b, dh])
}

/// Additive-attention mixer: the queries are pooled into one global query,
/// which modulates the keys; those are pooled again into a global key that
/// modulates the values.
#[derive(Clone, Debug)]
pub struct Fastformer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    /// Query score vector, one `d_head` slice per head.
    pub query_score: Tensor,
    pub key_score: Tensor,
    pub n_heads: usize,
}

impl Fastformer {
    pub fn new(cfg: &MixerConfig) -> Result<Self> {
        let d = cfg.d_model;
        let mut init = ParamInit::new(cfg.seed, "fastformer.scores");
        Ok(Fastformer {
            query: Linear::new(cfg.seed, "fastformer.query", d, d, true)?,
            key: Linear::new(cfg.seed, "fastformer.key", d, d, true)?,
            value: Linear::new(cfg.seed, "fastformer.value", d, d, true)?,
            out: Linear::new(cfg.seed, "fastformer.out", d, d, true)?,
            query_score: init.fan_in(&[d], cfg.d_head())?,
            key_score: init.fan_in(&[d], cfg.d_head())?,
            n_heads: cfg.n_heads,
        })
    }

    pub fn param_count(cfg: &MixerConfig) -> usize {
        4 * Linear::param_count(cfg.d_model, cfg.d_model, true) + 2 * cfg.d_model
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, d) = (x.dim(0), x.dim(2));
        let dh = d / self.n_heads;
        let q = self.query.forward(x)?;
        let k = self.key.forward(x)?;
        let v = self.value.forward(x)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, wq, wk) = (
                h * dh,
                self.query_score.narrow_lastdim(h * dh, dh)?,
                self.key_score.narrow_lastdim(h * dh, dh)?,
            );
            let global_q = fastformer_additive_pool(&q.narrow_lastdim(lo, dh)?, &wq)?;
            let p = k.narrow_lastdim(lo, dh)?.mul(&global_q.reshape(&[b, 1, dh])?)?;
            let global_k = fastformer_additive_pool(&p, &wk)?;
            heads.push(v.narrow_lastdim(lo, dh)?.mul(&global_k.reshape(&[b, 1, dh])?)?);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        self.out.forward(&Tensor::concat_lastdim(&refs)?)?.add(&q)
    }
}

impl Module for Fastformer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.out.visit(&join(prefix, "out"), f);
        f(&join(prefix, "query_score"), &self.query_score);
        f(&join(prefix, "key_score"), &self.key_score);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
        f(&join(prefix, "query_score"), &mut self.query_score);
        f(&join(prefix, "key_score"), &mut self.key_score);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixers::MixerKind;
    use crate::tensorcore::testutil::rand_tensor;

    fn pool_oracle(m: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
        let dh = w.len();
        let s: Vec<f64> = m
            .iter()
            .map(|r| r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
            .collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
        let mut out = vec![0.0; dh];
        for (row, sv) in m.iter().zip(&s) {
            let a = (sv - mx).exp() / z;
            for c in 0..dh {
                out[c] += a * row[c];
            }
        }
        out
    }

    fn affine(l: &Linear, row: &[f64]) -> Vec<f64> {
        let (din, dout) = (l.d_in(), l.d_out());
        (0..dout)
            .map(|j| {
                l.bias.as_ref().unwrap().data()[j]
                    + (0..din).map(|i| row[i] * l.weight.data()[i * dout + j]).sum::<f64>()
            })
            .collect()
    }

    /// Step-by-step scalar rendering of the same dataflow.
    fn forward_oracle(f: &Fastformer, x: &Tensor) -> Vec<f64> {
        let (t, d) = (x.dim(1), x.dim(2));
        let dh = d / f.n_heads;
        let rows: Vec<&[f64]> = x.data().chunks(d).collect();
        let q: Vec<Vec<f64>> = rows.iter().map(|r| affine(&f.query, r)).collect();
        let k: Vec<Vec<f64>> = rows.iter().map(|r| affine(&f.key, r)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| affine(&f.value, r)).collect();
        let mut u = vec![vec![0.0; d]; t];
        for h in 0..f.n_heads {
            let c0 = h * dh;
            let slice = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { m.iter().map(|r| r[c0..c0 + dh].to_vec()).collect() };
            let gq = pool_oracle(&slice(&q), &f.query_score.data()[c0..c0 + dh]);
            let p: Vec<Vec<f64>> = slice(&k)
                .iter()
                .map(|r| r.iter().zip(&gq).map(|(a, b)| a * b).collect())
                .collect();
            let gk = pool_oracle(&p, &f.key_score.data()[c0..c0 + dh]);
            for s in 0..t {
                for c in 0..dh {
                    u[s][c0 + c] = v[s][c0 + c] * gk[c];
                }
            }
        }
        let mut out = Vec::new();
        for s in 0..t {
            let r = affine(&f.out, &u[s]);
            out.extend(r.iter().zip(&q[s]).map(|(a, b)| a + b));
        }
        out
    }

    #[test]
    fn zero_scores_give_column_mean() {
        let m = rand_tensor(&[1, 6, 3], 1);
        let w = Tensor::zeros(&[3]).unwrap();
        let p = fastformer_additive_pool(&m, &w).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..6).map(|t| m.data()[t * 3 + c]).sum::<f64>() / 6.0;
            assert!((p.data()[c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_pool_is_identity() {
        let m = rand_tensor(&[2, 1, 3], 2);
        let w = rand_tensor(&[3], 3);
        let p = fastformer_additive_pool(&m, &w).unwrap();
        assert_eq!(p.data(), m.data());
    }

    #[test]
    fn pool_matches_scalar_oracle() {
        let m = rand_tensor(&[1, 6, 3], 4);
        let w = rand_tensor(&[3], 5);
        let p = fastformer_additive_pool(&m, &w).unwrap();
        let rows: Vec<Vec<f64>> = m.data().chunks(3).map(<[f64]>::to_vec).collect();
        for (a, b) in p.data().iter().zip(pool_oracle(&rows, w.data())) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let cfg = MixerConfig::new(MixerKind::Fastformer, 8).with_heads(2).with_seed(9);
        let f = Fastformer::new(&cfg).unwrap();
        let x = rand_tensor(&[1, 7, 8], 6);
        let y = f.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(forward_oracle(&f, &x)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn single_token_closed_form() {
        let cfg = MixerConfig::new(MixerKind::Fastformer, 4).with_heads(2);
        let f = Fastformer::new(&cfg).unwrap();
        let x = rand_tensor(&[1, 1, 4], 7);
        let y = f.forward(&x).unwrap();
        let q = f.query.forward(&x).unwrap();
        let k = f.key.forward(&x).unwrap();
        let v = f.value.forward(&x).unwrap();
        let u = q.mul(&k).unwrap().mul(&v).unwrap();
        let expect = f.out.forward(&u).unwrap().add(&q).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
