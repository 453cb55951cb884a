use rand::Rng;

use super::scan::{selective_scan, softplus, ScanMode};
use super::MixerConfig;
use crate::error::Result;
use crate::tensorcore::nn::{join, Linear, Module, ParamInit};
use crate::tensorcore::Tensor;

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

/// Input-dependent quantities fed to the selective scan.
#[derive(Clone, Debug)]
pub struct SelectiveTerms {
    /// Activated input branch, `[B, T, H]`.
    pub u: Tensor,
    /// Step sizes before softplus, `[B, T, H]`.
    pub delta_raw: Tensor,
    /// Diagonal state matrix, `[H, N]`, strictly negative.
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    /// Gate branch, `[B, T, H]`.
    pub z: Tensor,
}

/// One direction of the selective state-space block.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub in_proj: Linear,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    /// `A = -exp(a_log)`.
    pub a_log: Tensor,
    pub skip: Tensor,
    pub out_proj: Linear,
    pub mode: ScanMode,
    d_inner: usize,
    d_state: usize,
    dt_rank: usize,
}

impl MambaBlock {
    pub fn new(cfg: &MixerConfig, scope: &str) -> Result<Self> {
        let (d, h, n, r) = (cfg.d_model, cfg.d_inner, cfg.d_state, cfg.dt_rank());
        let s = cfg.seed;
        let mut dt_proj = Linear::new(s, &format!("{scope}.dt_proj"), r, h, true)?;
        let mut init = ParamInit::new(s, &format!("{scope}.dt_bias"));
        let bias: Vec<f64> = (0..h)
            .map(|_| {
                let u: f64 = init.rng().random();
                let dt = (DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp();
                // softplus(bias) == dt
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        dt_proj.bias = Some(Tensor::param(bias, &[h])?);
        let a_log = (0..h * n).map(|i| ((i % n + 1) as f64).ln()).collect();
        Ok(MambaBlock {
            in_proj: Linear::new(s, &format!("{scope}.in_proj"), d, 2 * h, false)?,
            x_proj: Linear::new(s, &format!("{scope}.x_proj"), h, r + 2 * n, false)?,
            dt_proj,
            a_log: Tensor::param(a_log, &[h, n])?,
            skip: Tensor::param(vec![1.0; h], &[h])?,
            out_proj: Linear::new(s, &format!("{scope}.out_proj"), h, d, false)?,
            mode: ScanMode::Parallel,
            d_inner: h,
            d_state: n,
            dt_rank: r,
        })
    }

    pub fn param_count(cfg: &MixerConfig) -> usize {
        let (d, h, n, r) = (cfg.d_model, cfg.d_inner, cfg.d_state, cfg.dt_rank());
        Linear::param_count(d, 2 * h, false)
            + Linear::param_count(h, r + 2 * n, false)
            + Linear::param_count(r, h, true)
            + h * n
            + h
            + Linear::param_count(h, d, false)
    }

    pub fn selective_terms(&self, x: &Tensor) -> Result<SelectiveTerms> {
        let (h, n, r) = (self.d_inner, self.d_state, self.dt_rank);
        let xz = self.in_proj.forward(x)?;
        let u = xz.narrow_lastdim(0, h)?.silu()?;
        let z = xz.narrow_lastdim(h, h)?;
        let proj = self.x_proj.forward(&u)?;
        let delta_raw = self.dt_proj.forward(&proj.narrow_lastdim(0, r)?)?;
        Ok(SelectiveTerms {
            b: proj.narrow_lastdim(r, n)?,
            c: proj.narrow_lastdim(r + n, n)?,
            a: self.a_log.exp()?.neg()?,
            u,
            delta_raw,
            z,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.selective_terms(x)?;
        let y = selective_scan(&s.u, &s.delta_raw, &s.a, &s.b, &s.c, self.mode)?;
        let y = y.add(&s.u.mul(&self.skip)?)?;
        self.out_proj.forward(&y.mul(&s.z.silu()?)?)
    }
}

impl Module for MambaBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.in_proj.visit(&join(prefix, "in_proj"), f);
        self.x_proj.visit(&join(prefix, "x_proj"), f);
        self.dt_proj.visit(&join(prefix, "dt_proj"), f);
        f(&join(prefix, "a_log"), &self.a_log);
        f(&join(prefix, "skip"), &self.skip);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.in_proj.visit_mut(&join(prefix, "in_proj"), f);
        self.x_proj.visit_mut(&join(prefix, "x_proj"), f);
        self.dt_proj.visit_mut(&join(prefix, "dt_proj"), f);
        f(&join(prefix, "a_log"), &mut self.a_log);
        f(&join(prefix, "skip"), &mut self.skip);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}

/// Forward and time-reversed blocks, concatenated and projected back to
/// `d_model`.
#[derive(Clone, Debug)]
pub struct BiMamba {
    pub forward_dir: MambaBlock,
    pub backward_dir: MambaBlock,
    pub fuse: Linear,
}

impl BiMamba {
    pub fn new(cfg: &MixerConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(BiMamba {
            forward_dir: MambaBlock::new(cfg, "mamba.forward")?,
            backward_dir: MambaBlock::new(cfg, "mamba.backward")?,
            fuse: Linear::new(cfg.seed, "mamba.fuse", 2 * d, d, true)?,
        })
    }

    pub fn param_count(cfg: &MixerConfig) -> usize {
        2 * MambaBlock::param_count(cfg) + Linear::param_count(2 * cfg.d_model, cfg.d_model, true)
    }

    pub fn set_scan_mode(&mut self, mode: ScanMode) {
        self.forward_dir.mode = mode;
        self.backward_dir.mode = mode;
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let fwd = self.forward_dir.forward(x)?;
        let bwd = self.backward_dir.forward(&x.reverse_time()?)?.reverse_time()?;
        self.fuse.forward(&Tensor::concat_lastdim(&[&fwd, &bwd])?)
    }

    /// The same mixer with the two directions exchanged; the fusion rows
    /// are swapped to match.
    pub fn swapped(&self) -> Result<BiMamba> {
        let w = self.fuse.weight.data();
        let (rows, d) = (self.fuse.weight.dim(0), self.fuse.weight.dim(1));
        let half = rows / 2;
        let mut sw = Vec::with_capacity(w.len());
        sw.extend_from_slice(&w[half * d..]);
        sw.extend_from_slice(&w[..half * d]);
        Ok(BiMamba {
            forward_dir: self.backward_dir.clone(),
            backward_dir: self.forward_dir.clone(),
            fuse: Linear {
                weight: Tensor::param(sw, &[rows, d])?,
                bias: self.fuse.bias.clone(),
            },
        })
    }
}

impl Module for BiMamba {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.forward_dir.visit(&join(prefix, "forward"), f);
        self.backward_dir.visit(&join(prefix, "backward"), f);
        self.fuse.visit(&join(prefix, "fuse"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.forward_dir.visit_mut(&join(prefix, "forward"), f);
        self.backward_dir.visit_mut(&join(prefix, "backward"), f);
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
    }
}

/// Discretized `(Ā, B̄)` as dense `[B, T, H, N]` tensors, for comparison
/// against the literal recurrence.
pub fn discretize(terms: &SelectiveTerms) -> Result<(Tensor, Tensor)> {
    let (bs, t, h) = (terms.u.dim(0), terms.u.dim(1), terms.u.dim(2));
    let n = terms.a.dim(1);
    let (raw, a, bm, u) = (terms.delta_raw.data(), terms.a.data(), terms.b.data(), terms.u.data());
    let mut abar = Vec::with_capacity(bs * t * h * n);
    let mut bbar = Vec::with_capacity(bs * t * h * n);
    for bi in 0..bs {
        for ti in 0..t {
            for c in 0..h {
                let i = (bi * t + ti) * h + c;
                let d = softplus(raw[i]);
                for s in 0..n {
                    abar.push((d * a[c * n + s]).exp());
                    bbar.push(d * bm[(bi * t + ti) * n + s]);
                }
                debug_assert!(u[i].is_finite());
            }
        }
    }
    Ok((Tensor::new(abar, &[bs, t, h, n])?, Tensor::new(bbar, &[bs, t, h, n])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixers::scan::mamba_recurrence_oracle;
    use crate::mixers::MixerKind;
    use crate::tensorcore::testutil::rand_tensor;

    fn cfg(seed: u64) -> MixerConfig {
        let mut c = MixerConfig::new(MixerKind::Mamba, 8).with_seed(seed);
        c.d_state = 4;
        c.d_inner = 12;
        c
    }

    #[test]
    fn step_bias_inverts_softplus_into_range() {
        let b = MambaBlock::new(&cfg(1), "m").unwrap();
        for &v in b.dt_proj.bias.as_ref().unwrap().data() {
            let dt = softplus(v);
            assert!((DT_MIN - 1e-12..=DT_MAX + 1e-12).contains(&dt), "{dt}");
        }
        let a = b.a_log.exp().unwrap();
        for (i, v) in a.data()[..4].iter().enumerate() {
            assert!((v - (i + 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_matches_recurrence_inside_block() {
        let b = MambaBlock::new(&cfg(2), "m").unwrap();
        for t in [1, 2, 7, 64] {
            let x = rand_tensor(&[2, t, 8], t as u64);
            let terms = b.selective_terms(&x).unwrap();
            let y = selective_scan(
                &terms.u,
                &terms.delta_raw,
                &terms.a,
                &terms.b,
                &terms.c,
                ScanMode::Parallel,
            )
            .unwrap();
            let (abar, bbar) = discretize(&terms).unwrap();
            let o = mamba_recurrence_oracle(&terms.u, &abar, &bbar, &terms.c).unwrap();
            for (p, q) in y.data().iter().zip(o.data()) {
                assert!((p - q).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reversal_symmetry_with_swapped_directions() {
        let m = BiMamba::new(&cfg(3)).unwrap();
        let x = rand_tensor(&[1, 9, 8], 4);
        let y = m.forward(&x).unwrap().reverse_time().unwrap();
        let y_sw = m.swapped().unwrap().forward(&x.reverse_time().unwrap()).unwrap();
        for (a, b) in y.data().iter().zip(y_sw.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_is_well_defined() {
        let m = BiMamba::new(&cfg(5)).unwrap();
        let y = m.forward(&rand_tensor(&[1, 1, 8], 6)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8]);
    }
}
