use super::MixerConfig;
use crate::error::Result;
use crate::tensorcore::nn::{join, Linear, Module};
use crate::tensorcore::Tensor;

/// One-hidden-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(seed: u64, scope: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::new(seed, &format!("{scope}.hidden"), d_in, d_hidden, true)?,
            out: Linear::new(seed, &format!("{scope}.out"), d_hidden, d_out, true)?,
        })
    }

    pub fn param_count(d_in: usize, d_hidden: usize, d_out: usize) -> usize {
        Linear::param_count(d_in, d_hidden, true) + Linear::param_count(d_hidden, d_out, true)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.gelu()?)
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Per-token local transform combined with the time average of a summary
/// transform.
#[derive(Clone, Debug)]
pub struct SummaryMixing {
    pub summary: Mlp,
    pub local: Mlp,
    pub combine: Mlp,
}

impl SummaryMixing {
    pub fn new(cfg: &MixerConfig) -> Result<Self> {
        let (d, ds, s) = (cfg.d_model, cfg.d_summary, cfg.seed);
        Ok(SummaryMixing {
            summary: Mlp::new(s, "summarymixing.summary", d, ds, ds)?,
            local: Mlp::new(s, "summarymixing.local", d, ds, d)?,
            combine: Mlp::new(s, "summarymixing.combine", d + ds, ds, d)?,
        })
    }

    pub fn param_count(cfg: &MixerConfig) -> usize {
        let (d, ds) = (cfg.d_model, cfg.d_summary);
        Mlp::param_count(d, ds, ds) + Mlp::param_count(d, ds, d) + Mlp::param_count(d + ds, ds, d)
    }

    /// Time average of the summary transform, `[B, d_summary]`.
    pub fn summary_vector(&self, x: &Tensor) -> Result<Tensor> {
        self.summary.forward(x)?.mean_over_time()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t) = (x.dim(0), x.dim(1));
        let s = self.summary_vector(x)?;
        let ds = s.dim(1);
        let s = s.reshape(&[b, 1, ds])?.broadcast_to(&[b, t, ds])?;
        let local = self.local.forward(x)?;
        self.combine.forward(&Tensor::concat_lastdim(&[&local, &s])?)
    }
}

impl Module for SummaryMixing {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.summary.visit(&join(prefix, "summary"), f);
        self.local.visit(&join(prefix, "local"), f);
        self.combine.visit(&join(prefix, "combine"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.summary.visit_mut(&join(prefix, "summary"), f);
        self.local.visit_mut(&join(prefix, "local"), f);
        self.combine.visit_mut(&join(prefix, "combine"), f);
    }
}
