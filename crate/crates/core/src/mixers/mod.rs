//! Token mixers: maps from `[B, T, d]` to `[B, T, d]` that move information
//! across time steps.

mod fastformer;
mod hypermixing;
mod mamba;
mod mhsa;
pub mod scan;
mod summarymixing;

use std::fmt;
use std::str::FromStr;

pub use fastformer::{fastformer_additive_pool, Fastformer};
pub use hypermixing::{tm_mlp, HyperMixing};
pub use mamba::{discretize, BiMamba, MambaBlock, SelectiveTerms};
pub use mhsa::Mhsa;
pub use scan::{mamba_recurrence_oracle, selective_scan, ScanMode};
pub use summarymixing::{Mlp, SummaryMixing};

use crate::error::{Error, Result};
use crate::tensorcore::nn::Module;
use crate::tensorcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MixerKind {
    Mhsa,
    Fastformer,
    HyperMixing,
    SummaryMixing,
    Mamba,
}

impl MixerKind {
    pub const ALL: [MixerKind; 5] = [
        MixerKind::Mhsa,
        MixerKind::Fastformer,
        MixerKind::HyperMixing,
        MixerKind::SummaryMixing,
        MixerKind::Mamba,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Mhsa => "mhsa",
            MixerKind::Fastformer => "fastformer",
            MixerKind::HyperMixing => "hypermixing",
            MixerKind::SummaryMixing => "summarymixing",
            MixerKind::Mamba => "mamba",
        }
    }

    pub fn uses_heads(self) -> bool {
        matches!(self, MixerKind::Mhsa | MixerKind::Fastformer)
    }

    /// Whether the mixer commutes with permutations of the time axis.
    pub fn permutation_equivariant(self) -> bool {
        self != MixerKind::Mamba
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        MixerKind::ALL.into_iter().find(|k| k.name() == lower).ok_or_else(|| {
            Error::Config(format!(
                "unknown mixer kind {s:?}; expected one of mhsa, fastformer, hypermixing, summarymixing, mamba"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerConfig {
    pub kind: MixerKind,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_summary: usize,
    pub d_tmmlp: usize,
    pub d_state: usize,
    pub d_inner: usize,
    /// Concatenate a sinusoidal position code to the hypernetwork input.
    pub hyper_positional: bool,
    pub seed: u64,
}

impl MixerConfig {
    pub fn new(kind: MixerKind, d_model: usize) -> Self {
        MixerConfig {
            kind,
            d_model,
            n_heads: 4.min(d_model.max(1)),
            d_summary: d_model,
            d_tmmlp: d_model,
            d_state: 16,
            d_inner: 2 * d_model,
            hyper_positional: false,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_heads(mut self, n_heads: usize) -> Self {
        self.n_heads = n_heads;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_summary", self.d_summary),
            ("d_tmmlp", self.d_tmmlp),
            ("d_state", self.d_state),
            ("d_inner", self.d_inner),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.kind.uses_heads() && !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Low-rank width of the Mamba step-size projection.
    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }

    /// Trainable scalars of the mixer this config builds.
    pub fn param_count(&self) -> usize {
        match self.kind {
            MixerKind::Mhsa => Mhsa::param_count(self),
            MixerKind::Fastformer => Fastformer::param_count(self),
            MixerKind::HyperMixing => HyperMixing::param_count(self),
            MixerKind::SummaryMixing => SummaryMixing::param_count(self),
            MixerKind::Mamba => BiMamba::param_count(self),
        }
    }
}

/// Result of a mixer forward pass.
#[derive(Clone, Debug)]
pub struct MixerOutput {
    pub hidden: Tensor,
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Mhsa(Mhsa),
    Fastformer(Fastformer),
    HyperMixing(HyperMixing),
    SummaryMixing(SummaryMixing),
    Mamba(BiMamba),
}

impl Mixer {
    pub fn new(config: &MixerConfig) -> Result<Self> {
        config.validate()?;
        Ok(match config.kind {
            MixerKind::Mhsa => Mixer::Mhsa(Mhsa::new(config)?),
            MixerKind::Fastformer => Mixer::Fastformer(Fastformer::new(config)?),
            MixerKind::HyperMixing => Mixer::HyperMixing(HyperMixing::new(config)?),
            MixerKind::SummaryMixing => Mixer::SummaryMixing(SummaryMixing::new(config)?),
            MixerKind::Mamba => Mixer::Mamba(BiMamba::new(config)?),
        })
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Mhsa(_) => MixerKind::Mhsa,
            Mixer::Fastformer(_) => MixerKind::Fastformer,
            Mixer::HyperMixing(_) => MixerKind::HyperMixing,
            Mixer::SummaryMixing(_) => MixerKind::SummaryMixing,
            Mixer::Mamba(_) => MixerKind::Mamba,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x)?;
        let y = match self {
            Mixer::Mhsa(m) => m.forward(x),
            Mixer::Fastformer(m) => m.forward(x),
            Mixer::HyperMixing(m) => m.forward(x),
            Mixer::SummaryMixing(m) => m.forward(x),
            Mixer::Mamba(m) => m.forward(x),
        }?;
        debug_assert_eq!(y.shape(), x.shape());
        Ok(y)
    }

    fn inner(&self) -> &dyn Module {
        match self {
            Mixer::Mhsa(m) => m,
            Mixer::Fastformer(m) => m,
            Mixer::HyperMixing(m) => m,
            Mixer::SummaryMixing(m) => m,
            Mixer::Mamba(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Module {
        match self {
            Mixer::Mhsa(m) => m,
            Mixer::Fastformer(m) => m,
            Mixer::HyperMixing(m) => m,
            Mixer::SummaryMixing(m) => m,
            Mixer::Mamba(m) => m,
        }
    }
}

impl Module for Mixer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.inner().visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.inner_mut().visit_mut(prefix, f);
    }
}

/// Builds the configured mixer and applies it once.
pub fn mix(x: &Tensor, config: &MixerConfig) -> Result<MixerOutput> {
    let mixer = Mixer::new(config)?;
    Ok(MixerOutput {
        hidden: mixer.forward(x)?,
    })
}

pub(crate) fn check_input(x: &Tensor) -> Result<()> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "mixer",
            format!("expected [B, T, d], got {:?}", x.shape()),
        ));
    }
    Ok(())
}

/// Absolute sinusoidal position code, `[T, d]`.
pub fn sinusoidal(len: usize, d: usize) -> Result<Tensor> {
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[t * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(data, &[len, d])
}

/// Sum of hidden outputs; a scalar objective used by gradient checks.
pub fn output_sum(mixer: &Mixer, x: &Tensor) -> Result<Tensor> {
    mixer.forward(x)?.sum_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::nn::num_params;
    use crate::tensorcore::testutil::rand_tensor;

    #[test]
    fn analytic_counts_match_instantiated() {
        for kind in MixerKind::ALL {
            let mut cfg = MixerConfig::new(kind, 8).with_heads(2);
            cfg.d_summary = 5;
            cfg.d_tmmlp = 3;
            cfg.d_inner = 12;
            cfg.d_state = 4;
            let m = Mixer::new(&cfg).unwrap();
            assert_eq!(num_params(&m), cfg.param_count(), "{kind}");
        }
    }

    #[test]
    fn parse_kinds() {
        for kind in MixerKind::ALL {
            assert_eq!(kind.name().parse::<MixerKind>().unwrap(), kind);
        }
        assert!("linformer".parse::<MixerKind>().is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = MixerConfig::new(MixerKind::Mhsa, 10).with_heads(4);
        assert!(matches!(Mixer::new(&cfg), Err(Error::Config(_))));
        let cfg = MixerConfig::new(MixerKind::SummaryMixing, 10).with_heads(4);
        assert!(Mixer::new(&cfg).is_ok());
    }

    #[test]
    fn every_kind_preserves_shape() {
        for kind in MixerKind::ALL {
            let cfg = MixerConfig::new(kind, 8).with_heads(2);
            for t in [1, 2, 3, 17] {
                let x = rand_tensor(&[2, t, 8], t as u64);
                let y = mix(&x, &cfg).unwrap().hidden;
                assert_eq!(y.shape(), x.shape(), "{kind} T={t}");
            }
        }
    }

    #[test]
    fn sinusoid_starts_at_sin0_cos0() {
        let pe = sinusoidal(3, 4).unwrap();
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
    }
}
