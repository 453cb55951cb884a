//! Masked-prediction encoder: convolutional subsampler, a stack of
//! conformer-lite blocks with a swappable mixer slot, and a linear head over
//! the codebook vocabulary.

mod matching;

use std::fmt;
use std::str::FromStr;

pub use matching::{build_matched_configs, knob, set_knob, ParamBudget};

use crate::error::{Error, Result};
use crate::mixers::{sinusoidal, Mixer, MixerConfig, MixerKind, Mlp};
use crate::tensorcore::nn::{join, LayerNorm, Linear, Module, ParamInit};
use crate::tensorcore::Tensor;

/// Raw frames consumed per output step.
pub const SUBSAMPLING: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PositionalMode {
    None,
    /// Absolute sinusoidal code added after subsampling.
    #[default]
    Sinusoidal,
}

impl fmt::Display for PositionalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionalMode::None => "none",
            PositionalMode::Sinusoidal => "sinusoidal",
        })
    }
}

impl FromStr for PositionalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(PositionalMode::None),
            "sinusoidal" => Ok(PositionalMode::Sinusoidal),
            other => Err(Error::Config(format!(
                "unknown positional mode {other:?}; expected none or sinusoidal"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub mixer: MixerConfig,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub conv_kernel: usize,
    pub vocab: usize,
    pub d_feat: usize,
    pub positional_mode: PositionalMode,
}

impl EncoderConfig {
    /// Desk-scale defaults: 4 layers of width 128, FFN 512, kernel 15,
    /// vocabulary 512, 80 input features.
    pub fn desk(kind: MixerKind) -> Self {
        EncoderConfig::new(kind, 128, 4)
    }

    pub fn new(kind: MixerKind, d_model: usize, n_layers: usize) -> Self {
        EncoderConfig {
            mixer: MixerConfig::new(kind, d_model),
            n_layers,
            d_model,
            d_ffn: 4 * d_model,
            conv_kernel: 15,
            vocab: 512,
            d_feat: 80,
            positional_mode: PositionalMode::Sinusoidal,
        }
    }

    pub fn kind(&self) -> MixerKind {
        self.mixer.kind
    }

    pub fn seed(&self) -> u64 {
        self.mixer.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.mixer.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        if self.mixer.d_model != self.d_model {
            return Err(Error::Config(format!(
                "mixer width {} differs from d_model {}",
                self.mixer.d_model, self.d_model
            )));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("vocab", self.vocab),
            ("d_feat", self.d_feat),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        self.mixer.validate()
    }

    /// Mixer config for one layer; each layer draws its own parameters.
    pub fn layer_mixer(&self, layer: usize) -> MixerConfig {
        let mut m = self.mixer.clone();
        m.seed = self.mixer.seed ^ crate::tensorcore::nn::fnv1a(format!("blocks.{layer}").bytes());
        m
    }

    /// Exact count of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (d, f, k) = (self.d_model, self.d_feat, 3);
        let frontend = (d * f * k + d) + (d * d * k + d);
        let head = Linear::param_count(d, self.vocab, true);
        frontend + self.n_layers * self.block_param_count() + head
    }

    pub fn block_param_count(&self) -> usize {
        let d = self.d_model;
        let ffn = LayerNorm::param_count(d) + Mlp::param_count(d, self.d_ffn, d);
        let conv = LayerNorm::param_count(d) + d * self.conv_kernel + d + Linear::param_count(d, d, true);
        2 * ffn + LayerNorm::param_count(d) + self.mixer.param_count() + conv + LayerNorm::param_count(d)
    }
}

/// Keys accepted by [`EncoderConfig::set`], in echo order.
pub const ENCODER_KEYS: [&str; 15] = [
    "mixer",
    "d_model",
    "n_layers",
    "d_ffn",
    "conv_kernel",
    "vocab",
    "d_feat",
    "positional",
    "n_heads",
    "d_summary",
    "d_tmmlp",
    "d_state",
    "d_inner",
    "hyper_positional",
    "seed",
];

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl EncoderConfig {
    /// Assigns one field by key. `d_model` also resizes the mixer.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.mixer;
        match key {
            "mixer" => m.kind = value.parse()?,
            "d_model" => {
                self.d_model = parse_value(key, value)?;
                m.d_model = self.d_model;
            }
            "n_layers" => self.n_layers = parse_value(key, value)?,
            "d_ffn" => self.d_ffn = parse_value(key, value)?,
            "conv_kernel" => self.conv_kernel = parse_value(key, value)?,
            "vocab" => self.vocab = parse_value(key, value)?,
            "d_feat" => self.d_feat = parse_value(key, value)?,
            "positional" => self.positional_mode = value.parse()?,
            "n_heads" => m.n_heads = parse_value(key, value)?,
            "d_summary" => m.d_summary = parse_value(key, value)?,
            "d_tmmlp" => m.d_tmmlp = parse_value(key, value)?,
            "d_state" => m.d_state = parse_value(key, value)?,
            "d_inner" => m.d_inner = parse_value(key, value)?,
            "hyper_positional" => m.hyper_positional = parse_value(key, value)?,
            "seed" => m.seed = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)`; feeding these back through
    /// [`EncoderConfig::set`] rebuilds the config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.mixer;
        let values = [
            m.kind.to_string(),
            self.d_model.to_string(),
            self.n_layers.to_string(),
            self.d_ffn.to_string(),
            self.conv_kernel.to_string(),
            self.vocab.to_string(),
            self.d_feat.to_string(),
            self.positional_mode.to_string(),
            m.n_heads.to_string(),
            m.d_summary.to_string(),
            m.d_tmmlp.to_string(),
            m.d_state.to_string(),
            m.d_inner.to_string(),
            m.hyper_positional.to_string(),
            m.seed.to_string(),
        ];
        ENCODER_KEYS.into_iter().zip(values).collect()
    }
}

/// Two stride-2 convolutions (kernel 3, padding 1), each followed by GELU.
#[derive(Clone, Debug)]
pub struct ConvSubsampler {
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
}

impl ConvSubsampler {
    pub fn new(seed: u64, d_feat: usize, d_model: usize) -> Result<Self> {
        let mut init = ParamInit::new(seed, "frontend");
        Ok(ConvSubsampler {
            conv1_weight: init.fan_in(&[d_model, d_feat, 3], 3 * d_feat)?,
            conv1_bias: init.fan_in(&[d_model], 3 * d_feat)?,
            conv2_weight: init.fan_in(&[d_model, d_model, 3], 3 * d_model)?,
            conv2_bias: init.fan_in(&[d_model], 3 * d_model)?,
        })
    }

    /// `[B, T, d_feat]` → `[B, ⌈T/4⌉, d_model]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 3 {
            return Err(Error::shape(
                "conv_subsample",
                format!("expected [B, T, d_feat], got {:?}", x.shape()),
            ));
        }
        if x.dim(1) < SUBSAMPLING {
            return Err(Error::TooShort {
                min: SUBSAMPLING,
                got: x.dim(1),
            });
        }
        let h = x.conv1d(&self.conv1_weight, &self.conv1_bias, 2, 1)?.gelu()?;
        h.conv1d(&self.conv2_weight, &self.conv2_bias, 2, 1)?.gelu()
    }
}

impl Module for ConvSubsampler {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "conv1.weight"), &self.conv1_weight);
        f(&join(prefix, "conv1.bias"), &self.conv1_bias);
        f(&join(prefix, "conv2.weight"), &self.conv2_weight);
        f(&join(prefix, "conv2.bias"), &self.conv2_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "conv1.weight"), &mut self.conv1_weight);
        f(&join(prefix, "conv1.bias"), &mut self.conv1_bias);
        f(&join(prefix, "conv2.weight"), &mut self.conv2_weight);
        f(&join(prefix, "conv2.bias"), &mut self.conv2_bias);
    }
}

/// Depthwise convolution branch: depthwise conv, SiLU, pointwise projection.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub depthwise_weight: Tensor,
    pub depthwise_bias: Tensor,
    pub pointwise: Linear,
}

impl ConvModule {
    fn new(seed: u64, scope: &str, d: usize, kernel: usize) -> Result<Self> {
        let mut init = ParamInit::new(seed, &format!("{scope}.depthwise"));
        Ok(ConvModule {
            depthwise_weight: init.fan_in(&[d, kernel], kernel)?,
            depthwise_bias: init.fan_in(&[d], kernel)?,
            pointwise: Linear::new(seed, &format!("{scope}.pointwise"), d, d, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.depthwise_conv1d(&self.depthwise_weight, &self.depthwise_bias)?;
        self.pointwise.forward(&h.silu()?)
    }
}

impl Module for ConvModule {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "depthwise.weight"), &self.depthwise_weight);
        f(&join(prefix, "depthwise.bias"), &self.depthwise_bias);
        self.pointwise.visit(&join(prefix, "pointwise"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "depthwise.weight"), &mut self.depthwise_weight);
        f(&join(prefix, "depthwise.bias"), &mut self.depthwise_bias);
        self.pointwise.visit_mut(&join(prefix, "pointwise"), f);
    }
}

/// Pre-norm residual sandwich: half-step FFN, mixer, convolution, half-step
/// FFN, final norm.
#[derive(Clone, Debug)]
pub struct Block {
    pub ffn1_norm: LayerNorm,
    pub ffn1: Mlp,
    pub mixer_norm: LayerNorm,
    pub mixer: Mixer,
    pub conv_norm: LayerNorm,
    pub conv: ConvModule,
    pub ffn2_norm: LayerNorm,
    pub ffn2: Mlp,
    pub final_norm: LayerNorm,
}

impl Block {
    pub fn new(cfg: &EncoderConfig, layer: usize) -> Result<Self> {
        let (d, s) = (cfg.d_model, cfg.seed());
        let scope = format!("blocks.{layer}");
        Ok(Block {
            ffn1_norm: LayerNorm::new(d)?,
            ffn1: Mlp::new(s, &format!("{scope}.ffn1"), d, cfg.d_ffn, d)?,
            mixer_norm: LayerNorm::new(d)?,
            mixer: Mixer::new(&cfg.layer_mixer(layer))?,
            conv_norm: LayerNorm::new(d)?,
            conv: ConvModule::new(s, &format!("{scope}.conv"), d, cfg.conv_kernel)?,
            ffn2_norm: LayerNorm::new(d)?,
            ffn2: Mlp::new(s, &format!("{scope}.ffn2"), d, cfg.d_ffn, d)?,
            final_norm: LayerNorm::new(d)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.add(&self.ffn1.forward(&self.ffn1_norm.forward(x)?)?.scale(0.5)?)?;
        let x = x.add(&self.mixer.forward(&self.mixer_norm.forward(&x)?)?)?;
        let x = x.add(&self.conv.forward(&self.conv_norm.forward(&x)?)?)?;
        let x = x.add(&self.ffn2.forward(&self.ffn2_norm.forward(&x)?)?.scale(0.5)?)?;
        self.final_norm.forward(&x)
    }

    /// Zeroes the last layer of every residual branch and the whole mixer,
    /// so each branch contributes exactly zero.
    pub fn zero_residual_branches(&mut self) -> Result<()> {
        let zero = |t: &mut Tensor| -> Result<()> {
            *t = Tensor::param(vec![0.0; t.numel()], t.shape())?;
            Ok(())
        };
        let mut res = Ok(());
        for l in [&mut self.ffn1.out, &mut self.ffn2.out, &mut self.conv.pointwise] {
            l.visit_mut("", &mut |_, t| {
                if res.is_ok() {
                    res = zero(t);
                }
            });
        }
        self.mixer.visit_mut("", &mut |_, t| {
            if res.is_ok() {
                res = zero(t);
            }
        });
        res
    }
}

impl Module for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ffn1_norm.visit(&join(prefix, "ffn1_norm"), f);
        self.ffn1.visit(&join(prefix, "ffn1"), f);
        self.mixer_norm.visit(&join(prefix, "mixer_norm"), f);
        self.mixer.visit(&join(prefix, "mixer"), f);
        self.conv_norm.visit(&join(prefix, "conv_norm"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        self.ffn2_norm.visit(&join(prefix, "ffn2_norm"), f);
        self.ffn2.visit(&join(prefix, "ffn2"), f);
        self.final_norm.visit(&join(prefix, "final_norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ffn1_norm.visit_mut(&join(prefix, "ffn1_norm"), f);
        self.ffn1.visit_mut(&join(prefix, "ffn1"), f);
        self.mixer_norm.visit_mut(&join(prefix, "mixer_norm"), f);
        self.mixer.visit_mut(&join(prefix, "mixer"), f);
        self.conv_norm.visit_mut(&join(prefix, "conv_norm"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.ffn2_norm.visit_mut(&join(prefix, "ffn2_norm"), f);
        self.ffn2.visit_mut(&join(prefix, "ffn2"), f);
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub frontend: ConvSubsampler,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

impl Encoder {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let s = config.seed();
        Ok(Encoder {
            frontend: ConvSubsampler::new(s, config.d_feat, config.d_model)?,
            blocks: (0..config.n_layers)
                .map(|i| Block::new(config, i))
                .collect::<Result<_>>()?,
            head: Linear::new(s, "head", config.d_model, config.vocab, true)?,
            config: config.clone(),
        })
    }

    /// Frontend output, `[B, ⌈T/4⌉, d_model]`.
    pub fn conv_subsample(&self, features: &Tensor) -> Result<Tensor> {
        self.frontend.forward(features)
    }

    /// Hidden states after the last block, before the head.
    pub fn hidden(&self, features: &Tensor) -> Result<Tensor> {
        check_features(features, self.config.d_feat)?;
        // drop trailing frames so the output length equals the stacked-target length
        let t = features.dim(1) / SUBSAMPLING * SUBSAMPLING;
        let trimmed = if t == features.dim(1) {
            features.clone()
        } else if t == 0 {
            return Err(Error::TooShort {
                min: SUBSAMPLING,
                got: features.dim(1),
            });
        } else {
            truncate_time(features, t)?
        };
        let mut x = self.frontend.forward(&trimmed)?;
        if self.config.positional_mode == PositionalMode::Sinusoidal {
            let (len, d) = (x.dim(1), x.dim(2));
            x = x.add(&sinusoidal(len, d)?)?;
        }
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(x)
    }

    /// Codebook logits, `[B, ⌊T/4⌋, V]`.
    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.hidden(features)?)
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.frontend.visit(&join(prefix, "frontend"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.frontend.visit_mut(&join(prefix, "frontend"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Builds the configured encoder and returns its logits for `features`.
pub fn encode(features: &Tensor, config: &EncoderConfig) -> Result<Tensor> {
    Encoder::new(config)?.encode(features)
}

fn check_features(x: &Tensor, d_feat: usize) -> Result<()> {
    if x.rank() != 3 || x.dim(2) != d_feat {
        return Err(Error::shape(
            "encode",
            format!("expected [B, T, {d_feat}], got {:?}", x.shape()),
        ));
    }
    if x.dim(1) < SUBSAMPLING {
        return Err(Error::TooShort {
            min: SUBSAMPLING,
            got: x.dim(1),
        });
    }
    Ok(())
}

/// First `t` frames of every sequence; input data only, no graph.
pub(crate) fn truncate_time(x: &Tensor, t: usize) -> Result<Tensor> {
    let (b, len, d) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Vec::with_capacity(b * t * d);
    for bi in 0..b {
        out.extend_from_slice(&x.data()[bi * len * d..(bi * len + t) * d]);
    }
    Tensor::new(out, &[b, t, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::nn::num_params;
    use crate::tensorcore::testutil::rand_tensor;

    fn tiny(kind: MixerKind) -> EncoderConfig {
        let mut c = EncoderConfig::new(kind, 8, 2);
        c.mixer = c.mixer.with_heads(2);
        c.mixer.d_state = 4;
        c.d_ffn = 16;
        c.conv_kernel = 3;
        c.vocab = 5;
        c.d_feat = 6;
        c
    }

    #[test]
    fn analytic_count_matches_instantiated() {
        for kind in MixerKind::ALL {
            let c = tiny(kind);
            assert_eq!(num_params(&Encoder::new(&c).unwrap()), c.param_count(), "{kind}");
            let c = EncoderConfig::desk(kind);
            assert_eq!(num_params(&Encoder::new(&c).unwrap()), c.param_count(), "{kind}");
        }
    }

    #[test]
    fn count_is_additive_over_blocks() {
        let mut c = tiny(MixerKind::SummaryMixing);
        c.n_layers = 1;
        let one = c.param_count();
        c.n_layers = 2;
        assert_eq!(c.param_count() - one, c.block_param_count());
    }

    #[test]
    fn subsampler_lengths() {
        let c = tiny(MixerKind::Mhsa);
        let e = Encoder::new(&c).unwrap();
        let y = e.conv_subsample(&rand_tensor(&[1, 1000, 6], 1)).unwrap();
        assert_eq!(y.shape(), &[1, 250, 8]);
        let y = e.conv_subsample(&rand_tensor(&[1, 4, 6], 1)).unwrap();
        assert_eq!(y.dim(1), 1);
        assert!(matches!(
            e.conv_subsample(&rand_tensor(&[1, 3, 6], 1)),
            Err(Error::TooShort { min: 4, got: 3 })
        ));
    }

    #[test]
    fn zero_input_gives_time_constant_frontend_output() {
        let e = Encoder::new(&tiny(MixerKind::Mhsa)).unwrap();
        let y = e.conv_subsample(&Tensor::zeros(&[1, 32, 6]).unwrap()).unwrap();
        // step 0 of the second conv reads its zero padding against GELU(bias)
        for t in 2..8 {
            assert_eq!(y.data()[t * 8..(t + 1) * 8], y.data()[8..16]);
        }
    }

    #[test]
    fn encode_lengths_match_stacking() {
        let e = Encoder::new(&tiny(MixerKind::Fastformer)).unwrap();
        for t in [4, 5, 7, 8, 9, 40, 43] {
            let y = e.encode(&rand_tensor(&[2, t, 6], t as u64)).unwrap();
            assert_eq!(y.shape(), &[2, t / 4, 5], "T={t}");
        }
    }

    #[test]
    fn zero_branches_leave_only_final_norm() {
        for kind in MixerKind::ALL {
            let mut b = Block::new(&tiny(kind), 0).unwrap();
            b.zero_residual_branches().unwrap();
            let x = rand_tensor(&[1, 5, 8], 3);
            let y = b.forward(&x).unwrap();
            let expect = b.final_norm.forward(&x).unwrap();
            assert_eq!(y.data(), expect.data(), "{kind}");
        }
    }

    #[test]
    fn layers_draw_distinct_parameters() {
        let e = Encoder::new(&tiny(MixerKind::Mhsa)).unwrap();
        let Mixer::Mhsa(a) = &e.blocks[0].mixer else {
            unreachable!()
        };
        let Mixer::Mhsa(b) = &e.blocks[1].mixer else {
            unreachable!()
        };
        assert_ne!(a.query.weight.data(), b.query.weight.data());
        assert_ne!(
            e.blocks[0].ffn1.hidden.weight.data(),
            e.blocks[1].ffn1.hidden.weight.data()
        );
    }

    #[test]
    fn entries_round_trip_through_set() {
        let mut c = tiny(MixerKind::HyperMixing).with_seed(99);
        c.mixer.hyper_positional = true;
        c.positional_mode = PositionalMode::None;
        let mut back = EncoderConfig::new(MixerKind::Mhsa, 3, 1);
        for (k, v) in c.entries() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, c);
        assert!(back.set("d_ffn", "wide").is_err());
        assert!(back.set("width", "3").is_err());
    }

    #[test]
    fn rejects_even_kernel() {
        let mut c = tiny(MixerKind::Mhsa);
        c.conv_kernel = 4;
        assert!(matches!(Encoder::new(&c), Err(Error::Config(_))));
    }
}
