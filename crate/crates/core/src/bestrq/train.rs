use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    apply_mask, compute_targets, make_batch_mask, pretrain_loss, Adam, AdamConfig, Codebook, MaskPlan,
    RandomProjection, STACK,
};
use crate::encoder::{parse_value, Encoder, EncoderConfig, ENCODER_KEYS};
use crate::error::{Error, Result};
use crate::tensorcore::{backward, Tensor};

/// Mask draws attempted before giving up on a batch with no masked position.
const MASK_ATTEMPTS: usize = 1000;

/// Everything that determines a pre-training run apart from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub d_code: usize,
    pub adam: AdamConfig,
}

/// Keys accepted by [`PretrainConfig::set`] besides the encoder keys.
pub const PRETRAIN_KEYS: [&str; 5] = ["mask_prob", "mask_span", "d_code", "lr", "clip_norm"];

impl PretrainConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        PretrainConfig {
            encoder,
            mask_prob: 0.01,
            mask_span: 8,
            d_code: 16,
            adam: AdamConfig::default(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.encoder.seed()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob {} outside [0, 1]", self.mask_prob)));
        }
        if self.mask_span == 0 || self.d_code == 0 {
            return Err(Error::Config("mask_span and d_code must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mask_prob" => self.mask_prob = parse_value(key, value)?,
            "mask_span" => self.mask_span = parse_value(key, value)?,
            "d_code" => self.d_code = parse_value(key, value)?,
            "lr" => self.adam.lr = parse_value(key, value)?,
            "clip_norm" => {
                self.adam.clip_norm = match value.trim() {
                    "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            _ => return self.encoder.set(key, value),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = self.encoder.entries();
        out.extend([
            ("mask_prob", self.mask_prob.to_string()),
            ("mask_span", self.mask_span.to_string()),
            ("d_code", self.d_code.to_string()),
            ("lr", self.adam.lr.to_string()),
            (
                "clip_norm",
                self.adam.clip_norm.map_or("none".into(), |v| v.to_string()),
            ),
        ]);
        out
    }

    pub fn is_key(key: &str) -> bool {
        ENCODER_KEYS.contains(&key) || PRETRAIN_KEYS.contains(&key)
    }
}

/// One optimization step: targets from the clean batch, masked forward
/// pass, masked cross-entropy, update of the model parameters only.
pub fn pretrain_step(
    model: &mut Encoder,
    batch: &Tensor,
    proj: &RandomProjection,
    book: &Codebook,
    optimizer: &mut Adam,
    config: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let targets = compute_targets(batch, proj, book)?;
    let (b, tp) = (batch.dim(0), batch.dim(1) / STACK);
    let plan = draw_plan(b, tp, config, rng)?;
    let masked = apply_mask(batch, &plan, rng)?;
    let logits = model.encode(&masked)?;
    if logits.dim(1) != tp {
        return Err(Error::Alignment {
            model_len: logits.dim(1),
            target_len: tp,
        });
    }
    let loss = pretrain_loss(&logits, &targets, &plan)?;
    backward(&loss)?;
    optimizer.update(model)?;
    loss.item()
}

fn draw_plan(b: usize, tp: usize, config: &PretrainConfig, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    for _ in 0..MASK_ATTEMPTS {
        let plan = make_batch_mask(b, tp, config.mask_prob, config.mask_span, rng)?;
        if plan.masked_count() > 0 {
            return Ok(plan);
        }
    }
    Err(Error::NoLossPositions)
}

/// Model, frozen target generator, optimizer and RNG of one run.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub config: PretrainConfig,
    pub model: Encoder,
    pub proj: RandomProjection,
    pub book: Codebook,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Pretrainer {
    pub fn new(config: &PretrainConfig) -> Result<Self> {
        config.validate()?;
        let e = &config.encoder;
        let model = Encoder::new(e)?;
        let optimizer = Adam::new(config.adam, &model);
        Ok(Pretrainer {
            proj: RandomProjection::new(config.seed(), STACK * e.d_feat, config.d_code)?,
            book: Codebook::new(config.seed(), e.vocab, config.d_code)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed() ^ 0x6d61_736b),
            config: config.clone(),
            model,
            optimizer,
            step: 0,
        })
    }

    pub fn step(&mut self, batch: &Tensor) -> Result<f64> {
        let loss = pretrain_step(
            &mut self.model,
            batch,
            &self.proj,
            &self.book,
            &mut self.optimizer,
            &self.config,
            &mut self.rng,
        )?;
        self.step += 1;
        Ok(loss)
    }
}
