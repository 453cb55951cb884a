//! Flat `key = value` run configuration. Defaults are overridden by a
//! config file, which is overridden by command-line flags.

use std::path::{Path, PathBuf};

use linmix_core::bestrq::PretrainConfig;
use linmix_core::encoder::EncoderConfig;
use linmix_core::mixers::MixerKind;

use crate::features::FeatureSource;
use crate::{CliError, CliResult};

/// Keys owned by the run itself, ahead of the model keys in echo order.
pub const RUN_KEYS: [&str; 13] = [
    "out",
    "kinds",
    "lengths",
    "repeats",
    "warmup",
    "batch_size",
    "memory_limit",
    "budget",
    "tolerance",
    "steps",
    "log_every",
    "frame_cap",
    "features",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Encoder, masking, codebook and optimizer settings; carries the seed.
    pub model: PretrainConfig,
    pub out: PathBuf,
    pub kinds: Vec<MixerKind>,
    /// Raw input frames per benchmark cell.
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub memory_limit: Option<usize>,
    /// Parameter target for matched benchmark configs; `None` benchmarks
    /// the model settings as given.
    pub budget: Option<usize>,
    pub tolerance: f64,
    pub steps: u64,
    pub log_every: u64,
    /// Most raw frames in one training batch.
    pub frame_cap: usize,
    pub features: FeatureSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: PretrainConfig::new(EncoderConfig::desk(MixerKind::Mhsa)),
            out: PathBuf::from("out"),
            kinds: MixerKind::ALL.to_vec(),
            lengths: vec![1000, 2000, 4000, 8000],
            repeats: 10,
            warmup: 2,
            batch_size: 6,
            memory_limit: None,
            budget: Some(3_000_000),
            tolerance: 0.02,
            steps: 1000,
            log_every: 1,
            frame_cap: 3200,
            features: FeatureSource::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value {value:?} for {key}")))
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<Option<T>> {
    match value.trim() {
        "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn show_optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), T::to_string)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn encoder(&self) -> &EncoderConfig {
        &self.model.encoder
    }

    pub fn seed(&self) -> u64 {
        self.model.seed()
    }

    pub fn is_key(key: &str) -> bool {
        RUN_KEYS.contains(&key) || PretrainConfig::is_key(key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match key {
            "out" => self.out = PathBuf::from(value.trim()),
            "kinds" => {
                self.kinds = match value.trim() {
                    "all" => MixerKind::ALL.to_vec(),
                    v => v
                        .split(',')
                        .map(|k| k.parse::<MixerKind>().map_err(CliError::from))
                        .collect::<CliResult<_>>()?,
                }
            }
            "lengths" => self.lengths = list(key, value)?,
            "repeats" => self.repeats = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "memory_limit" => self.memory_limit = optional(key, value)?,
            "budget" => self.budget = optional(key, value)?,
            "tolerance" => self.tolerance = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "frame_cap" => self.frame_cap = parse(key, value)?,
            "features" => self.features = value.parse()?,
            _ if PretrainConfig::is_key(key) => self.model.set(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every effective setting in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.out.display().to_string(),
            join(&self.kinds),
            join(&self.lengths),
            self.repeats.to_string(),
            self.warmup.to_string(),
            self.batch_size.to_string(),
            show_optional(&self.memory_limit),
            show_optional(&self.budget),
            self.tolerance.to_string(),
            self.steps.to_string(),
            self.log_every.to_string(),
            self.frame_cap.to_string(),
            self.features.to_string(),
        ];
        let mut out: Vec<_> = RUN_KEYS.into_iter().zip(values).collect();
        out.extend(self.model.entries());
        out
    }

    /// Config file text that reproduces this run when parsed back.
    pub fn echo(&self) -> String {
        let mut s = String::from("# effective linmix configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        if self.kinds.is_empty() || self.lengths.is_empty() {
            return Err(CliError::Usage("kinds and lengths must not be empty".into()));
        }
        if self.log_every == 0 || self.frame_cap == 0 {
            return Err(CliError::Usage("log_every and frame_cap must be at least 1".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(CliError::Usage(format!(
                "tolerance must be in (0, 1), got {}",
                self.tolerance
            )));
        }
        self.features.validate(self.encoder().d_feat)
    }

    /// Applies `key = value` lines; `origin` prefixes error messages.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| CliError::Usage(format!("{origin}:{}: {msg}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            self.set(key.trim(), value.trim()).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }
}

/// Defaults, then the file at `path` if any, then `overrides` in order.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> CliResult<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
        c.apply_text(&text, &p.display().to_string())?;
    }
    for (k, v) in overrides {
        c.set(k, v).map_err(|e| CliError::Usage(format!("--{k}: {e}")))?;
    }
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_text(text: &str) -> CliResult<RunConfig> {
        let mut c = RunConfig::default();
        c.apply_text(text, "test.cfg")?;
        c.validate()?;
        Ok(c)
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(from_text("").unwrap(), RunConfig::default());
        assert_eq!(from_text("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn malformed_value_names_line() {
        let err = from_text("seed = 3\n\nd_model = abc\n").unwrap_err().to_string();
        assert!(err.contains("test.cfg:3"), "{err}");
        assert!(err.contains("d_model"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = from_text("colour = blue").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("colour"));
    }

    #[test]
    fn missing_equals_is_rejected() {
        assert!(from_text("steps 10").unwrap_err().to_string().contains(":1:"));
    }

    #[test]
    fn echo_reproduces_config() {
        let c = from_text(
            "mixer = mamba\nkinds = mhsa,fastformer\nbudget = none\nmemory_limit = 4096\nclip_norm = none\nseed = 42 # trailing\nfeatures = synthetic:n=8,len=40..60,seed=3\n",
        )
        .unwrap();
        assert_eq!(c.encoder().kind(), MixerKind::Mamba);
        assert_eq!(from_text(&c.echo()).unwrap(), c);
        assert_eq!(c.entries().len(), RUN_KEYS.len() + c.model.entries().len());
    }
}
