//! Feature sequences for pre-training: a seeded synthetic generator or a
//! tensor container file of `[frames, d_feat]` records.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use linmix_core::tensorcore::container::read_container;
use linmix_core::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{CliError, CliResult};

/// Mixture components shared by all sequences of one stream.
pub const COMPONENTS: usize = 32;
/// Chance that a frame keeps the previous frame's component.
pub const PERSISTENCE: f64 = 0.95;
/// Standard deviation of the per-frame noise around a component mean.
pub const FRAME_NOISE: f64 = 0.5;

const STREAM_TAG: u64 = 0x7379_6e74;

/// `n` sequences with lengths uniform in `len_lo..len_hi` (half-open).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub n: usize,
    pub len_lo: usize,
    pub len_hi: usize,
    /// Feature width; the encoder's `d_feat` when unset.
    pub d: Option<usize>,
    /// Overrides the run seed for the data only.
    pub seed: Option<u64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 64,
            len_lo: 400,
            len_hi: 800,
            d: None,
            seed: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synthetic spec needs n >= 1".into()));
        }
        if self.len_lo == 0 || self.len_hi <= self.len_lo {
            return Err(Error::Config(format!(
                "synthetic length range {}..{} is empty or starts at zero",
                self.len_lo, self.len_hi
            )));
        }
        if self.d == Some(0) {
            return Err(Error::Config("synthetic feature width must be at least 1".into()));
        }
        Ok(())
    }
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n={},len={}..{}", self.n, self.len_lo, self.len_hi)?;
        if let Some(d) = self.d {
            write!(f, ",d={d}")?;
        }
        if let Some(s) = self.seed {
            write!(f, ",seed={s}")?;
        }
        Ok(())
    }
}

impl FromStr for SynthSpec {
    type Err = Error;

    /// `n=64,len=400..800,d=80`; every field is optional.
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SynthSpec::default();
        let bad = |part: &str| Error::Config(format!("bad synthetic spec entry {part:?}"));
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| bad(part))?;
            let num = |v: &str| v.trim().parse::<usize>().map_err(|_| bad(part));
            match k.trim() {
                "n" => spec.n = num(v)?,
                "len" => {
                    let (lo, hi) = v.split_once("..").ok_or_else(|| bad(part))?;
                    spec.len_lo = num(lo)?;
                    spec.len_hi = num(hi)?;
                }
                "d" => spec.d = Some(num(v)?),
                "seed" => spec.seed = Some(v.trim().parse().map_err(|_| bad(part))?),
                _ => return Err(bad(part)),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    Synthetic(SynthSpec),
    File(PathBuf),
}

impl Default for FeatureSource {
    fn default() -> Self {
        FeatureSource::Synthetic(SynthSpec::default())
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSource::Synthetic(s) => write!(f, "synthetic:{s}"),
            FeatureSource::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl FromStr for FeatureSource {
    type Err = Error;

    /// `synthetic:<spec>` or a container file path.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(spec) = s.strip_prefix("synthetic:") {
            Ok(FeatureSource::Synthetic(spec.parse()?))
        } else if s == "synthetic" {
            Ok(FeatureSource::default())
        } else if s.is_empty() {
            Err(Error::Config("feature source must not be empty".into()))
        } else {
            Ok(FeatureSource::File(PathBuf::from(s)))
        }
    }
}

impl FeatureSource {
    pub fn validate(&self, d_feat: usize) -> CliResult<()> {
        if let FeatureSource::Synthetic(s) = self {
            s.validate()?;
            if let Some(d) = s.d.filter(|&d| d != d_feat) {
                return Err(CliError::Usage(format!(
                    "synthetic features have d={d} but d_feat is {d_feat}"
                )));
            }
        }
        Ok(())
    }

    /// All sequences as `[frames, d_feat]` tensors.
    pub fn load(&self, d_feat: usize, seed: u64) -> CliResult<Vec<Tensor>> {
        self.validate(d_feat)?;
        match self {
            FeatureSource::Synthetic(s) => Ok(synth_features(s, d_feat, seed)?),
            FeatureSource::File(path) => {
                let records = read_container(path).map_err(|e| CliError::Runtime(e.to_string()))?;
                if records.is_empty() {
                    return Err(CliError::Runtime(format!("{}: no feature records", path.display())));
                }
                records
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let frames = match r.shape[..] {
                            [t, d] | [1, t, d] if d == d_feat && t > 0 => t,
                            _ => {
                                return Err(CliError::Runtime(format!(
                                    "{}: record {i} has shape {:?}, expected [frames, {d_feat}]",
                                    path.display(),
                                    r.shape
                                )))
                            }
                        };
                        Ok(Tensor::new(r.data.clone(), &[frames, d_feat])?)
                    })
                    .collect()
            }
        }
    }
}

/// Sequences from a sticky hidden Markov chain over Gaussian components:
/// each frame keeps its predecessor's component with probability
/// [`PERSISTENCE`], otherwise draws one uniformly. The chain starts in its
/// uniform stationary distribution, so every frame has the same mixture law.
pub fn synth_features(spec: &SynthSpec, d_feat: usize, seed: u64) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let d = spec.d.unwrap_or(d_feat);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(seed) ^ STREAM_TAG);
    let means: Vec<f64> = (0..COMPONENTS * d).map(|_| rng.sample(StandardNormal)).collect();
    (0..spec.n)
        .map(|_| {
            let len = rng.random_range(spec.len_lo..spec.len_hi);
            let mut state = rng.random_range(0..COMPONENTS);
            let mut data = Vec::with_capacity(len * d);
            for t in 0..len {
                if t > 0 && rng.random::<f64>() >= PERSISTENCE {
                    state = rng.random_range(0..COMPONENTS);
                }
                let mu = &means[state * d..(state + 1) * d];
                data.extend(
                    mu.iter()
                        .map(|m| m + FRAME_NOISE * rng.sample::<f64, _>(StandardNormal)),
                );
            }
            Tensor::new(data, &[len, d])
        })
        .collect()
}
