use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Codebook, PretrainConfig, Pretrainer, RandomProjection};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::mixers::MixerKind;
use crate::tensorcore::container::{read_records, write_padded_line, write_record, Record};
use crate::tensorcore::nn::{named_parameters, Module};
use crate::tensorcore::Tensor;

pub const CHECKPOINT_MAGIC: &str = "linmix-checkpoint 1";
const END: &str = "end-header";

/// Header lines (magic, step, RNG position, config echo), then the model
/// parameters, optimizer moments, projection and codebook as named records.
pub fn save_checkpoint(path: &Path, run: &Pretrainer) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let seed: String = run.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    let mut lines = vec![
        CHECKPOINT_MAGIC.to_string(),
        format!("step {}", run.step),
        format!("adam_step {}", run.optimizer.step),
        format!("rng {seed} {} {}", run.rng.get_stream(), run.rng.get_word_pos()),
    ];
    lines.extend(run.config.entries().into_iter().map(|(k, v)| format!("config {k}={v}")));
    lines.push(END.into());
    for l in &lines {
        write_padded_line(&mut w, l).map_err(io)?;
    }
    for (name, t) in named_parameters(&run.model) {
        write_record(&mut w, Some(&format!("param.{name}")), t.shape(), t.data()).map_err(io)?;
    }
    let opt = &run.optimizer;
    for (k, name) in opt.names.iter().enumerate() {
        write_record(&mut w, Some(&format!("adam.m.{name}")), &[opt.m[k].len()], &opt.m[k]).map_err(io)?;
        write_record(&mut w, Some(&format!("adam.v.{name}")), &[opt.v[k].len()], &opt.v[k]).map_err(io)?;
    }
    let (p, b) = (run.proj.matrix(), run.book.rows());
    write_record(&mut w, Some("proj"), p.shape(), p.data()).map_err(io)?;
    write_record(&mut w, Some("book"), b.shape(), b.data()).map_err(io)?;
    w.flush().map_err(io)
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", detail.into()))
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| bad(format!("expected `{key}` line, got {line:?}")))
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| bad(format!("bad number {s:?}")))
}

fn parse_seed(hex: &str) -> Result<[u8; 32]> {
    if hex.len() != 64 {
        return Err(bad("rng seed must be 64 hex digits"));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng seed is not hex"))?;
    }
    Ok(seed)
}

pub fn load_checkpoint(path: &Path) -> Result<Pretrainer> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut header = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("missing end of header"));
        }
        let line = line.trim_end().to_string();
        if line == END {
            break;
        }
        header.push(line);
    }
    if header.first().map(String::as_str) != Some(CHECKPOINT_MAGIC) {
        return Err(bad("not a linmix checkpoint"));
    }
    if header.len() < 4 {
        return Err(bad("truncated header"));
    }
    let step: u64 = num(field(&header[1], "step")?)?;
    let adam_step: u64 = num(field(&header[2], "adam_step")?)?;
    let rng_parts: Vec<&str> = field(&header[3], "rng")?.split_whitespace().collect();
    let [seed, stream, pos] = rng_parts[..] else {
        return Err(bad("rng line needs seed, stream and position"));
    };
    let mut config = PretrainConfig::new(EncoderConfig::desk(MixerKind::Mhsa));
    for line in &header[4..] {
        let (k, v) = field(line, "config")?
            .split_once('=')
            .ok_or_else(|| bad(format!("config line without `=`: {line:?}")))?;
        config.set(k, v)?;
    }

    let mut run = Pretrainer::new(&config)?;
    run.step = step;
    run.optimizer.step = adam_step;
    run.rng = ChaCha8Rng::from_seed(parse_seed(seed)?);
    run.rng.set_stream(num(stream)?);
    run.rng.set_word_pos(num(pos)?);

    let records = read_records(&mut r)?;
    let find = |name: &str| -> Result<&Record> {
        records
            .iter()
            .find(|rec| rec.name.as_deref() == Some(name))
            .ok_or_else(|| bad(format!("missing record {name}")))
    };
    let mut res = Ok(());
    run.model.visit_mut("", &mut |name, t| {
        if res.is_err() {
            return;
        }
        res = find(&format!("param.{name}")).and_then(|rec| {
            if rec.shape != t.shape() {
                return Err(bad(format!(
                    "{name} has shape {:?}, model expects {:?}",
                    rec.shape,
                    t.shape()
                )));
            }
            *t = Tensor::param(rec.data.clone(), &rec.shape)?;
            Ok(())
        });
    });
    res?;
    let opt = &mut run.optimizer;
    for k in 0..opt.names.len() {
        for (prefix, buf) in [("adam.m.", &mut opt.m[k]), ("adam.v.", &mut opt.v[k])] {
            let rec = find(&format!("{prefix}{}", opt.names[k]))?;
            if rec.data.len() != buf.len() {
                return Err(bad(format!("{prefix}{} has {} values", opt.names[k], rec.data.len())));
            }
            buf.copy_from_slice(&rec.data);
        }
    }
    run.proj = RandomProjection::from_matrix(find("proj")?.to_tensor()?)?;
    run.book = Codebook::from_rows(find("book")?.to_tensor()?)?;
    Ok(run)
}
