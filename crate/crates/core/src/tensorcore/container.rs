//! Tensor container files.
//!
//! A container is a sequence of records. Each record is one ASCII header line
//! `dims: d1 d2 ... [name: NAME]`, space-padded so that the line including its
//! `\n` is a multiple of 8 bytes, followed by `d1·d2·…` little-endian `f64`
//! values. Payloads therefore start 8-byte aligned when the container does.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: Option<String>,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Record {
    pub fn from_tensor(name: Option<&str>, t: &Tensor) -> Record {
        Record {
            name: name.map(str::to_string),
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.data.clone(), &self.shape)
    }
}

/// Writes `line` padded with spaces to an 8-byte boundary, newline included.
pub fn write_padded_line(w: &mut impl Write, line: &str) -> std::io::Result<()> {
    let pad = (8 - (line.len() + 1) % 8) % 8;
    w.write_all(line.as_bytes())?;
    w.write_all(&b"        "[..pad])?;
    w.write_all(b"\n")
}

pub fn write_record(w: &mut impl Write, name: Option<&str>, shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    let mut line = format!("dims: {}", dims.join(" "));
    if let Some(n) = name {
        line.push_str(" name: ");
        line.push_str(n);
    }
    write_padded_line(w, &line)?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one record; `Ok(None)` at a clean end of input.
pub fn read_record(r: &mut impl BufRead) -> Result<Option<Record>> {
    let mut header = Vec::new();
    let n = r
        .read_until(b'\n', &mut header)
        .map_err(|e| Error::Format(format!("reading header: {e}")))?;
    if n == 0 {
        return Ok(None);
    }
    if header.last() != Some(&b'\n') {
        return Err(Error::Format("truncated header line".into()));
    }
    if header.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "header line of {} bytes is not 8-byte aligned",
            header.len()
        )));
    }
    let text = std::str::from_utf8(&header)
        .map_err(|_| Error::Format("header is not ASCII".into()))?
        .trim_end();
    let rest = text
        .strip_prefix("dims:")
        .ok_or_else(|| Error::Format(format!("expected `dims:` header, got {text:?}")))?;
    let (dims_part, name) = match rest.split_once("name:") {
        Some((d, n)) => (d, Some(n.trim().to_string())),
        None => (rest, None),
    };
    let shape = dims_part
        .split_whitespace()
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad dimension {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Format(format!("invalid dims {shape:?}")));
    }
    let count: usize = shape.iter().product();
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("payload of {count} values: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Some(Record { name, shape, data }))
}

pub fn read_records(r: &mut impl BufRead) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    while let Some(rec) = read_record(r)? {
        out.push(rec);
    }
    Ok(out)
}

pub fn write_container(path: &Path, records: &[Record]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        write_record(&mut w, rec.name.as_deref(), &rec.shape, &rec.data).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_aligned_and_payload_exact() {
        let mut buf = Vec::new();
        write_record(&mut buf, Some("w"), &[2, 3], &[1.5, -2.0, 0.1, 1e-300, 7.0, -0.0]).unwrap();
        let header_len = buf.iter().position(|&b| b == b'\n').unwrap() + 1;
        assert_eq!(header_len % 8, 0);
        assert!(buf.starts_with(b"dims: 2 3 name: w"));
        assert_eq!(buf.len(), header_len + 48);
        let rec = read_record(&mut &buf[..]).unwrap().unwrap();
        assert_eq!(rec.shape, vec![2, 3]);
        assert_eq!(rec.name.as_deref(), Some("w"));
        assert_eq!(rec.data[3].to_bits(), 1e-300f64.to_bits());
        assert_eq!(rec.data[5].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut buf = Vec::new();
        write_record(&mut buf, None, &[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_record(&mut &buf[..]).is_err());
    }

    #[test]
    fn misaligned_header_is_rejected() {
        let mut buf = b"dims: 1\n".to_vec();
        buf.extend_from_slice(&1.0f64.to_le_bytes());
        assert!(read_record(&mut &buf[..]).is_ok());
        let mut bad = b"dims: 1 \n".to_vec();
        bad.extend_from_slice(&1.0f64.to_le_bytes());
        assert!(read_record(&mut &bad[..]).is_err());
    }
}
