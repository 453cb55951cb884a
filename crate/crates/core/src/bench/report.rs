use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::stats::{bootstrap_ci, coefficient_of_variation, fit_exponent};
use super::{BenchmarkRecord, FRAMES_PER_SECOND};
use crate::encoder::SUBSAMPLING;
use crate::error::{Error, Result};
use crate::mixers::MixerKind;

pub const CSV_HEADER: &str = "kind,length_frames,mean_time_s,time_lo,time_hi,peak_bytes,mac_count";

const BOOTSTRAP_RESAMPLES: usize = 1000;
const CI_LEVEL: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub kind: MixerKind,
    pub length_frames: usize,
    pub mean_time: f64,
    pub time_lo: f64,
    pub time_hi: f64,
    pub time_cv: f64,
    pub peak_bytes: usize,
    pub mac_count: u64,
}

/// Fitted log-log slopes for one kind across its successful cells.
#[derive(Clone, Debug, PartialEq)]
pub struct KindFit {
    pub kind: MixerKind,
    pub time_exponent: Option<f64>,
    pub memory_exponent: Option<f64>,
    pub mac_exponent: Option<f64>,
    /// Largest per-cell coefficient of variation of wall time.
    pub max_time_cv: f64,
}

/// Relative change of an alternative against MHSA at one length;
/// `-0.64` means 64% less.
#[derive(Clone, Debug, PartialEq)]
pub struct Delta {
    pub kind: MixerKind,
    pub length_frames: usize,
    pub time: f64,
    pub memory: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ScalingReport {
    pub cells: Vec<CellSummary>,
    pub fits: Vec<KindFit>,
    pub deltas: Vec<Delta>,
    /// `(kind, length)` cells that did not run.
    pub failed: Vec<(MixerKind, usize)>,
    /// No MHSA cells were available, so `deltas` is empty.
    pub missing_baseline: bool,
}

impl ScalingReport {
    pub fn cell(&self, kind: MixerKind, length_frames: usize) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.kind == kind && c.length_frames == length_frames)
    }

    pub fn fit(&self, kind: MixerKind) -> Option<&KindFit> {
        self.fits.iter().find(|f| f.kind == kind)
    }

    pub fn delta(&self, kind: MixerKind, length_frames: usize) -> Option<&Delta> {
        self.deltas
            .iter()
            .find(|d| d.kind == kind && d.length_frames == length_frames)
    }
}

fn exponent(points: Vec<(f64, f64)>) -> Option<f64> {
    if points.len() < 3 {
        None
    } else {
        fit_exponent(&points).ok()
    }
}

/// Per-cell bootstrap intervals, per-kind exponents and deltas against MHSA.
pub fn build_report(records: &[BenchmarkRecord], seed: u64) -> Result<ScalingReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ScalingReport::default();
    for r in records {
        if r.failed() {
            report.failed.push((r.kind, r.length_frames));
            continue;
        }
        let (lo, m, hi) = bootstrap_ci(&r.wall_times, CI_LEVEL, BOOTSTRAP_RESAMPLES, &mut rng)?;
        report.cells.push(CellSummary {
            kind: r.kind,
            length_frames: r.length_frames,
            mean_time: m,
            time_lo: lo,
            time_hi: hi,
            time_cv: coefficient_of_variation(&r.wall_times),
            peak_bytes: r.peak_bytes.iter().copied().max().unwrap_or(0),
            mac_count: r.mac_count,
        });
    }
    let mut kinds: Vec<MixerKind> = Vec::new();
    for c in &report.cells {
        if !kinds.contains(&c.kind) {
            kinds.push(c.kind);
        }
    }
    for &kind in &kinds {
        let cells: Vec<&CellSummary> = report.cells.iter().filter(|c| c.kind == kind).collect();
        let pts = |f: &dyn Fn(&CellSummary) -> f64| -> Vec<(f64, f64)> {
            cells.iter().map(|c| (c.length_frames as f64, f(c))).collect()
        };
        report.fits.push(KindFit {
            kind,
            time_exponent: exponent(pts(&|c| c.mean_time)),
            memory_exponent: exponent(pts(&|c| c.peak_bytes as f64)),
            mac_exponent: exponent(pts(&|c| c.mac_count as f64)),
            max_time_cv: cells.iter().map(|c| c.time_cv).fold(0.0, f64::max),
        });
    }
    report.missing_baseline = !kinds.contains(&MixerKind::Mhsa);
    if !report.missing_baseline {
        for c in report.cells.iter().filter(|c| c.kind != MixerKind::Mhsa) {
            if let Some(base) = report.cell(MixerKind::Mhsa, c.length_frames) {
                report.deltas.push(Delta {
                    kind: c.kind,
                    length_frames: c.length_frames,
                    time: c.mean_time / base.mean_time - 1.0,
                    memory: c.peak_bytes as f64 / base.peak_bytes as f64 - 1.0,
                });
            }
        }
    }
    Ok(report)
}

fn mapping_comment() -> String {
    format!(
        "# length_frames counts raw input frames at {} frames/s (10 ms hop); seconds = frames / {}; steps after subsampling = frames / {}",
        FRAMES_PER_SECOND, FRAMES_PER_SECOND, SUBSAMPLING
    )
}

fn g17(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV text: mapping comment, fixed header, one row per cell, then `#`
/// summary lines with per-kind exponents and MHSA deltas.
pub fn to_csv(report: &ScalingReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", mapping_comment());
    let _ = writeln!(s, "{CSV_HEADER}");
    for c in &report.cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            c.kind,
            c.length_frames,
            g17(c.mean_time),
            g17(c.time_lo),
            g17(c.time_hi),
            c.peak_bytes,
            c.mac_count
        );
    }
    if !report.cells.is_empty() {
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), g17);
        for f in &report.fits {
            let _ = writeln!(
                s,
                "# exponent,{},time={},memory={},macs={},max_time_cv={}",
                f.kind,
                opt(f.time_exponent),
                opt(f.memory_exponent),
                opt(f.mac_exponent),
                g17(f.max_time_cv)
            );
        }
        for d in &report.deltas {
            let _ = writeln!(
                s,
                "# delta_vs_mhsa,{},{},time={},memory={}",
                d.kind,
                d.length_frames,
                g17(d.time),
                g17(d.memory)
            );
        }
        for (k, l) in &report.failed {
            let _ = writeln!(s, "# failed,{k},{l}");
        }
        if report.missing_baseline {
            let _ = writeln!(s, "# warning,no mhsa baseline; deltas omitted");
        }
    }
    s
}

pub fn emit_csv(report: &ScalingReport, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(report)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub kind: MixerKind,
    pub length_frames: usize,
    pub mean_time: f64,
    pub time_lo: f64,
    pub time_hi: f64,
    pub peak_bytes: usize,
    pub mac_count: u64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParsedCsv {
    pub rows: Vec<CsvRow>,
    /// `(kind, time, memory, macs)`; `None` where the fit was unavailable.
    pub exponents: Vec<(MixerKind, Option<f64>, Option<f64>, Option<f64>)>,
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("csv line {line}: bad number {s:?}")))
}

fn parse_opt(s: &str, line: usize) -> Result<Option<f64>> {
    let v: f64 = parse_num(s, line)?;
    Ok(if v.is_nan() { None } else { Some(v) })
}

pub fn parse_csv(text: &str) -> Result<ParsedCsv> {
    let mut out = ParsedCsv::default();
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if let Some(rest) = line.strip_prefix("# exponent,") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::Format(format!("csv line {n}: malformed exponent line")));
            }
            let field = |p: &str, key: &str| -> Result<Option<f64>> {
                let v = p
                    .strip_prefix(key)
                    .ok_or_else(|| Error::Format(format!("csv line {n}: expected {key}")))?;
                parse_opt(v, n)
            };
            out.exponents.push((
                parts[0].parse()?,
                field(parts[1], "time=")?,
                field(parts[2], "memory=")?,
                field(parts[3], "macs=")?,
            ));
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            if line != CSV_HEADER {
                return Err(Error::Format(format!("csv line {n}: expected header {CSV_HEADER:?}")));
            }
            seen_header = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::Format(format!(
                "csv line {n}: {} columns, expected 7",
                cols.len()
            )));
        }
        out.rows.push(CsvRow {
            kind: cols[0].parse()?,
            length_frames: parse_num(cols[1], n)?,
            mean_time: parse_num(cols[2], n)?,
            time_lo: parse_num(cols[3], n)?,
            time_hi: parse_num(cols[4], n)?,
            peak_bytes: parse_num(cols[5], n)?,
            mac_count: parse_num(cols[6], n)?,
        });
    }
    if !seen_header {
        return Err(Error::Format("csv has no header row".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(kind: MixerKind, len: usize, t: f64, peak: usize) -> BenchmarkRecord {
        BenchmarkRecord {
            kind,
            length_frames: len,
            wall_times: vec![t, t * 1.01, t * 0.99],
            peak_bytes: vec![peak; 3],
            mac_count: (len * len) as u64,
            failure: None,
        }
    }

    #[test]
    fn equal_alternative_has_zero_deltas() {
        let recs: Vec<_> = [100, 200, 400]
            .iter()
            .flat_map(|&l| [rec(MixerKind::Mhsa, l, 1.0, 1000), rec(MixerKind::Mamba, l, 1.0, 1000)])
            .collect();
        let r = build_report(&recs, 1).unwrap();
        assert!(r.deltas.iter().all(|d| d.time.abs() < 1e-12 && d.memory == 0.0));
        assert_eq!(r.deltas.len(), 3);
    }

    #[test]
    fn sixty_four_percent_less_memory() {
        let recs = [
            rec(MixerKind::Mhsa, 800, 1.0, 10_000),
            rec(MixerKind::SummaryMixing, 800, 1.0, 3_600),
        ];
        let r = build_report(&recs, 1).unwrap();
        assert!((r.delta(MixerKind::SummaryMixing, 800).unwrap().memory + 0.64).abs() < 1e-12);
    }

    #[test]
    fn missing_baseline_is_flagged() {
        let r = build_report(&[rec(MixerKind::Mamba, 100, 1.0, 10)], 1).unwrap();
        assert!(r.missing_baseline && r.deltas.is_empty());
        assert!(to_csv(&r).contains("# warning"));
    }

    #[test]
    fn intervals_bracket_means() {
        let recs: Vec<_> = (1..6)
            .map(|i| rec(MixerKind::Fastformer, 100 * i, 0.37 * i as f64, 5))
            .collect();
        for c in build_report(&recs, 2).unwrap().cells {
            assert!(c.time_lo <= c.mean_time && c.mean_time <= c.time_hi);
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let recs: Vec<_> = [1000, 2000, 4000]
            .iter()
            .flat_map(|&l| {
                [
                    rec(MixerKind::Mhsa, l, 0.1 + 1.0 / 3.0 * l as f64, l * l),
                    rec(MixerKind::Fastformer, l, std::f64::consts::PI * l as f64, 7 * l),
                ]
            })
            .collect();
        let r = build_report(&recs, 3).unwrap();
        let text = to_csv(&r);
        let p = parse_csv(&text).unwrap();
        assert_eq!(p.rows.len(), r.cells.len());
        for (row, c) in p.rows.iter().zip(&r.cells) {
            assert_eq!(row.kind, c.kind);
            assert_eq!(row.length_frames, c.length_frames);
            assert_eq!(row.mean_time.to_bits(), c.mean_time.to_bits());
            assert_eq!(row.time_lo.to_bits(), c.time_lo.to_bits());
            assert_eq!(row.time_hi.to_bits(), c.time_hi.to_bits());
            assert_eq!(row.peak_bytes, c.peak_bytes);
            assert_eq!(row.mac_count, c.mac_count);
        }
        for ((k, t, m, macs), f) in p.exponents.iter().zip(&r.fits) {
            assert_eq!(*k, f.kind);
            assert_eq!(t.map(f64::to_bits), f.time_exponent.map(f64::to_bits));
            assert_eq!(m.map(f64::to_bits), f.memory_exponent.map(f64::to_bits));
            assert_eq!(macs.map(f64::to_bits), f.mac_exponent.map(f64::to_bits));
        }
        for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
            assert_eq!(line.split(',').count(), 7);
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let text = to_csv(&ScalingReport::default());
        let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data, [CSV_HEADER]);
        assert!(parse_csv(&text).unwrap().rows.is_empty());
    }
}
