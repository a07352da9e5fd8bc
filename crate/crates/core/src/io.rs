//! On-disk formats.
//!
//! Trace files are line oriented, `\n` terminated, with integer microsecond
//! fields:
//!
//! ```text
//! # period_us=10000
//! # seed=42
//! # trial_end_us=15000090
//! # skew_bound_us=90
//! seq,tT_A_us,tR_A_us,tT_B_us,tR_B_us
//! 1,90,990,100,1200
//! 2,10090,,10050,11000
//! ```
//!
//! An empty receive field marks a lost copy. Comment lines may only appear
//! before the header; unknown `key=value` comments are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::independence::IndependenceReport;
use crate::metrics::{Autocorrelation, BurstCensus, Eccdf, LatencySummary, MetricsReport};
use crate::trace::{
    ChannelId, ChannelTrace, Micros, PacketRecord, TraceError, Trial, DEFAULT_GRACE_US,
    DEFAULT_SKEW_BOUND_US,
};

pub const TRACE_HEADER: &str = "seq,tT_A_us,tR_A_us,tT_B_us,tR_B_us";

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid trial: {0}")]
    Invalid(#[from] TraceError),
    #[error("nothing to export: the CCDF is empty")]
    EmptyCcdf,
}

fn parse_err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse { line, msg: msg.into() }
}

fn opt(v: Option<Micros>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_trial<W: Write>(trial: &Trial, mut out: W) -> Result<(), IoError> {
    let mut w = io::BufWriter::new(&mut out);
    writeln!(w, "# period_us={}", trial.period_us())?;
    if let Some(seed) = trial.seed() {
        writeln!(w, "# seed={seed}")?;
    }
    writeln!(w, "# trial_end_us={}", trial.trial_end())?;
    writeln!(w, "# skew_bound_us={}", trial.skew_bound_us())?;
    writeln!(w, "{TRACE_HEADER}")?;
    for (a, b) in trial.trace_a().records().iter().zip(trial.trace_b().records()) {
        writeln!(w, "{},{},{},{},{}", a.seq, a.t_tx, opt(a.t_rx), b.t_tx, opt(b.t_rx))?;
    }
    w.flush()?;
    Ok(())
}

pub fn trial_to_string(trial: &Trial) -> String {
    let mut buf = Vec::new();
    write_trial(trial, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("trace output is ASCII")
}

/// A parsed trial plus the metadata defaults that had to be filled in.
#[derive(Debug)]
pub struct ReadTrial {
    pub trial: Trial,
    pub warnings: Vec<String>,
}

/// Reads a trace file, logging a warning for each defaulted metadata field.
pub fn read_trial<R: BufRead>(source: R) -> Result<Trial, IoError> {
    let parsed = read_trial_with_warnings(source)?;
    for w in &parsed.warnings {
        log::warn!("{w}");
    }
    Ok(parsed.trial)
}

pub fn read_trial_with_warnings<R: BufRead>(source: R) -> Result<ReadTrial, IoError> {
    let mut meta: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut header_seen = false;
    let mut rec_a = Vec::new();
    let mut rec_b = Vec::new();

    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if !header_seen {
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((k, v)) = comment.trim().split_once('=') {
                    meta.insert(k.trim().to_string(), (line_no, v.trim().to_string()));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if line.trim_end() != TRACE_HEADER {
                return Err(parse_err(line_no, format!("expected header `{TRACE_HEADER}`")));
            }
            header_seen = true;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(parse_err(line_no, format!("expected 5 fields, found {}", fields.len())));
        }
        let num = |i: usize, name: &str| -> Result<Micros, IoError> {
            fields[i].parse().map_err(|_| parse_err(line_no, format!("bad {name} `{}`", fields[i])))
        };
        let opt_num = |i: usize, name: &str| -> Result<Option<Micros>, IoError> {
            if fields[i].is_empty() {
                Ok(None)
            } else {
                num(i, name).map(Some)
            }
        };
        let seq: u64 =
            fields[0].parse().map_err(|_| parse_err(line_no, format!("bad seq `{}`", fields[0])))?;
        rec_a.push(PacketRecord { seq, t_tx: num(1, "tT_A_us")?, t_rx: opt_num(2, "tR_A_us")? });
        rec_b.push(PacketRecord { seq, t_tx: num(3, "tT_B_us")?, t_rx: opt_num(4, "tR_B_us")? });
    }
    if !header_seen {
        return Err(parse_err(0, "missing header line"));
    }

    let mut warnings = Vec::new();
    let number = |key: &str| -> Result<Option<i128>, IoError> {
        match meta.get(key) {
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| parse_err(*line, format!("bad {key} `{v}`"))),
            None => Ok(None),
        }
    };
    let period = number("period_us")?;
    let seed = number("seed")?;
    let trial_end = number("trial_end_us")?;
    let skew_bound = number("skew_bound_us")?;

    let period_us = match period {
        Some(p) => p as Micros,
        None => {
            let p = match (rec_a.first(), rec_a.get(1)) {
                (Some(a), Some(b)) => b.t_tx - a.t_tx,
                _ => 0,
            };
            warnings.push(format!("period_us missing; inferred {p} us from the first two packets"));
            p
        }
    };
    let trial_end = match trial_end {
        Some(t) => t as Micros,
        None => {
            let last = rec_a.iter().chain(&rec_b).map(|r| r.t_tx).max().unwrap_or(0);
            let t = last + DEFAULT_GRACE_US;
            warnings.push(format!("trial_end_us missing; using last transmission + 5 s = {t}"));
            t
        }
    };
    let skew_bound = match skew_bound {
        Some(s) => s as Micros,
        None => {
            warnings.push(format!("skew_bound_us missing; using {DEFAULT_SKEW_BOUND_US}"));
            DEFAULT_SKEW_BOUND_US
        }
    };
    let seed = seed.map(|s| s as u64);

    let trace_a = ChannelTrace::new(ChannelId::A, rec_a, trial_end)?;
    let trace_b = ChannelTrace::new(ChannelId::B, rec_b, trial_end)?;
    let trial = Trial::new(period_us, skew_bound, trace_a, trace_b)?.with_seed(seed);
    Ok(ReadTrial { trial, warnings })
}

/// Formats integer microseconds as milliseconds with three decimals.
pub fn format_ms(us: Micros) -> String {
    let sign = if us < 0 { "-" } else { "" };
    let abs = us.unsigned_abs();
    format!("{sign}{}.{:03}", abs / 1000, abs % 1000)
}

/// Parses a millisecond decimal with at most three fractional digits.
pub fn parse_ms(text: &str) -> Option<Micros> {
    let (neg, body) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, "0"));
    if frac.len() > 3 {
        return None;
    }
    let frac: Micros = format!("{frac:0<3}").parse().ok()?;
    let v = int.parse::<Micros>().ok()? * 1000 + frac;
    Some(if neg { -v } else { v })
}

/// Writes `h_ms value` rows tracing the exact step function: an anchor at
/// `h = 0`, the value before and after every jump, and an anchor at the
/// last breakpoint.
pub fn export_ccdf<W: Write>(ccdf: &Eccdf, mut out: W) -> Result<(), IoError> {
    let points = ccdf.points();
    if points.is_empty() {
        return Err(IoError::EmptyCcdf);
    }
    let mut w = io::BufWriter::new(&mut out);
    let start = ccdf.min_breakpoint().min(0);
    writeln!(w, "{} 1", format_ms(start))?;
    let mut before = 1.0;
    for &(h, v) in points {
        writeln!(w, "{} {}", format_ms(h), before)?;
        writeln!(w, "{} {}", format_ms(h), v)?;
        before = v;
    }
    writeln!(w, "{} {}", format_ms(ccdf.max_breakpoint()), before)?;
    w.flush()?;
    Ok(())
}

/// Reads back a file written by [`export_ccdf`].
pub fn read_ccdf<R: BufRead>(source: R) -> Result<Eccdf, IoError> {
    let mut rows = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (h, v) = line.split_once(' ').ok_or_else(|| parse_err(idx + 1, "expected `h_ms value`"))?;
        let h = parse_ms(h).ok_or_else(|| parse_err(idx + 1, format!("bad h_ms `{h}`")))?;
        let v: f64 = v.parse().map_err(|_| parse_err(idx + 1, format!("bad value `{v}`")))?;
        rows.push((h, v));
    }
    if rows.len() < 4 || rows.len() % 2 != 0 {
        return Err(parse_err(rows.len(), "truncated CCDF export"));
    }
    let points = rows[1..rows.len() - 1].chunks(2).map(|pair| pair[1]).collect();
    Eccdf::from_points(points).map_err(|e| parse_err(0, e.to_string()))
}

fn join<T>(items: impl IntoIterator<Item = T>, f: impl Fn(T) -> String) -> String {
    items.into_iter().map(f).collect::<Vec<_>>().join(",")
}

/// Flat `key=value` block holding every field of the report.
pub fn metrics_to_kv(report: &MetricsReport) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k}={v}");
    };
    kv("channel", report.channel.label().to_string());
    kv("n", report.n.to_string());
    kv("n_rx", report.n_rx.to_string());
    kv("n_loss", report.n_loss.to_string());
    kv("loss_ratio", report.loss_ratio.to_string());
    match &report.latency {
        Some(l) => {
            kv("mean_us", l.mean_us.to_string());
            kv("std_us", l.std_us.to_string());
            kv("p9999_us", l.p9999_us.to_string());
            kv("max_us", l.max_us.to_string());
        }
        None => kv("latency", "none".into()),
    }
    kv("dmr", join(&report.dmr, |(h, v)| format!("{h}:{v}")));
    kv("autocorr_max_lag", report.autocorr.max_lag.to_string());
    kv("autocorr_r", join(&report.autocorr.r, |v| v.to_string()));
    kv(
        "autocorr_pi",
        report.autocorr.pi.as_ref().map_or("undefined".into(), |p| join(p, |v| v.to_string())),
    );
    kv("bursts", join(&report.bursts.counts, |(b, c)| format!("{b}:{c}")));
    kv("b_max", report.bursts.b_max.to_string());
    kv(
        "ccdf",
        report.ccdf.as_ref().map_or("none".into(), |c| join(c.points(), |(h, v)| format!("{h}:{v}"))),
    );
    s
}

pub fn metrics_from_kv(text: &str) -> Result<MetricsReport, IoError> {
    let mut map = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| parse_err(idx + 1, "expected key=value"))?;
        map.insert(k, v);
    }
    let get = |k: &str| map.get(k).copied().ok_or_else(|| parse_err(0, format!("missing key `{k}`")));
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, IoError> {
        v.parse().map_err(|_| parse_err(0, format!("bad value for `{k}`: `{v}`")))
    }
    fn list<T: std::str::FromStr>(k: &str, v: &str) -> Result<Vec<T>, IoError> {
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|x| num(k, x)).collect()
    }
    fn pairs<A: std::str::FromStr, B: std::str::FromStr>(k: &str, v: &str) -> Result<Vec<(A, B)>, IoError> {
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|item| {
                let (a, b) = item.split_once(':').ok_or_else(|| parse_err(0, format!("bad pair in `{k}`")))?;
                Ok((num(k, a)?, num(k, b)?))
            })
            .collect()
    }

    let channel = match get("channel")? {
        "A" => ChannelId::A,
        "B" => ChannelId::B,
        "AB" => ChannelId::Redundant,
        other => return Err(parse_err(0, format!("unknown channel `{other}`"))),
    };
    let latency = if map.get("latency") == Some(&"none") {
        None
    } else {
        Some(LatencySummary {
            mean_us: num("mean_us", get("mean_us")?)?,
            std_us: num("std_us", get("std_us")?)?,
            p9999_us: num("p9999_us", get("p9999_us")?)?,
            max_us: num("max_us", get("max_us")?)?,
        })
    };
    let pi = match get("autocorr_pi")? {
        "undefined" => None,
        v => Some(list("autocorr_pi", v)?),
    };
    let ccdf = match get("ccdf")? {
        "none" => None,
        v => Some(Eccdf::from_points(pairs("ccdf", v)?).map_err(|e| parse_err(0, e.to_string()))?),
    };
    Ok(MetricsReport {
        channel,
        n: num("n", get("n")?)?,
        n_rx: num("n_rx", get("n_rx")?)?,
        n_loss: num("n_loss", get("n_loss")?)?,
        loss_ratio: num("loss_ratio", get("loss_ratio")?)?,
        latency,
        dmr: pairs("dmr", get("dmr")?)?,
        ccdf,
        autocorr: Autocorrelation {
            max_lag: num("autocorr_max_lag", get("autocorr_max_lag")?)?,
            r: list("autocorr_r", get("autocorr_r")?)?,
            pi,
        },
        bursts: BurstCensus {
            counts: pairs("bursts", get("bursts")?)?.into_iter().collect(),
            b_max: num("b_max", get("b_max")?)?,
        },
    })
}

/// Column names of the machine-readable link table, in the published
/// column order: latency summary, deadline miss ratio with its estimate per
/// deadline, KS distance, loss ratio and its estimate.
pub fn table_header(deadlines_us: &[Micros]) -> String {
    let mut cols = vec!["channel", "mean_ms", "std_ms", "p9999_ms", "max_ms"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    for &h in deadlines_us {
        cols.push(format!("dmr_gt_{}ms", format_ms(h).trim_end_matches('0').trim_end_matches('.')));
        cols.push(format!("est_dmr_gt_{}ms", format_ms(h).trim_end_matches('0').trim_end_matches('.')));
    }
    cols.extend(["d_ks", "loss_ratio", "est_loss_ratio"].map(String::from));
    cols.join(",")
}

fn us_to_ms(v: f64) -> f64 {
    v / 1000.0
}

/// One CSV row per report. Estimate columns are filled from `indep` on the
/// redundant row only; empty fields mean "not applicable".
pub fn table_row(report: &MetricsReport, indep: Option<&IndependenceReport>) -> String {
    let mut cols = vec![report.channel.label().to_string()];
    match &report.latency {
        Some(l) => {
            cols.push(us_to_ms(l.mean_us).to_string());
            cols.push(us_to_ms(l.std_us).to_string());
            cols.push(us_to_ms(l.p9999_us as f64).to_string());
            cols.push(us_to_ms(l.max_us as f64).to_string());
        }
        None => cols.extend(std::iter::repeat_n(String::new(), 4)),
    }
    let indep = indep.filter(|_| report.channel == ChannelId::Redundant);
    for &(h, v) in &report.dmr {
        cols.push(v.to_string());
        let est = indep.and_then(|r| r.dmr.iter().find(|d| d.0 == h)).map(|d| d.1);
        cols.push(est.map(|e| e.to_string()).unwrap_or_default());
    }
    cols.push(indep.and_then(|r| r.d_ks).map(|d| d.to_string()).unwrap_or_default());
    cols.push(report.loss_ratio.to_string());
    cols.push(indep.map(|r| r.est_loss.to_string()).unwrap_or_default());
    cols.join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_trial() -> Trial {
        let a = ChannelTrace::new(ChannelId::A, vec![PacketRecord::delivered(7, 1000, 1850)], 6_000_000).unwrap();
        let b = ChannelTrace::new(ChannelId::B, vec![PacketRecord::lost(7, 1050)], 6_000_000).unwrap();
        Trial::new(10_000, 90, a, b).unwrap().with_seed(Some(3))
    }

    #[test]
    fn writes_expected_bytes() {
        let text = trial_to_string(&small_trial());
        assert_eq!(
            text,
            "# period_us=10000\n# seed=3\n# trial_end_us=6000000\n# skew_bound_us=90\n\
             seq,tT_A_us,tR_A_us,tT_B_us,tR_B_us\n7,1000,1850,1050,\n"
        );
        let back = read_trial(text.as_bytes()).unwrap();
        assert_eq!(back, small_trial());
    }

    #[test]
    fn both_delivered_row_has_five_fields() {
        let a = ChannelTrace::new(ChannelId::A, vec![PacketRecord::delivered(1, 0, 900)], 10_000).unwrap();
        let b = ChannelTrace::new(ChannelId::B, vec![PacketRecord::delivered(1, 5, 800)], 10_000).unwrap();
        let text = trial_to_string(&Trial::new(10_000, 90, a, b).unwrap());
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
        assert_eq!(rows, vec!["1,0,900,5,800"]);
    }

    #[test]
    fn reports_bad_rows_with_line_number() {
        let text = "# period_us=10\nseq,tT_A_us,tR_A_us,tT_B_us,tR_B_us\n1,0,5,0,5\n2,10,15\n";
        match read_trial(text.as_bytes()) {
            Err(IoError::Parse { line: 4, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let text = "seq,tT_A_us,tR_A_us,tT_B_us,tR_B_us\n1,0,x,0,5\n";
        assert!(matches!(read_trial(text.as_bytes()), Err(IoError::Parse { line: 2, .. })));
        assert!(matches!(read_trial("1,2,3,4,5\n".as_bytes()), Err(IoError::Parse { line: 1, .. })));
    }

    #[test]
    fn rejects_receive_before_send() {
        let text = "seq,tT_A_us,tR_A_us,tT_B_us,tR_B_us\n1,100,50,100,\n";
        assert!(matches!(
            read_trial(text.as_bytes()),
            Err(IoError::Invalid(TraceError::RxBeforeTx { .. }))
        ));
    }

    #[test]
    fn missing_metadata_is_defaulted() {
        let text = "seq,tT_A_us,tR_A_us,tT_B_us,tR_B_us\n1,0,5,0,\n2,10000,10005,10010,10020\n";
        let parsed = read_trial_with_warnings(text.as_bytes()).unwrap();
        assert_eq!(parsed.warnings.len(), 3);
        assert_eq!(parsed.trial.period_us(), 10_000);
        assert_eq!(parsed.trial.trial_end(), 10_010 + 5_000_000);
        assert_eq!(parsed.trial.skew_bound_us(), 90);
        assert_eq!(parsed.trial.seed(), None);
    }

    #[test]
    fn ccdf_export_layout() {
        let f = Eccdf::from_samples([1000, 2000, 3000]).unwrap();
        let mut buf = Vec::new();
        export_ccdf(&f, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0], "0.000 1");
        assert_eq!(rows[1], "1.000 1");
        assert_eq!(rows[2], format!("1.000 {}", 2.0 / 3.0));
        assert_eq!(rows[6], "3.000 0");
        assert_eq!(rows[7], "3.000 0");
        assert_eq!(read_ccdf(text.as_bytes()).unwrap(), f);
    }

    #[test]
    fn ms_formatting() {
        assert_eq!(format_ms(850), "0.850");
        assert_eq!(format_ms(12_345_678), "12345.678");
        assert_eq!(format_ms(-5), "-0.005");
        for v in [0, 1, 999, 1000, 123_456, -42] {
            assert_eq!(parse_ms(&format_ms(v)), Some(v));
        }
        assert_eq!(parse_ms("1.5"), Some(1500));
    }

    #[test]
    fn header_follows_column_order() {
        assert_eq!(
            table_header(&[1000, 3000]),
            "channel,mean_ms,std_ms,p9999_ms,max_ms,dmr_gt_1ms,est_dmr_gt_1ms,dmr_gt_3ms,est_dmr_gt_3ms,d_ks,loss_ratio,est_loss_ratio"
        );
        assert_eq!(table_header(&[500]).split(',').nth(5), Some("dmr_gt_0.5ms"));
    }
}
