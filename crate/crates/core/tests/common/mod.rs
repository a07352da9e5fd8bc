//! Random trial generators and brute-force reference implementations shared
//! by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seamless_core::trace::{ChannelId, ChannelTrace, Micros, PacketRecord, Trial};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shape of a randomly drawn trial.
#[derive(Debug, Clone, Copy)]
pub struct TrialShape {
    pub n: usize,
    pub period_us: Micros,
    pub skew_bound_us: Micros,
    pub loss_a: f64,
    pub loss_b: f64,
    /// Latencies are drawn from `0..=max_latency_us`.
    pub max_latency_us: Micros,
    pub grace_us: Micros,
}

impl TrialShape {
    pub fn random<R: Rng>(rng: &mut R, max_n: usize) -> Self {
        let period_us = [1, 10, 1_000, 10_000, 100_000][rng.random_range(0..5)];
        // large reordering: latencies span up to many periods
        let max_latency_us = period_us * rng.random_range(0..50) + rng.random_range(0..200);
        TrialShape {
            n: rng.random_range(1..=max_n),
            period_us,
            skew_bound_us: rng.random_range(0..=90),
            loss_a: [0.0, 0.1, 0.5, 1.0][rng.random_range(0..4)],
            loss_b: [0.0, 0.1, 0.5, 1.0][rng.random_range(0..4)],
            max_latency_us,
            grace_us: rng.random_range(0..=max_latency_us),
        }
    }
}

/// Draws a trial. Some latencies land exactly at or just past `trial_end`,
/// and small latency ranges produce many ties.
pub fn random_trial<R: Rng>(rng: &mut R, shape: TrialShape) -> Trial {
    let t0 = shape.skew_bound_us;
    let mut seq = 0u64;
    let mut tx_a = Vec::with_capacity(shape.n);
    let mut tx_b = Vec::with_capacity(shape.n);
    let mut seqs = Vec::with_capacity(shape.n);
    for i in 0..shape.n {
        seq += rng.random_range(1..=3);
        seqs.push(seq);
        let t = t0 + i as Micros * shape.period_us;
        tx_a.push(t);
        tx_b.push(t + rng.random_range(-shape.skew_bound_us..=shape.skew_bound_us));
    }
    let trial_end = tx_a.iter().chain(&tx_b).max().unwrap() + shape.grace_us;
    let draw = |t_tx: Micros, loss: f64, rng: &mut R| -> Option<Micros> {
        if rng.random_bool(loss) {
            return None;
        }
        match rng.random_range(0..10) {
            0 => Some(trial_end.max(t_tx)),
            1 => Some(trial_end + 1),
            _ => Some(t_tx + rng.random_range(0..=shape.max_latency_us)),
        }
    };
    let recs_a: Vec<PacketRecord> = (0..shape.n)
        .map(|i| PacketRecord { seq: seqs[i], t_tx: tx_a[i], t_rx: draw(tx_a[i], shape.loss_a, rng) })
        .collect();
    let recs_b: Vec<PacketRecord> = (0..shape.n)
        .map(|i| PacketRecord { seq: seqs[i], t_tx: tx_b[i], t_rx: draw(tx_b[i], shape.loss_b, rng) })
        .collect();
    let a = ChannelTrace::new(ChannelId::A, recs_a, trial_end).unwrap();
    let b = ChannelTrace::new(ChannelId::B, recs_b, trial_end).unwrap();
    Trial::new(shape.period_us, shape.skew_bound_us, a, b).unwrap()
}

/// A single-channel trace from per-packet latencies (`None` = lost).
pub fn trace_from_latencies(channel: ChannelId, latencies: &[Option<Micros>]) -> ChannelTrace {
    let records = latencies
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let t_tx = i as Micros * 1_000;
            PacketRecord { seq: i as u64 + 1, t_tx, t_rx: d.map(|d| t_tx + d) }
        })
        .collect();
    ChannelTrace::new(channel, records, i64::MAX / 2).unwrap()
}

/// Reference computations written straight from the definitions.
pub mod oracle {
    use super::Micros;

    pub fn loss_ratio(lat: &[Option<Micros>]) -> f64 {
        lat.iter().filter(|d| d.is_none()).count() as f64 / lat.len() as f64
    }

    pub fn mean(lat: &[Option<Micros>]) -> Option<f64> {
        let rx: Vec<i128> = lat.iter().flatten().map(|&d| d as i128).collect();
        (!rx.is_empty()).then(|| rx.iter().sum::<i128>() as f64 / rx.len() as f64)
    }

    /// Two-pass deviation in exact rational arithmetic:
    /// `sum (n d - S)^2 / (n^2 (n - 1))`.
    pub fn std(lat: &[Option<Micros>]) -> Option<f64> {
        let rx: Vec<i128> = lat.iter().flatten().map(|&d| d as i128).collect();
        let n = rx.len() as i128;
        match n {
            0 => None,
            1 => Some(0.0),
            _ => {
                let s: i128 = rx.iter().sum();
                let ss: i128 = rx.iter().map(|&d| (n * d - s) * (n * d - s)).sum();
                // reduce by n so the quotient matches num/(n (n-1)) exactly
                assert_eq!(ss % n, 0);
                Some(((ss / n) as f64 / (n * (n - 1)) as f64).sqrt())
            }
        }
    }

    /// Smallest received latency `x` with at least 99.99 % of the received
    /// latencies at or below it.
    pub fn p9999(lat: &[Option<Micros>]) -> Option<Micros> {
        let rx: Vec<Micros> = lat.iter().flatten().copied().collect();
        let n = rx.len();
        let mut cands = rx.clone();
        cands.sort_unstable();
        cands.into_iter().find(|&x| rx.iter().filter(|&&d| d <= x).count() * 10_000 >= 9_999 * n)
    }

    pub fn max(lat: &[Option<Micros>]) -> Option<Micros> {
        lat.iter().flatten().copied().max()
    }

    pub fn dmr(lat: &[Option<Micros>], h: Micros) -> f64 {
        lat.iter().filter(|d| d.is_none_or(|d| d > h)).count() as f64 / lat.len() as f64
    }

    /// Fraction of received latencies strictly above `h`.
    pub fn ccdf(lat: &[Option<Micros>], h: Micros) -> Option<f64> {
        let rx: Vec<Micros> = lat.iter().flatten().copied().collect();
        (!rx.is_empty()).then(|| rx.iter().filter(|&&d| d > h).count() as f64 / rx.len() as f64)
    }

    pub fn autocorr(lat: &[Option<Micros>], max_lag: usize) -> Vec<f64> {
        let n = lat.len();
        let l = |i: usize| lat[i].is_none() as u32;
        (0..=max_lag)
            .map(|k| {
                let mut sum = 0u32;
                for i in 0..n - max_lag {
                    sum += l(i) * l(i + k);
                }
                sum as f64 / (n - max_lag) as f64
            })
            .collect()
    }

    /// Counts of maximal loss runs by length, checking every `(s, e)` pair.
    pub fn bursts(lat: &[Option<Micros>]) -> Vec<(usize, usize)> {
        let n = lat.len();
        let lost = |i: usize| lat[i].is_none();
        let mut counts = std::collections::BTreeMap::<usize, usize>::new();
        for s in 0..n {
            for e in s..n {
                let left = s == 0 || !lost(s - 1);
                let right = e == n - 1 || !lost(e + 1);
                if left && right && (s..=e).all(lost) {
                    *counts.entry(e - s + 1).or_default() += 1;
                }
            }
        }
        counts.into_iter().collect()
    }
}

/// Compares every metric of the library against the oracle on one trace,
/// with all lags up to `N - 1`. Returns a description of the first mismatch.
pub fn compare_with_oracle(lat: &[Option<Micros>]) -> Result<(), String> {
    use seamless_core::metrics::{self, MetricsOptions, MetricsReport};

    let trace = trace_from_latencies(ChannelId::A, lat);
    let n = lat.len();
    // deadlines at, between and around every latency
    let mut deadlines: Vec<Micros> = vec![-1, 0];
    for d in lat.iter().flatten() {
        deadlines.extend([d - 1, *d, d + 1]);
    }
    deadlines.sort_unstable();
    deadlines.dedup();
    let opts = MetricsOptions { deadlines_us: deadlines.clone(), max_lag: Some(n - 1) };
    let r = MetricsReport::compute(&trace, &opts).map_err(|e| e.to_string())?;
    let fail = |what: &str, got: String, want: String| Err(format!("{what}: got {got}, want {want} for {lat:?}"));

    if r.loss_ratio != oracle::loss_ratio(lat) {
        return fail("loss ratio", r.loss_ratio.to_string(), oracle::loss_ratio(lat).to_string());
    }
    let summary = r.latency.map(|s| (s.mean_us, s.std_us, s.p9999_us, s.max_us));
    let want = oracle::mean(lat).map(|m| (m, oracle::std(lat).unwrap(), oracle::p9999(lat).unwrap(), oracle::max(lat).unwrap()));
    if summary != want {
        return fail("latency summary", format!("{summary:?}"), format!("{want:?}"));
    }
    for &(h, v) in &r.dmr {
        if v != oracle::dmr(lat, h) {
            return fail(&format!("dmr at {h}"), v.to_string(), oracle::dmr(lat, h).to_string());
        }
        let cond = metrics::deadline_miss_ratio_conditional(&trace, h).unwrap();
        if (cond - v).abs() > 1e-12 {
            return fail(&format!("conditional dmr at {h}"), cond.to_string(), v.to_string());
        }
    }
    for &h in &deadlines {
        let got = r.ccdf.as_ref().map(|c| c.value(h));
        if got != oracle::ccdf(lat, h) {
            return fail(&format!("ccdf at {h}"), format!("{got:?}"), format!("{:?}", oracle::ccdf(lat, h)));
        }
    }
    let want_r = oracle::autocorr(lat, n - 1);
    if r.autocorr.r != want_r {
        return fail("autocorrelation", format!("{:?}", r.autocorr.r), format!("{want_r:?}"));
    }
    let ul = oracle::loss_ratio(lat);
    let want_pi = (ul > 0.0).then(|| want_r.iter().map(|v| v / (ul * ul)).collect::<Vec<_>>());
    if r.autocorr.pi != want_pi {
        return fail("pi", format!("{:?}", r.autocorr.pi), format!("{want_pi:?}"));
    }
    let got_b: Vec<(usize, usize)> = r.bursts.counts.iter().map(|(&k, &v)| (k, v)).collect();
    let want_b = oracle::bursts(lat);
    if got_b != want_b || r.bursts.b_max != want_b.last().map_or(0, |b| b.0) {
        return fail("bursts", format!("{:?}", r.bursts), format!("{want_b:?}"));
    }
    Ok(())
}
