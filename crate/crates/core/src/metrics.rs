//! Single-trace statistics: loss ratio, latency summary, deadline miss
//! ratio, empirical CCDF, loss autocorrelation and burst census.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::trace::{ChannelId, ChannelTrace, Micros};

/// Deadlines used when none are given, in microseconds.
pub const DEFAULT_DEADLINES_US: [Micros; 4] = [1_000, 3_000, 10_000, 30_000];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("no packet was received")]
    NothingReceived,
    #[error("maximum lag {max_lag} must be smaller than the trace length {n}")]
    LagTooLarge { max_lag: usize, n: usize },
    #[error("invalid step function: {0}")]
    InvalidCcdf(&'static str),
}

/// Summary of received-packet latencies, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySummary {
    pub mean_us: f64,
    /// Unbiased sample deviation; zero with a single sample.
    pub std_us: f64,
    pub p9999_us: Micros,
    pub max_us: Micros,
}

/// Nearest-rank percentile `num/den` of ascending `sorted` (non-empty).
pub fn nearest_rank(sorted: &[Micros], num: u64, den: u64) -> Micros {
    let n = sorted.len() as u128;
    let rank = (num as u128 * n).div_ceil(den as u128).clamp(1, n);
    sorted[rank as usize - 1]
}

pub fn loss_ratio(trace: &ChannelTrace) -> Result<f64, MetricsError> {
    if trace.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    Ok(trace.n_lost() as f64 / trace.len() as f64)
}

pub fn latency_summary(trace: &ChannelTrace) -> Result<LatencySummary, MetricsError> {
    let mut lat: Vec<Micros> = trace.received_latencies().collect();
    if lat.is_empty() {
        return Err(MetricsError::NothingReceived);
    }
    lat.sort_unstable();
    // exact integer moments; only the final quotients round
    let n = lat.len() as i128;
    let sum: i128 = lat.iter().map(|&d| d as i128).sum();
    let sum_sq: i128 = lat.iter().map(|&d| (d as i128) * (d as i128)).sum();
    let mean = sum as f64 / n as f64;
    let std = if n > 1 {
        ((n * sum_sq - sum * sum) as f64 / (n * (n - 1)) as f64).sqrt()
    } else {
        0.0
    };
    Ok(LatencySummary {
        mean_us: mean,
        std_us: std,
        p9999_us: nearest_rank(&lat, 9999, 10_000),
        max_us: *lat.last().unwrap(),
    })
}

/// Fraction of packets lost or received with latency strictly above `h`.
pub fn deadline_miss_ratio(trace: &ChannelTrace, h: Micros) -> Result<f64, MetricsError> {
    if trace.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    let misses = trace.delays().filter(|d| d.exceeds(h)).count();
    Ok(misses as f64 / trace.len() as f64)
}

/// Same quantity through the conditional form `UL + (1 - UL) * N_R|d>h / N_R`.
pub fn deadline_miss_ratio_conditional(trace: &ChannelTrace, h: Micros) -> Result<f64, MetricsError> {
    let ul = loss_ratio(trace)?;
    let n_rx = trace.n_received();
    if n_rx == 0 {
        return Ok(ul);
    }
    let late = trace.received_latencies().filter(|&d| d > h).count();
    Ok(ul + (1.0 - ul) * late as f64 / n_rx as f64)
}

/// Right-continuous, non-increasing step function on integer microseconds.
///
/// `value(h)` is 1 below the first breakpoint and equals the value of the
/// last breakpoint not above `h` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Eccdf {
    points: Vec<(Micros, f64)>,
}

impl Eccdf {
    /// Fraction of `samples` strictly greater than `h`.
    pub fn from_samples(samples: impl IntoIterator<Item = Micros>) -> Result<Self, MetricsError> {
        let mut sorted: Vec<Micros> = samples.into_iter().collect();
        if sorted.is_empty() {
            return Err(MetricsError::NothingReceived);
        }
        sorted.sort_unstable();
        let n = sorted.len();
        let mut points = Vec::new();
        let mut i = 0;
        while i < n {
            let h = sorted[i];
            while i < n && sorted[i] == h {
                i += 1;
            }
            points.push((h, (n - i) as f64 / n as f64));
        }
        Ok(Eccdf { points })
    }

    pub fn from_points(points: Vec<(Micros, f64)>) -> Result<Self, MetricsError> {
        if points.is_empty() {
            return Err(MetricsError::InvalidCcdf("no breakpoints"));
        }
        let mut prev_h = None;
        let mut prev_v = 1.0;
        for &(h, v) in &points {
            if !(0.0..=1.0).contains(&v) {
                return Err(MetricsError::InvalidCcdf("value outside [0, 1]"));
            }
            if v > prev_v {
                return Err(MetricsError::InvalidCcdf("values increase"));
            }
            if prev_h.is_some_and(|p| h <= p) {
                return Err(MetricsError::InvalidCcdf("breakpoints not strictly increasing"));
            }
            prev_h = Some(h);
            prev_v = v;
        }
        Ok(Eccdf { points })
    }

    pub fn points(&self) -> &[(Micros, f64)] {
        &self.points
    }

    pub fn breakpoints(&self) -> impl Iterator<Item = Micros> + '_ {
        self.points.iter().map(|p| p.0)
    }

    pub fn min_breakpoint(&self) -> Micros {
        self.points[0].0
    }

    pub fn max_breakpoint(&self) -> Micros {
        self.points[self.points.len() - 1].0
    }

    pub fn value(&self, h: Micros) -> f64 {
        match self.points.partition_point(|p| p.0 <= h) {
            0 => 1.0,
            k => self.points[k - 1].1,
        }
    }

    /// Limit from the left at `h`.
    pub fn left_limit(&self, h: Micros) -> f64 {
        match self.points.partition_point(|p| p.0 < h) {
            0 => 1.0,
            k => self.points[k - 1].1,
        }
    }
}

pub fn eccdf(trace: &ChannelTrace) -> Result<Eccdf, MetricsError> {
    Eccdf::from_samples(trace.received_latencies())
}

/// Loss autocorrelation `R(k)` for `k = 0..=max_lag` with the common
/// `1 / (N - max_lag)` normalisation, and its ratio to the squared loss
/// ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct Autocorrelation {
    pub max_lag: usize,
    pub r: Vec<f64>,
    /// `None` when the trace has no losses.
    pub pi: Option<Vec<f64>>,
}

pub fn default_max_lag(n: usize) -> usize {
    (n / 10).min(1000)
}

pub fn autocorrelation(trace: &ChannelTrace, max_lag: usize) -> Result<Autocorrelation, MetricsError> {
    let n = trace.len();
    if n == 0 {
        return Err(MetricsError::EmptyTrace);
    }
    if max_lag >= n {
        return Err(MetricsError::LagTooLarge { max_lag, n });
    }
    let bits = LossBits::new(trace.loss_indicators(), n);
    let span = n - max_lag;
    let r: Vec<f64> =
        (0..=max_lag).map(|k| bits.coincidences(k, span) as f64 / span as f64).collect();
    let ul = trace.n_lost() as f64 / n as f64;
    let pi = (ul > 0.0).then(|| r.iter().map(|v| v / (ul * ul)).collect());
    Ok(Autocorrelation { max_lag, r, pi })
}

/// Loss indicators packed 64 per word.
struct LossBits {
    words: Vec<u64>,
}

impl LossBits {
    fn new(losses: impl Iterator<Item = bool>, n: usize) -> Self {
        let mut words = vec![0u64; n.div_ceil(64) + 1];
        for (i, lost) in losses.enumerate() {
            if lost {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        LossBits { words }
    }

    /// Number of `i < span` with both bit `i` and bit `i + k` set.
    fn coincidences(&self, k: usize, span: usize) -> u64 {
        let (q, r) = (k / 64, k % 64);
        let full = span / 64;
        let tail = span % 64;
        let shifted = |w: usize| -> u64 {
            let lo = self.words.get(w + q).copied().unwrap_or(0);
            if r == 0 {
                lo
            } else {
                let hi = self.words.get(w + q + 1).copied().unwrap_or(0);
                (lo >> r) | (hi << (64 - r))
            }
        };
        let mut count: u64 = (0..full).map(|w| (self.words[w] & shifted(w)).count_ones() as u64).sum();
        if tail > 0 {
            let mask = (1u64 << tail) - 1;
            count += (self.words[full] & shifted(full) & mask).count_ones() as u64;
        }
        count
    }
}

/// Histogram of maximal loss runs by length.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BurstCensus {
    pub counts: BTreeMap<usize, usize>,
    pub b_max: usize,
}

impl BurstCensus {
    pub fn count(&self, length: usize) -> usize {
        self.counts.get(&length).copied().unwrap_or(0)
    }

    /// Bursts of length `length` or more.
    pub fn count_at_least(&self, length: usize) -> usize {
        self.counts.range(length..).map(|(_, c)| c).sum()
    }

    pub fn lost_packets(&self) -> usize {
        self.counts.iter().map(|(b, c)| b * c).sum()
    }
}

pub fn burst_census(trace: &ChannelTrace) -> BurstCensus {
    let mut census = BurstCensus::default();
    let mut run = 0usize;
    for lost in trace.loss_indicators().chain(std::iter::once(false)) {
        if lost {
            run += 1;
        } else if run > 0 {
            *census.counts.entry(run).or_default() += 1;
            census.b_max = census.b_max.max(run);
            run = 0;
        }
    }
    census
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsOptions {
    pub deadlines_us: Vec<Micros>,
    /// `None` picks `min(1000, N / 10)`.
    pub max_lag: Option<usize>,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        MetricsOptions { deadlines_us: DEFAULT_DEADLINES_US.to_vec(), max_lag: None }
    }
}

/// All single-trace indices for one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub channel: ChannelId,
    pub n: usize,
    pub n_rx: usize,
    pub n_loss: usize,
    pub loss_ratio: f64,
    /// `None` when nothing was received.
    pub latency: Option<LatencySummary>,
    pub dmr: Vec<(Micros, f64)>,
    pub ccdf: Option<Eccdf>,
    pub autocorr: Autocorrelation,
    pub bursts: BurstCensus,
}

impl MetricsReport {
    pub fn compute(trace: &ChannelTrace, options: &MetricsOptions) -> Result<Self, MetricsError> {
        let loss_ratio = loss_ratio(trace)?;
        let dmr = options
            .deadlines_us
            .iter()
            .map(|&h| deadline_miss_ratio(trace, h).map(|v| (h, v)))
            .collect::<Result<_, _>>()?;
        let max_lag = options.max_lag.unwrap_or_else(|| default_max_lag(trace.len()));
        Ok(MetricsReport {
            channel: trace.channel(),
            n: trace.len(),
            n_rx: trace.n_received(),
            n_loss: trace.n_lost(),
            loss_ratio,
            latency: latency_summary(trace).ok(),
            dmr,
            ccdf: eccdf(trace).ok(),
            autocorr: autocorrelation(trace, max_lag)?,
            bursts: burst_census(trace),
        })
    }

    pub fn dmr_at(&self, h: Micros) -> Option<f64> {
        self.dmr.iter().find(|(x, _)| *x == h).map(|(_, v)| *v)
    }
}
