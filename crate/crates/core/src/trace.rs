//! Per-packet trace model for a dual-channel trial and the offline
//! derivation of the redundant link.
//!
//! Times are integer microseconds from the trial epoch. A record without a
//! receive time is a lost copy; any reception later than the trace's
//! `trial_end` is folded into a loss when the trace is built.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

/// Microseconds from the trial epoch.
pub type Micros = i64;

/// Default time reception stays enabled after the last transmission.
pub const DEFAULT_GRACE_US: Micros = 5_000_000;

/// Default bound on the transmit skew between the two copies of a packet.
pub const DEFAULT_SKEW_BOUND_US: Micros = 90;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("packet index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("sequence numbers not strictly increasing at position {position} ({prev} then {next})")]
    NonMonotonicSeq { position: usize, prev: u64, next: u64 },
    #[error("packet {seq}: receive time {t_rx} precedes transmit time {t_tx}")]
    RxBeforeTx { seq: u64, t_tx: Micros, t_rx: Micros },
    #[error("channel traces have different lengths ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("misaligned sequence numbers at position {position} ({a} vs {b})")]
    Misaligned { position: usize, a: u64, b: u64 },
    #[error("packet {seq}: transmit skew {skew} us exceeds bound {bound} us")]
    SkewExceeded { seq: u64, skew: Micros, bound: Micros },
    #[error("expected a trace for channel {expected}, got {actual}")]
    WrongChannel { expected: ChannelId, actual: ChannelId },
    #[error("trial length {declared} does not match trace length {actual}")]
    PacketCount { declared: usize, actual: usize },
}

/// Channel label. `Redundant` only ever comes out of a merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChannelId {
    A,
    B,
    Redundant,
}

impl ChannelId {
    pub fn label(self) -> &'static str {
        match self {
            ChannelId::A => "A",
            ChannelId::B => "B",
            ChannelId::Redundant => "AB",
        }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Latency with lost packets mapped to an infinite sentinel that orders
/// above every finite value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Delay {
    Finite(Micros),
    Infinite,
}

impl Delay {
    pub fn from_latency(latency: Option<Micros>) -> Self {
        latency.map_or(Delay::Infinite, Delay::Finite)
    }

    pub fn finite(self) -> Option<Micros> {
        match self {
            Delay::Finite(d) => Some(d),
            Delay::Infinite => None,
        }
    }

    /// True when the packet missed deadline `h` (strictly later, or lost).
    pub fn exceeds(self, h: Micros) -> bool {
        match self {
            Delay::Finite(d) => d > h,
            Delay::Infinite => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PacketRecord {
    pub seq: u64,
    pub t_tx: Micros,
    pub t_rx: Option<Micros>,
}

impl PacketRecord {
    pub fn delivered(seq: u64, t_tx: Micros, t_rx: Micros) -> Self {
        PacketRecord { seq, t_tx, t_rx: Some(t_rx) }
    }

    pub fn lost(seq: u64, t_tx: Micros) -> Self {
        PacketRecord { seq, t_tx, t_rx: None }
    }

    pub fn is_lost(&self) -> bool {
        self.t_rx.is_none()
    }

    pub fn latency(&self) -> Option<Micros> {
        self.t_rx.map(|rx| rx - self.t_tx)
    }

    pub fn delay(&self) -> Delay {
        Delay::from_latency(self.latency())
    }
}

/// The packets of one channel over a whole trial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelTrace {
    channel: ChannelId,
    records: Vec<PacketRecord>,
    trial_end: Micros,
}

impl ChannelTrace {
    /// Validates the records and classifies receptions after `trial_end`
    /// as losses.
    pub fn new(
        channel: ChannelId,
        mut records: Vec<PacketRecord>,
        trial_end: Micros,
    ) -> Result<Self, TraceError> {
        for (pos, pair) in records.windows(2).enumerate() {
            if pair[1].seq <= pair[0].seq {
                return Err(TraceError::NonMonotonicSeq {
                    position: pos + 2,
                    prev: pair[0].seq,
                    next: pair[1].seq,
                });
            }
        }
        for rec in &mut records {
            if let Some(rx) = rec.t_rx {
                if rx < rec.t_tx {
                    return Err(TraceError::RxBeforeTx { seq: rec.seq, t_tx: rec.t_tx, t_rx: rx });
                }
                if rx > trial_end {
                    rec.t_rx = None;
                }
            }
        }
        Ok(ChannelTrace { channel, records, trial_end })
    }

    pub fn channel(&self) -> ChannelId {
        self.channel
    }

    pub fn records(&self) -> &[PacketRecord] {
        &self.records
    }

    pub fn trial_end(&self) -> Micros {
        self.trial_end
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn record(&self, index: usize) -> Result<&PacketRecord, TraceError> {
        if index == 0 || index > self.records.len() {
            return Err(TraceError::IndexOutOfRange { index, len: self.records.len() });
        }
        Ok(&self.records[index - 1])
    }

    /// Loss indicator of the packet at 1-based position `index`.
    pub fn loss_indicator(&self, index: usize) -> Result<u8, TraceError> {
        self.record(index).map(|r| u8::from(r.is_lost()))
    }

    /// Latency of the packet at 1-based position `index`, `None` when lost.
    pub fn latency(&self, index: usize) -> Result<Option<Micros>, TraceError> {
        self.record(index).map(PacketRecord::latency)
    }

    pub fn loss_indicators(&self) -> impl Iterator<Item = bool> + '_ {
        self.records.iter().map(PacketRecord::is_lost)
    }

    pub fn delays(&self) -> impl Iterator<Item = Delay> + '_ {
        self.records.iter().map(PacketRecord::delay)
    }

    /// Latencies of the received packets, in packet order.
    pub fn received_latencies(&self) -> impl Iterator<Item = Micros> + '_ {
        self.records.iter().filter_map(PacketRecord::latency)
    }

    pub fn n_lost(&self) -> usize {
        self.records.iter().filter(|r| r.is_lost()).count()
    }

    pub fn n_received(&self) -> usize {
        self.len() - self.n_lost()
    }
}

/// Two aligned channel traces of one periodic stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    period_us: Micros,
    skew_bound_us: Micros,
    seed: Option<u64>,
    trace_a: ChannelTrace,
    trace_b: ChannelTrace,
}

impl Trial {
    pub fn new(
        period_us: Micros,
        skew_bound_us: Micros,
        trace_a: ChannelTrace,
        trace_b: ChannelTrace,
    ) -> Result<Self, TraceError> {
        for (expected, trace) in [(ChannelId::A, &trace_a), (ChannelId::B, &trace_b)] {
            if trace.channel() != expected {
                return Err(TraceError::WrongChannel { expected, actual: trace.channel() });
            }
        }
        check_aligned(&trace_a, &trace_b)?;
        for (a, b) in trace_a.records.iter().zip(&trace_b.records) {
            let skew = b.t_tx - a.t_tx;
            if skew.abs() > skew_bound_us {
                return Err(TraceError::SkewExceeded { seq: a.seq, skew, bound: skew_bound_us });
            }
        }
        Ok(Trial { period_us, skew_bound_us, seed: None, trace_a, trace_b })
    }

    /// Records the generator seed the trial came from.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn period_us(&self) -> Micros {
        self.period_us
    }

    pub fn skew_bound_us(&self) -> Micros {
        self.skew_bound_us
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn n_packets(&self) -> usize {
        self.trace_a.len()
    }

    pub fn trace_a(&self) -> &ChannelTrace {
        &self.trace_a
    }

    pub fn trace_b(&self) -> &ChannelTrace {
        &self.trace_b
    }

    pub fn trace(&self, channel: ChannelId) -> Option<&ChannelTrace> {
        match channel {
            ChannelId::A => Some(&self.trace_a),
            ChannelId::B => Some(&self.trace_b),
            ChannelId::Redundant => None,
        }
    }

    /// The latest `trial_end` of the two channels.
    pub fn trial_end(&self) -> Micros {
        self.trace_a.trial_end.max(self.trace_b.trial_end)
    }

    pub fn merge_redundant(&self) -> ChannelTrace {
        merge_records(&self.trace_a, &self.trace_b)
    }
}

fn check_aligned(a: &ChannelTrace, b: &ChannelTrace) -> Result<(), TraceError> {
    if a.len() != b.len() {
        return Err(TraceError::LengthMismatch { a: a.len(), b: b.len() });
    }
    for (pos, (ra, rb)) in a.records.iter().zip(&b.records).enumerate() {
        if ra.seq != rb.seq {
            return Err(TraceError::Misaligned { position: pos + 1, a: ra.seq, b: rb.seq });
        }
    }
    Ok(())
}

/// Combines two aligned per-channel traces into the redundant-link trace.
///
/// A packet is lost only when both copies are lost. Its transmit time is the
/// earlier of the two copies and its latency is the smaller of the two
/// per-copy latencies, so `d_AB <= min(d_A, d_B)` holds for every packet.
pub fn merge_redundant(a: &ChannelTrace, b: &ChannelTrace) -> Result<ChannelTrace, TraceError> {
    check_aligned(a, b)?;
    Ok(merge_records(a, b))
}

/// Redundant record of one packet given both copies.
pub(crate) fn merge_pair(a: &PacketRecord, b: &PacketRecord) -> PacketRecord {
    let t_tx = a.t_tx.min(b.t_tx);
    let latency = match (a.latency(), b.latency()) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    };
    PacketRecord { seq: a.seq, t_tx, t_rx: latency.map(|d| t_tx + d) }
}

fn merge_records(a: &ChannelTrace, b: &ChannelTrace) -> ChannelTrace {
    let records = a.records.iter().zip(&b.records).map(|(ra, rb)| merge_pair(ra, rb)).collect();
    ChannelTrace {
        channel: ChannelId::Redundant,
        records,
        trial_end: a.trial_end.max(b.trial_end),
    }
}

/// Orders two optional latencies with losses last.
pub fn cmp_latency(x: Option<Micros>, y: Option<Micros>) -> Ordering {
    Delay::from_latency(x).cmp(&Delay::from_latency(y))
}
