//! Link redundancy entity: duplication on the sender side, first-copy-wins
//! de-duplication on the receiver side.
//!
//! The receiver keeps a sliding window of sequence numbers instead of an
//! unbounded set. A copy whose sequence number fell behind the window is
//! discarded as stale, whether or not its packet was ever delivered.

use thiserror::Error;

use crate::trace::{ChannelId, ChannelTrace, Micros, PacketRecord, Trial, DEFAULT_SKEW_BOUND_US};

pub const DEFAULT_WINDOW_CAPACITY: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LreError {
    #[error("transmit skew {skew} us exceeds bound {bound} us")]
    SkewExceeded { skew: Micros, bound: Micros },
    #[error("copy of seq {seq} received at {t_rx} before it was sent at {t_tx}")]
    RxBeforeTx { seq: u64, t_tx: Micros, t_rx: Micros },
    #[error("copy must be tagged with channel A or B, got {0}")]
    NotPhysical(ChannelId),
    #[error("arrival {index} is out of order")]
    Unsorted { index: usize },
    #[error("arrival {index} carries seq {seq}, outside 1..={n}")]
    UnknownSeq { index: usize, seq: u64, n: usize },
    #[error("window capacity must be at least 1")]
    ZeroWindow,
}

/// One copy of a packet as handed to a physical channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaggedCopy {
    pub seq: u64,
    pub channel: ChannelId,
    pub t_tx: Micros,
}

/// Sender half: tags both copies of a packet with the same sequence number.
#[derive(Debug, Clone, Copy)]
pub struct Duplicator {
    skew_bound: Micros,
}

impl Default for Duplicator {
    fn default() -> Self {
        Duplicator { skew_bound: DEFAULT_SKEW_BOUND_US }
    }
}

impl Duplicator {
    pub fn new(skew_bound: Micros) -> Self {
        Duplicator { skew_bound }
    }

    /// Copy A leaves at `t_request`, copy B `skew` microseconds later.
    pub fn duplicate(
        &self,
        seq: u64,
        t_request: Micros,
        skew: Micros,
    ) -> Result<(TaggedCopy, TaggedCopy), LreError> {
        if skew.abs() > self.skew_bound {
            return Err(LreError::SkewExceeded { skew, bound: self.skew_bound });
        }
        Ok((
            TaggedCopy { seq, channel: ChannelId::A, t_tx: t_request },
            TaggedCopy { seq, channel: ChannelId::B, t_tx: t_request + skew },
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscardReason {
    /// Another copy of the same seq was already delivered.
    Duplicate,
    /// The seq is older than the window floor.
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Deliver,
    Discard(DiscardReason),
}

/// Receiver-side bookkeeping of delivered sequence numbers.
#[derive(Debug, Clone)]
pub struct DedupState {
    // ring indexed by seq % capacity; valid for seqs in (highest - capacity, highest]
    delivered: Vec<bool>,
    highest: Option<u64>,
}

impl DedupState {
    pub fn new(window_capacity: usize) -> Result<Self, LreError> {
        if window_capacity == 0 {
            return Err(LreError::ZeroWindow);
        }
        Ok(DedupState { delivered: vec![false; window_capacity], highest: None })
    }

    pub fn window_capacity(&self) -> usize {
        self.delivered.len()
    }

    /// Lowest seq still tracked; anything below is stale.
    pub fn window_floor(&self) -> u64 {
        let cap = self.delivered.len() as u64;
        self.highest.map_or(0, |h| (h + 1).saturating_sub(cap))
    }

    fn slot(&self, seq: u64) -> usize {
        (seq % self.delivered.len() as u64) as usize
    }

    fn advance(&mut self, seq: u64) {
        let cap = self.delivered.len() as u64;
        match self.highest {
            Some(h) if seq <= h => {}
            Some(h) if seq - h < cap => {
                for s in h + 1..=seq {
                    let slot = self.slot(s);
                    self.delivered[slot] = false;
                }
                self.highest = Some(seq);
            }
            _ => {
                self.delivered.fill(false);
                self.highest = Some(seq);
            }
        }
    }

    pub fn on_receive(&mut self, copy: &TaggedCopy, t_rx: Micros) -> Result<Verdict, LreError> {
        if t_rx < copy.t_tx {
            return Err(LreError::RxBeforeTx { seq: copy.seq, t_tx: copy.t_tx, t_rx });
        }
        if self.highest.is_some() && copy.seq < self.window_floor() {
            return Ok(Verdict::Discard(DiscardReason::Stale));
        }
        self.advance(copy.seq);
        let slot = self.slot(copy.seq);
        if self.delivered[slot] {
            Ok(Verdict::Discard(DiscardReason::Duplicate))
        } else {
            self.delivered[slot] = true;
            Ok(Verdict::Deliver)
        }
    }
}

/// A copy reaching the receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arrival {
    pub copy: TaggedCopy,
    pub t_rx: Micros,
}

fn arrival_key(a: &Arrival) -> (Micros, ChannelId, u64) {
    (a.t_rx, a.copy.channel, a.copy.seq)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DedupStats {
    pub delivered: usize,
    pub duplicates: usize,
    pub stale: usize,
}

#[derive(Debug, Clone)]
pub struct LreRun {
    pub trace: ChannelTrace,
    pub stats: DedupStats,
}

/// Drives a receiver over a time-ordered arrival stream and measures the
/// redundant link.
///
/// `sent` holds the sender log, one pair of copies per packet in seq order
/// starting at 1. Arrivals must be sorted by receive time, ties broken with
/// channel A first. Arrivals after `trial_end` are ignored. The recorded
/// latency of a delivered packet is the smallest latency among all of its
/// copies seen before `trial_end`, measured from the earlier transmit time.
pub fn run_trial(
    sent: &[(TaggedCopy, TaggedCopy)],
    arrivals: &[Arrival],
    trial_end: Micros,
    window_capacity: usize,
) -> Result<LreRun, LreError> {
    for (index, pair) in arrivals.windows(2).enumerate() {
        if arrival_key(&pair[1]) < arrival_key(&pair[0]) {
            return Err(LreError::Unsorted { index: index + 1 });
        }
    }
    let n = sent.len();
    let mut state = DedupState::new(window_capacity)?;
    let mut stats = DedupStats::default();
    let mut delivered = vec![false; n];
    let mut best: Vec<Option<Micros>> = vec![None; n];

    for (index, arrival) in arrivals.iter().enumerate() {
        let seq = arrival.copy.seq;
        if seq == 0 || seq as usize > n {
            return Err(LreError::UnknownSeq { index, seq, n });
        }
        if !matches!(arrival.copy.channel, ChannelId::A | ChannelId::B) {
            return Err(LreError::NotPhysical(arrival.copy.channel));
        }
        if arrival.t_rx > trial_end {
            continue;
        }
        let slot = seq as usize - 1;
        match state.on_receive(&arrival.copy, arrival.t_rx)? {
            Verdict::Deliver => {
                stats.delivered += 1;
                delivered[slot] = true;
            }
            Verdict::Discard(DiscardReason::Duplicate) => stats.duplicates += 1,
            Verdict::Discard(DiscardReason::Stale) => stats.stale += 1,
        }
        let latency = arrival.t_rx - arrival.copy.t_tx;
        best[slot] = Some(best[slot].map_or(latency, |b: Micros| b.min(latency)));
    }

    let records = sent
        .iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let t_tx = a.t_tx.min(b.t_tx);
            let t_rx = if delivered[i] { best[i].map(|d| t_tx + d) } else { None };
            PacketRecord { seq: i as u64 + 1, t_tx, t_rx }
        })
        .collect();
    let trace = ChannelTrace::new(ChannelId::Redundant, records, trial_end)
        .expect("sender log yields a valid trace");
    Ok(LreRun { trace, stats })
}

/// Replays a recorded trial as the sender log and arrival stream a live
/// receiver would have seen.
pub fn trial_events(trial: &Trial) -> (Vec<(TaggedCopy, TaggedCopy)>, Vec<Arrival>) {
    let mut sent = Vec::with_capacity(trial.n_packets());
    let mut arrivals = Vec::with_capacity(2 * trial.n_packets());
    for (ra, rb) in trial.trace_a().records().iter().zip(trial.trace_b().records()) {
        let a = TaggedCopy { seq: ra.seq, channel: ChannelId::A, t_tx: ra.t_tx };
        let b = TaggedCopy { seq: rb.seq, channel: ChannelId::B, t_tx: rb.t_tx };
        sent.push((a, b));
        if let Some(t_rx) = ra.t_rx {
            arrivals.push(Arrival { copy: a, t_rx });
        }
        if let Some(t_rx) = rb.t_rx {
            arrivals.push(Arrival { copy: b, t_rx });
        }
    }
    arrivals.sort_by_key(arrival_key);
    (sent, arrivals)
}

/// Runs the receiver over a recorded trial. The receiver sees sequence
/// numbers 1..=N in packet order; the output trace carries the trial's own.
pub fn run_recorded(trial: &Trial, window_capacity: usize) -> Result<LreRun, LreError> {
    let (mut sent, mut arrivals) = trial_events(trial);
    let original: Vec<u64> = sent.iter().map(|(a, _)| a.seq).collect();
    let index_of: std::collections::HashMap<u64, u64> =
        sent.iter().enumerate().map(|(i, (a, _))| (a.seq, i as u64 + 1)).collect();
    for (a, b) in &mut sent {
        a.seq = index_of[&a.seq];
        b.seq = a.seq;
    }
    for arrival in &mut arrivals {
        arrival.copy.seq = index_of[&arrival.copy.seq];
    }
    let run = run_trial(&sent, &arrivals, trial.trial_end(), window_capacity)?;
    let records = run
        .trace
        .records()
        .iter()
        .zip(&original)
        .map(|(r, &seq)| PacketRecord { seq, ..*r })
        .collect();
    let trace = ChannelTrace::new(ChannelId::Redundant, records, run.trace.trial_end())
        .expect("original numbering is strictly increasing");
    Ok(LreRun { trace, stats: run.stats })
}
