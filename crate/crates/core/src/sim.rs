//! Stochastic generation of dual-channel trials.
//!
//! Each packet of a periodic stream is sent on both channels. For every
//! channel and packet the simulator combines the service model's error
//! probability with an optional Gilbert-Elliott burst state, applies the
//! events of any interferers hitting that packet, then runs the unicast retry
//! loop or the multicast single shot. Latency is the sum of the base
//! latency, one contention-tail sample, the retry penalty and interferer
//! delay.
//!
//! All randomness comes from ChaCha substreams of the master seed, one per
//! (channel, purpose) and one per interferer, so changing an interferer that
//! only touches channel B never perturbs channel A.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lre::DEFAULT_WINDOW_CAPACITY;
use crate::trace::{
    ChannelId, ChannelTrace, Micros, PacketRecord, TraceError, Trial, DEFAULT_GRACE_US,
    DEFAULT_SKEW_BOUND_US,
};

/// Beacon interval of a typical access point (100 TU).
pub const BEACON_PERIOD_US: Micros = 102_400;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidConfig(msg.into())
}

fn check_prob(name: &str, p: f64) -> Result<(), SimError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(invalid(format!("{name} = {p} is not a probability")))
    }
}

fn check_non_negative(name: &str, v: Micros) -> Result<(), SimError> {
    if v >= 0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} = {v} must not be negative")))
    }
}

/// Distribution of the contention part of the latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum TailLaw {
    Exponential { mean_us: f64 },
    /// Parameters of the underlying normal, in log-microseconds.
    LogNormal { mu: f64, sigma: f64 },
    Constant { value_us: Micros },
}

impl Default for TailLaw {
    fn default() -> Self {
        TailLaw::Exponential { mean_us: 400.0 }
    }
}

impl TailLaw {
    fn validate(&self) -> Result<(), SimError> {
        match *self {
            TailLaw::Exponential { mean_us } if !(mean_us >= 0.0 && mean_us.is_finite()) => {
                Err(invalid(format!("exponential mean {mean_us} must be finite and >= 0")))
            }
            TailLaw::LogNormal { mu, sigma } if !(sigma >= 0.0 && sigma.is_finite() && mu.is_finite()) => {
                Err(invalid(format!("log-normal parameters ({mu}, {sigma}) are invalid")))
            }
            TailLaw::Constant { value_us } => check_non_negative("constant tail", value_us),
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Micros {
        match *self {
            TailLaw::Exponential { mean_us: 0.0 } => 0,
            TailLaw::Exponential { mean_us } => {
                Exp::new(1.0 / mean_us).expect("validated mean").sample(rng).round() as Micros
            }
            TailLaw::LogNormal { mu, sigma } => {
                LogNormal::new(mu, sigma).expect("validated parameters").sample(rng).round() as Micros
            }
            TailLaw::Constant { value_us } => value_us,
        }
    }
}

fn default_max_retries() -> u32 {
    7
}

fn default_base_latency() -> Micros {
    900
}

fn default_retry_latency() -> Micros {
    300
}

/// How a channel delivers one packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServiceModel {
    /// Acknowledged delivery; a packet is lost only when all
    /// `1 + max_retries` attempts fail.
    Unicast {
        #[serde(default)]
        per_attempt_error_prob: f64,
        #[serde(default = "default_max_retries")]
        max_retries: u32,
        #[serde(default = "default_base_latency")]
        base_latency_us: Micros,
        #[serde(default = "default_retry_latency")]
        retry_latency_us: Micros,
        #[serde(default)]
        contention_tail: TailLaw,
    },
    /// One unacknowledged shot.
    Multicast {
        #[serde(default)]
        error_prob: f64,
        #[serde(default = "default_base_latency")]
        base_latency_us: Micros,
        #[serde(default)]
        contention_tail: TailLaw,
    },
}

impl Default for ServiceModel {
    fn default() -> Self {
        ServiceModel::Multicast {
            error_prob: 0.001,
            base_latency_us: default_base_latency(),
            contention_tail: TailLaw::default(),
        }
    }
}

impl ServiceModel {
    pub fn base_latency_us(&self) -> Micros {
        match *self {
            ServiceModel::Unicast { base_latency_us, .. } | ServiceModel::Multicast { base_latency_us, .. } => {
                base_latency_us
            }
        }
    }

    fn error_prob(&self) -> f64 {
        match *self {
            ServiceModel::Unicast { per_attempt_error_prob, .. } => per_attempt_error_prob,
            ServiceModel::Multicast { error_prob, .. } => error_prob,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        check_prob("error probability", self.error_prob())?;
        check_non_negative("base_latency_us", self.base_latency_us())?;
        match self {
            ServiceModel::Unicast { retry_latency_us, contention_tail, .. } => {
                check_non_negative("retry_latency_us", *retry_latency_us)?;
                contention_tail.validate()
            }
            ServiceModel::Multicast { contention_tail, .. } => contention_tail.validate(),
        }
    }
}

/// Two-state Markov burst model stepped once per packet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GilbertElliott {
    pub p_good_to_bad: f64,
    pub p_bad_to_good: f64,
    #[serde(default)]
    pub error_prob_good: f64,
    #[serde(default = "one")]
    pub error_prob_bad: f64,
}

fn one() -> f64 {
    1.0
}

impl GilbertElliott {
    fn validate(&self) -> Result<(), SimError> {
        check_prob("p_good_to_bad", self.p_good_to_bad)?;
        check_prob("p_bad_to_good", self.p_bad_to_good)?;
        check_prob("error_prob_good", self.error_prob_good)?;
        check_prob("error_prob_bad", self.error_prob_bad)?;
        if self.p_good_to_bad + self.p_bad_to_good <= 0.0 {
            return Err(invalid("Gilbert-Elliott chain needs a non-zero transition probability"));
        }
        Ok(())
    }

    /// Stationary probability of the bad state.
    pub fn stationary_bad(&self) -> f64 {
        self.p_good_to_bad / (self.p_good_to_bad + self.p_bad_to_good)
    }

    /// Long-run error probability.
    pub fn stationary_error_prob(&self) -> f64 {
        let bad = self.stationary_bad();
        bad * self.error_prob_bad + (1.0 - bad) * self.error_prob_good
    }
}

/// Outcome distribution of an interference event on a packet it overlaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    /// Probability that an overlapping event affects the packet at all.
    #[serde(default = "one")]
    pub hit_prob: f64,
    #[serde(default)]
    pub extra_delay_us: Micros,
    /// Probability that a hit destroys the packet on every channel it reaches.
    #[serde(default)]
    pub extra_loss_prob: f64,
}

impl Effect {
    fn validate(&self) -> Result<(), SimError> {
        check_prob("hit_prob", self.hit_prob)?;
        check_prob("extra_loss_prob", self.extra_loss_prob)?;
        check_non_negative("extra_delay_us", self.extra_delay_us)
    }
}

fn lab_effect() -> Effect {
    Effect { hit_prob: 0.5, extra_delay_us: 1500, extra_loss_prob: 0.05 }
}

fn beacon_period() -> Micros {
    BEACON_PERIOD_US
}
fn beacon_hit_prob() -> f64 {
    0.02
}
fn lab_gap() -> f64 {
    1_000_000.0
}
fn lab_burst_packets() -> u32 {
    700
}
fn lab_spacing() -> Micros {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterfererKind {
    /// Events every `period_us` (random phase, uniform jitter of
    /// `±jitter_us`). An event lands in the transmission slot of exactly one
    /// packet. Defaults describe a neighbouring access point's beacons.
    #[serde(alias = "beacon")]
    Periodic {
        #[serde(default = "beacon_period")]
        period_us: Micros,
        #[serde(default)]
        jitter_us: Micros,
        #[serde(default = "beacon_hit_prob")]
        hit_prob: f64,
        #[serde(default)]
        extra_delay_us: Micros,
        #[serde(default = "one")]
        extra_loss_prob: f64,
    },
    /// Bursts of `burst_packets` frames spaced `burst_spacing_us`, separated
    /// by exponential gaps of mean `mean_gap_us`. Every packet sent while a
    /// burst is on air overlaps one event. Defaults describe the 5 GHz lab
    /// load of three saturating stations.
    #[serde(alias = "lab5ghz")]
    BurstyPoisson {
        #[serde(default = "lab_gap")]
        mean_gap_us: f64,
        #[serde(default = "lab_burst_packets")]
        burst_packets: u32,
        #[serde(default = "lab_spacing")]
        burst_spacing_us: Micros,
        #[serde(default = "lab_effect")]
        payload_effect: Effect,
    },
}

impl InterfererKind {
    fn effect(&self) -> Effect {
        match *self {
            InterfererKind::Periodic { hit_prob, extra_delay_us, extra_loss_prob, .. } => {
                Effect { hit_prob, extra_delay_us, extra_loss_prob }
            }
            InterfererKind::BurstyPoisson { payload_effect, .. } => payload_effect,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        self.effect().validate()?;
        match *self {
            InterfererKind::Periodic { period_us, jitter_us, .. } => {
                if period_us <= 0 {
                    return Err(invalid("interferer period_us must be positive"));
                }
                check_non_negative("jitter_us", jitter_us)
            }
            InterfererKind::BurstyPoisson { mean_gap_us, burst_packets, burst_spacing_us, .. } => {
                if !(mean_gap_us > 0.0 && mean_gap_us.is_finite()) {
                    return Err(invalid("mean_gap_us must be positive"));
                }
                if burst_packets == 0 || burst_spacing_us <= 0 {
                    return Err(invalid("bursts need at least one packet and a positive spacing"));
                }
                Ok(())
            }
        }
    }
}

/// Channels an interferer reaches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum Scope {
    #[default]
    #[serde(alias = "a")]
    ChannelA,
    #[serde(alias = "b")]
    ChannelB,
    /// Every event hits A and, with probability `coupling`, B at the same
    /// instant.
    Both { coupling: f64 },
}

impl Scope {
    fn code(self) -> u64 {
        match self {
            Scope::ChannelA => 1,
            Scope::ChannelB => 2,
            Scope::Both { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interferer {
    #[serde(flatten)]
    pub kind: InterfererKind,
    #[serde(default)]
    pub scope: Scope,
}

impl Interferer {
    /// Beacons of a nearby network every 102.4 ms.
    pub fn beacon(scope: Scope) -> Self {
        Interferer {
            kind: InterfererKind::Periodic {
                period_us: BEACON_PERIOD_US,
                jitter_us: 0,
                hit_prob: beacon_hit_prob(),
                extra_delay_us: 0,
                extra_loss_prob: 1.0,
            },
            scope,
        }
    }

    /// 700-frame bursts every 500 us with 1 s mean exponential gaps.
    pub fn lab5ghz(scope: Scope) -> Self {
        Interferer {
            kind: InterfererKind::BurstyPoisson {
                mean_gap_us: lab_gap(),
                burst_packets: lab_burst_packets(),
                burst_spacing_us: lab_spacing(),
                payload_effect: lab_effect(),
            },
            scope,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if let Scope::Both { coupling } = self.scope {
            check_prob("coupling", coupling)?;
        }
        self.kind.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum SkewLaw {
    /// Uniform on `[-bound_us, bound_us]`.
    Uniform { bound_us: Micros },
    Fixed { value_us: Micros },
}

impl Default for SkewLaw {
    fn default() -> Self {
        SkewLaw::Uniform { bound_us: DEFAULT_SKEW_BOUND_US }
    }
}

impl SkewLaw {
    pub fn bound(self) -> Micros {
        match self {
            SkewLaw::Uniform { bound_us } => bound_us,
            SkewLaw::Fixed { value_us } => value_us.abs(),
        }
    }

    fn sample<R: Rng>(self, rng: &mut R) -> Micros {
        match self {
            SkewLaw::Uniform { bound_us: 0 } => 0,
            SkewLaw::Uniform { bound_us } => rng.random_range(-bound_us..=bound_us),
            SkewLaw::Fixed { value_us } => value_us,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ChannelConfig {
    pub service: ServiceModel,
    pub gilbert_elliott: Option<GilbertElliott>,
}

/// Everything that defines a simulated trial. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_packets: usize,
    pub period_us: Micros,
    pub seed: u64,
    pub grace_us: Micros,
    pub skew: SkewLaw,
    /// Receiver window of the redundancy entity; must exceed the largest
    /// reordering span a trial can produce.
    pub lre_window: usize,
    pub channel_a: ChannelConfig,
    pub channel_b: ChannelConfig,
    pub interferers: Vec<Interferer>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_packets: 864_000,
            period_us: 100_000,
            seed: 0,
            grace_us: DEFAULT_GRACE_US,
            skew: SkewLaw::default(),
            lre_window: DEFAULT_WINDOW_CAPACITY,
            channel_a: ChannelConfig::default(),
            channel_b: ChannelConfig::default(),
            interferers: Vec::new(),
        }
    }
}

impl SimConfig {
    /// One day at the given period.
    pub fn one_day(period_us: Micros) -> Self {
        SimConfig { n_packets: (86_400_000_000 / period_us) as usize, period_us, ..Default::default() }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let cfg: SimConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration is always serialisable")
    }

    pub fn channel(&self, channel: ChannelId) -> &ChannelConfig {
        match channel {
            ChannelId::B => &self.channel_b,
            _ => &self.channel_a,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_packets == 0 {
            return Err(invalid("n_packets must be at least 1"));
        }
        if self.period_us <= 0 {
            return Err(invalid("period_us must be positive"));
        }
        check_non_negative("grace_us", self.grace_us)?;
        check_non_negative("skew bound", self.skew.bound())?;
        if self.lre_window == 0 {
            return Err(invalid("lre_window must be at least 1"));
        }
        for ch in [&self.channel_a, &self.channel_b] {
            ch.service.validate()?;
            if let Some(ge) = &ch.gilbert_elliott {
                ge.validate()?;
            }
        }
        self.interferers.iter().try_for_each(Interferer::validate)
    }
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Skew,
    Service(ChannelId),
    Burst(ChannelId),
    Interferer { scope: Scope, ordinal: u64 },
}

impl Stream {
    fn id(self) -> u64 {
        let ch = |c: ChannelId| if c == ChannelId::B { 1 } else { 0 };
        match self {
            Stream::Skew => 1,
            Stream::Service(c) => 2 + ch(c),
            Stream::Burst(c) => 4 + ch(c),
            Stream::Interferer { scope, ordinal } => (scope.code() << 32) | ordinal,
        }
    }
}

fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Packet indices overlapped by the interferer's events, in time order.
fn event_slots<R: Rng>(kind: &InterfererKind, rng: &mut R, n: usize, period_us: Micros) -> Vec<usize> {
    let horizon = n as Micros * period_us;
    let slot_of = |t: Micros| -> Option<usize> {
        (0..horizon).contains(&t).then(|| (t / period_us) as usize)
    };
    let mut slots = Vec::new();
    match *kind {
        InterfererKind::Periodic { period_us: every, jitter_us, .. } => {
            let phase = rng.random_range(0..every);
            let mut k: Micros = 0;
            loop {
                let nominal = phase + k * every;
                if nominal - jitter_us >= horizon {
                    break;
                }
                let jitter = if jitter_us > 0 { rng.random_range(-jitter_us..=jitter_us) } else { 0 };
                if let Some(s) = slot_of(nominal + jitter) {
                    slots.push(s);
                }
                k += 1;
            }
        }
        InterfererKind::BurstyPoisson { mean_gap_us, burst_packets, burst_spacing_us, .. } => {
            let gap = Exp::new(1.0 / mean_gap_us).expect("validated gap");
            let length = burst_packets as Micros * burst_spacing_us;
            let mut t = 0.0f64;
            loop {
                t += gap.sample(rng);
                let start = t.round() as Micros;
                if start >= horizon {
                    break;
                }
                let end = start + length;
                // packets whose nominal send time falls inside the burst
                let first = (start + period_us - 1).div_euclid(period_us).max(0);
                let mut i = first;
                while i * period_us < end.min(horizon) {
                    slots.push(i as usize);
                    i += 1;
                }
                t = end as f64;
            }
        }
    }
    slots.sort_unstable();
    slots
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Impact {
    destroyed: bool,
    extra_delay: Micros,
}

impl Impact {
    fn absorb(&mut self, destroyed: bool, delay: Micros) {
        self.destroyed |= destroyed;
        self.extra_delay += delay;
    }
}

/// Resolved events of one interferer: `(slot, destroyed, delay, hits_a, hits_b)`.
fn interferer_events<R: Rng>(
    interferer: &Interferer,
    rng: &mut R,
    n: usize,
    period_us: Micros,
) -> Vec<(usize, bool, Micros, bool, bool)> {
    let effect = interferer.kind.effect();
    let slots = event_slots(&interferer.kind, rng, n, period_us);
    let mut out = Vec::new();
    for slot in slots {
        if !rng.random_bool(effect.hit_prob) {
            continue;
        }
        let destroyed = rng.random_bool(effect.extra_loss_prob);
        let (hits_a, hits_b) = match interferer.scope {
            Scope::ChannelA => (true, false),
            Scope::ChannelB => (false, true),
            Scope::Both { coupling } => (true, rng.random_bool(coupling)),
        };
        out.push((slot, destroyed, effect.extra_delay_us, hits_a, hits_b));
    }
    out
}

/// Per-packet hit masks of a single interferer on channels A and B.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventMasks {
    pub a: Vec<bool>,
    pub b: Vec<bool>,
}

/// Which of `n` packets spaced `period_us` apart the interferer hits on
/// each channel, drawn from the same substream the simulator would use
/// for the first interferer of that scope under `seed`.
pub fn coupled_event_mask(interferer: &Interferer, seed: u64, n: usize, period_us: Micros) -> EventMasks {
    let mut rng = substream(seed, Stream::Interferer { scope: interferer.scope, ordinal: 0 });
    let mut masks = EventMasks { a: vec![false; n], b: vec![false; n] };
    for (slot, _, _, hits_a, hits_b) in interferer_events(interferer, &mut rng, n, period_us) {
        masks.a[slot] |= hits_a;
        masks.b[slot] |= hits_b;
    }
    masks
}

fn simulate_channel(
    cfg: &SimConfig,
    channel: ChannelId,
    tx_times: &[Micros],
    impacts: &[Impact],
    trial_end: Micros,
) -> Result<ChannelTrace, SimError> {
    let chan = cfg.channel(channel);
    let mut service_rng = substream(cfg.seed, Stream::Service(channel));
    let mut burst_rng = substream(cfg.seed, Stream::Burst(channel));
    let mut bad = chan
        .gilbert_elliott
        .map(|ge| burst_rng.random_bool(ge.stationary_bad()))
        .unwrap_or(false);
    let base_p = chan.service.error_prob();

    let mut records = Vec::with_capacity(tx_times.len());
    for (i, (&t_tx, impact)) in tx_times.iter().zip(impacts).enumerate() {
        let p = match &chan.gilbert_elliott {
            Some(ge) => {
                let e = if bad { ge.error_prob_bad } else { ge.error_prob_good };
                let p = 1.0 - (1.0 - base_p) * (1.0 - e);
                bad = if bad {
                    !burst_rng.random_bool(ge.p_bad_to_good)
                } else {
                    burst_rng.random_bool(ge.p_good_to_bad)
                };
                p
            }
            None => base_p,
        };
        let p = p.clamp(0.0, 1.0);
        let latency = if impact.destroyed {
            None
        } else {
            match &chan.service {
                ServiceModel::Unicast {
                    max_retries,
                    base_latency_us,
                    retry_latency_us,
                    contention_tail,
                    ..
                } => (0..=*max_retries).find(|_| !service_rng.random_bool(p)).map(|retries| {
                    base_latency_us
                        + contention_tail.sample(&mut service_rng)
                        + retries as Micros * retry_latency_us
                }),
                ServiceModel::Multicast { base_latency_us, contention_tail, .. } => {
                    (!service_rng.random_bool(p))
                        .then(|| base_latency_us + contention_tail.sample(&mut service_rng))
                }
            }
        };
        records.push(PacketRecord {
            seq: i as u64 + 1,
            t_tx,
            t_rx: latency.map(|d| t_tx + d + impact.extra_delay),
        });
    }
    Ok(ChannelTrace::new(channel, records, trial_end)?)
}

/// Generates one trial. Identical configurations give identical trials.
pub fn simulate_trial(cfg: &SimConfig) -> Result<Trial, SimError> {
    cfg.validate()?;
    for (label, ch) in [("A", &cfg.channel_a), ("B", &cfg.channel_b)] {
        if ch.service.base_latency_us() > cfg.period_us {
            log::warn!(
                "channel {label}: base latency {} us exceeds the period {} us; packets will queue",
                ch.service.base_latency_us(),
                cfg.period_us
            );
        }
    }
    let n = cfg.n_packets;
    let bound = cfg.skew.bound();
    // shift the epoch so that early B copies never precede it
    let t0 = bound;
    let mut skew_rng = substream(cfg.seed, Stream::Skew);
    let tx_a: Vec<Micros> = (0..n).map(|i| t0 + i as Micros * cfg.period_us).collect();
    let tx_b: Vec<Micros> = tx_a.iter().map(|&t| t + cfg.skew.sample(&mut skew_rng)).collect();

    let mut impacts_a = vec![Impact::default(); n];
    let mut impacts_b = vec![Impact::default(); n];
    let mut ordinals = std::collections::HashMap::<u64, u64>::new();
    for interferer in &cfg.interferers {
        let ordinal = ordinals.entry(interferer.scope.code()).or_default();
        let mut rng = substream(cfg.seed, Stream::Interferer { scope: interferer.scope, ordinal: *ordinal });
        *ordinal += 1;
        for (slot, destroyed, delay, hits_a, hits_b) in
            interferer_events(interferer, &mut rng, n, cfg.period_us)
        {
            if hits_a {
                impacts_a[slot].absorb(destroyed, delay);
            }
            if hits_b {
                impacts_b[slot].absorb(destroyed, delay);
            }
        }
    }

    let last_tx = tx_a.last().copied().unwrap_or(t0).max(tx_b.last().copied().unwrap_or(t0));
    let trial_end = last_tx + cfg.grace_us;
    let trace_a = simulate_channel(cfg, ChannelId::A, &tx_a, &impacts_a, trial_end)?;
    let trace_b = simulate_channel(cfg, ChannelId::B, &tx_b, &impacts_b, trial_end)?;
    Ok(Trial::new(cfg.period_us, bound, trace_a, trace_b)?.with_seed(Some(cfg.seed)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn multicast(error_prob: f64, tail: TailLaw) -> ChannelConfig {
        ChannelConfig {
            service: ServiceModel::Multicast { error_prob, base_latency_us: 900, contention_tail: tail },
            gilbert_elliott: None,
        }
    }

    fn base(n: usize) -> SimConfig {
        SimConfig { n_packets: n, period_us: 10_000, seed: 7, ..Default::default() }
    }

    #[test]
    fn noiseless_channel_has_constant_latency() {
        let cfg = SimConfig {
            channel_a: multicast(0.0, TailLaw::Constant { value_us: 0 }),
            channel_b: multicast(0.0, TailLaw::Constant { value_us: 0 }),
            ..base(1000)
        };
        let trial = simulate_trial(&cfg).unwrap();
        for tr in [trial.trace_a(), trial.trace_b()] {
            assert_eq!(tr.n_lost(), 0);
            assert!(tr.received_latencies().all(|d| d == 900));
        }
        assert!(trial.trace_a().records().windows(2).all(|w| w[1].t_tx - w[0].t_tx == 10_000));
        let skews: Vec<_> = trial
            .trace_a()
            .records()
            .iter()
            .zip(trial.trace_b().records())
            .map(|(a, b)| b.t_tx - a.t_tx)
            .collect();
        assert!(skews.iter().all(|s| s.abs() <= 90));
        assert!(skews.iter().any(|&s| s != 0));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(simulate_trial(&base(0)).is_err());
        let mut cfg = base(10);
        cfg.channel_a = multicast(1.5, TailLaw::default());
        assert!(matches!(simulate_trial(&cfg), Err(SimError::InvalidConfig(_))));
        let mut cfg = base(10);
        cfg.interferers.push(Interferer::beacon(Scope::Both { coupling: -0.1 }));
        assert!(simulate_trial(&cfg).is_err());
        let mut cfg = base(10);
        cfg.channel_b.service = ServiceModel::Unicast {
            per_attempt_error_prob: 0.1,
            max_retries: 7,
            base_latency_us: 900,
            retry_latency_us: -1,
            contention_tail: TailLaw::default(),
        };
        assert!(simulate_trial(&cfg).is_err());
    }

    #[test]
    fn base_latency_above_period_is_allowed() {
        let cfg = SimConfig { period_us: 500, ..base(100) };
        let trial = simulate_trial(&cfg).unwrap();
        assert!(trial.trace_a().received_latencies().any(|d| d > 500));
    }

    #[test]
    fn deterministic_for_seed() {
        let mut cfg = base(5000);
        cfg.interferers.push(Interferer::beacon(Scope::Both { coupling: 0.5 }));
        cfg.interferers.push(Interferer::lab5ghz(Scope::ChannelB));
        let a = simulate_trial(&cfg).unwrap();
        let b = simulate_trial(&cfg).unwrap();
        assert_eq!(a, b);
        cfg.seed += 1;
        assert_ne!(a, simulate_trial(&cfg).unwrap());
    }

    #[test]
    fn channel_b_interferers_leave_channel_a_alone() {
        let mut cfg = base(20_000);
        cfg.channel_a.gilbert_elliott = Some(GilbertElliott {
            p_good_to_bad: 0.01,
            p_bad_to_good: 0.3,
            error_prob_good: 0.0,
            error_prob_bad: 0.5,
        });
        cfg.interferers.push(Interferer::beacon(Scope::Both { coupling: 0.3 }));
        let before = simulate_trial(&cfg).unwrap();
        cfg.interferers.insert(0, Interferer::lab5ghz(Scope::ChannelB));
        cfg.interferers.push(Interferer::beacon(Scope::ChannelB));
        let after = simulate_trial(&cfg).unwrap();
        assert_eq!(before.trace_a(), after.trace_a());
        assert_ne!(before.trace_b(), after.trace_b());
    }

    #[test]
    fn multicast_loss_matches_bernoulli() {
        let p = 0.02;
        let n = 200_000;
        let cfg = SimConfig { channel_a: multicast(p, TailLaw::default()), ..base(n) };
        let trial = simulate_trial(&cfg).unwrap();
        let ul = trial.trace_a().n_lost() as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((ul - p).abs() <= 3.0 * sigma, "loss {ul} vs {p}");
    }

    #[test]
    fn unicast_retries_hide_losses() {
        let cfg = SimConfig {
            channel_a: ChannelConfig {
                service: ServiceModel::Unicast {
                    per_attempt_error_prob: 0.1,
                    max_retries: 7,
                    base_latency_us: 700,
                    retry_latency_us: 300,
                    contention_tail: TailLaw::Exponential { mean_us: 200.0 },
                },
                gilbert_elliott: None,
            },
            ..base(1_000_000)
        };
        let trial = simulate_trial(&cfg).unwrap();
        assert_eq!(trial.trace_a().n_lost(), 0);
        // first-attempt successes carry no retry penalty; some packets needed retries
        let lat: Vec<_> = trial.trace_a().received_latencies().collect();
        assert!(lat.iter().all(|&d| d >= 700));
        assert!(lat.iter().any(|&d| d >= 700 + 7 * 300));
    }

    #[test]
    fn gilbert_elliott_stationary_loss() {
        let ge = GilbertElliott { p_good_to_bad: 0.002, p_bad_to_good: 0.2, error_prob_good: 0.001, error_prob_bad: 0.6 };
        let n = 1_000_000;
        let mut cfg = SimConfig { channel_a: multicast(0.0, TailLaw::default()), ..base(n) };
        cfg.channel_a.gilbert_elliott = Some(ge);
        let trial = simulate_trial(&cfg).unwrap();
        let expected = ge.stationary_error_prob();
        let ul = trial.trace_a().n_lost() as f64 / n as f64;
        // bursts inflate the variance of the mean; widen the binomial sigma by the
        // chain's integrated autocorrelation time
        let lambda = 1.0 - ge.p_good_to_bad - ge.p_bad_to_good;
        let inflation = (1.0 + lambda) / (1.0 - lambda);
        let sigma = (expected * (1.0 - expected) * inflation / n as f64).sqrt();
        assert!((ul - expected).abs() <= 3.0 * sigma, "loss {ul} vs {expected} (sigma {sigma})");
    }

    #[test]
    fn coupling_extremes() {
        let mut beacon = Interferer::beacon(Scope::Both { coupling: 1.0 });
        if let InterfererKind::Periodic { hit_prob, .. } = &mut beacon.kind {
            *hit_prob = 1.0;
        }
        let m = coupled_event_mask(&beacon, 3, 100_000, 10_000);
        assert_eq!(m.a, m.b);
        assert!(m.a.iter().filter(|&&x| x).count() > 9000);

        beacon.scope = Scope::Both { coupling: 0.0 };
        let m = coupled_event_mask(&beacon, 3, 100_000, 10_000);
        assert!(m.b.iter().all(|&x| !x));
        assert!(m.a.iter().any(|&x| x));
    }

    #[test]
    fn coupling_half_conditional_rate() {
        let mut lab = Interferer::lab5ghz(Scope::Both { coupling: 0.5 });
        if let InterfererKind::BurstyPoisson { payload_effect, .. } = &mut lab.kind {
            payload_effect.hit_prob = 1.0;
        }
        let m = coupled_event_mask(&lab, 11, 1_000_000, 10_000);
        let hits_a = m.a.iter().filter(|&&x| x).count();
        let both = m.a.iter().zip(&m.b).filter(|(a, b)| **a && **b).count();
        let ratio = both as f64 / hits_a as f64;
        assert!(hits_a > 50_000);
        assert!((ratio - 0.5).abs() <= 0.01, "P(B|A) = {ratio}");
    }

    #[test]
    fn periodic_events_land_once_per_period() {
        let beacon = Interferer {
            kind: InterfererKind::Periodic {
                period_us: 102_400,
                jitter_us: 0,
                hit_prob: 1.0,
                extra_delay_us: 0,
                extra_loss_prob: 1.0,
            },
            scope: Scope::ChannelA,
        };
        let n = 10_240;
        let m = coupled_event_mask(&beacon, 5, n, 10_000);
        // 102.4 s of stream hold exactly 1000 beacon instants
        assert_eq!(m.a.iter().filter(|&&x| x).count(), 1000);
        let idx: Vec<usize> = m.a.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i).collect();
        assert!(idx.windows(2).all(|w| (10..=11).contains(&(w[1] - w[0]))));
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg: SimConfig = SimConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, SimConfig::default());
        let text = r#"
            n_packets = 1000
            period_us = 10000
            seed = 9

            [skew]
            law = "fixed"
            value_us = -20

            [channel_a.service]
            kind = "unicast"
            per_attempt_error_prob = 0.1

            [channel_b.service]
            kind = "multicast"
            error_prob = 0.01
            contention_tail = { law = "log_normal", mu = 5.0, sigma = 0.5 }

            [channel_b.gilbert_elliott]
            p_good_to_bad = 0.01
            p_bad_to_good = 0.5

            [[interferers]]
            kind = "beacon"
            scope = { target = "both", coupling = 0.25 }

            [[interferers]]
            kind = "lab5ghz"
            scope = { target = "b" }
        "#;
        let cfg = SimConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.skew, SkewLaw::Fixed { value_us: -20 });
        assert!(matches!(cfg.channel_a.service, ServiceModel::Unicast { max_retries: 7, .. }));
        assert_eq!(cfg.interferers[0], Interferer::beacon(Scope::Both { coupling: 0.25 }));
        assert_eq!(cfg.interferers[1], Interferer::lab5ghz(Scope::ChannelB));
        let again = SimConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(again, cfg);
        assert!(SimConfig::from_toml_str("n_packets = \"x\"").is_err());
    }

    #[test]
    fn one_day_presets() {
        assert_eq!(SimConfig::one_day(100_000).n_packets, 864_000);
        assert_eq!(SimConfig::one_day(10_000).n_packets, 8_640_000);
    }
}
