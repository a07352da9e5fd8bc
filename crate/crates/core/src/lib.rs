//! Seamless redundancy over two wireless channels: trace model, duplicate
//! discard entity, channel simulator, link-quality statistics and the
//! channel-independence diagnostics built on them.

pub mod independence;
pub mod io;
pub mod lre;
pub mod metrics;
pub mod sim;
pub mod trace;

pub use independence::{IndependenceReport, DEFAULT_TOLERANCE};
pub use metrics::{Eccdf, MetricsOptions, MetricsReport};
pub use sim::{simulate_trial, SimConfig};
pub use trace::{ChannelId, ChannelTrace, Delay, Micros, PacketRecord, Trial};
