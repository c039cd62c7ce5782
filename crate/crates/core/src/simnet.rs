//! Virtual-time discrete-event core: clock, event queue, client latency
//! profiles, and seeded random substreams.
//!
//! All simulated durations are abstract seconds. The queue orders entries
//! strictly by `(timestamp, seq)` where `seq` is the scheduling order, so a
//! run is a pure function of its inputs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::msgflow::{Message, ParticipantId};

#[derive(Error, Debug)]
pub enum SimNetError {
    #[error("virtual time must be finite and non-negative, got {0}")]
    InvalidTime(f64),
    #[error("causality violation: `{msg_type}` scheduled at t={scheduled} with clock at t={now}")]
    CausalityViolation {
        msg_type: String,
        scheduled: f64,
        now: f64,
    },
    #[error("event queue exhausted")]
    QueueExhausted,
    #[error("latency distribution {what}, got {value}")]
    InvalidLatency { what: &'static str, value: f64 },
}

/// A point in virtual time; always finite and non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtualTime(f64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0.0);

    pub fn new(t: f64) -> Result<Self, SimNetError> {
        if !t.is_finite() || t < 0.0 {
            return Err(SimNetError::InvalidTime(t));
        }
        // Normalize -0.0 so equal times encode identically.
        Ok(VirtualTime(if t == 0.0 { 0.0 } else { t }))
    }

    pub fn seconds(self) -> f64 {
        self.0
    }

    /// This time advanced by `delta` seconds.
    pub fn plus(self, delta: f64) -> Result<Self, SimNetError> {
        VirtualTime::new(self.0 + delta)
    }
}

impl Eq for VirtualTime {}

impl Ord for VirtualTime {
    fn cmp(&self, other: &Self) -> Ordering {
        // Finite by construction, so total_cmp agrees with numeric order.
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for VirtualTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Monotone non-decreasing clock over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualClock {
    now: VirtualTime,
}

impl VirtualClock {
    pub fn new() -> Self {
        VirtualClock {
            now: VirtualTime::ZERO,
        }
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    fn advance_to(&mut self, t: VirtualTime) {
        debug_assert!(t >= self.now, "clock may not run backwards");
        self.now = t;
    }
}

impl Default for VirtualClock {
    fn default() -> Self {
        Self::new()
    }
}

struct Entry {
    time: VirtualTime,
    seq: u64,
    msg: Message,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// An event removed from the queue; `seq` is its scheduling sequence number.
#[derive(Debug)]
pub struct PoppedEvent {
    pub msg: Message,
    pub seq: u64,
}

/// Scheduling/pop counters for end-of-run reconciliation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct QueueCounters {
    pub scheduled: u64,
    pub popped: u64,
    pub remaining: u64,
}

/// Pending messages ordered by `(timestamp, seq)`; owns the virtual clock.
pub struct EventQueue {
    heap: BinaryHeap<std::cmp::Reverse<Entry>>,
    clock: VirtualClock,
    next_seq: u64,
    popped: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            clock: VirtualClock::new(),
            next_seq: 0,
            popped: 0,
        }
    }

    pub fn now(&self) -> VirtualTime {
        self.clock.now()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Insert a message; its timestamp must not precede the clock.
    pub fn schedule(&mut self, msg: Message) -> Result<u64, SimNetError> {
        if msg.timestamp < self.clock.now() {
            return Err(SimNetError::CausalityViolation {
                msg_type: msg.msg_type.clone(),
                scheduled: msg.timestamp.seconds(),
                now: self.clock.now().seconds(),
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(std::cmp::Reverse(Entry {
            time: msg.timestamp,
            seq,
            msg,
        }));
        Ok(seq)
    }

    /// Remove and return the minimum `(timestamp, seq)` entry, advancing the clock.
    pub fn next_event(&mut self) -> Result<PoppedEvent, SimNetError> {
        let std::cmp::Reverse(entry) = self.heap.pop().ok_or(SimNetError::QueueExhausted)?;
        self.clock.advance_to(entry.time);
        self.popped += 1;
        Ok(PoppedEvent {
            msg: entry.msg,
            seq: entry.seq,
        })
    }

    pub fn counters(&self) -> QueueCounters {
        QueueCounters {
            scheduled: self.next_seq,
            popped: self.popped,
            remaining: self.heap.len() as u64,
        }
    }

    /// Drain all pending entries in pop order without advancing the clock.
    pub fn drain_entries(&mut self) -> Vec<(VirtualTime, u64, Message)> {
        let mut out = Vec::with_capacity(self.heap.len());
        while let Some(std::cmp::Reverse(e)) = self.heap.pop() {
            out.push((e.time, e.seq, e.msg));
        }
        out.sort_by_key(|e| (e.0, e.1));
        out
    }

    /// Rebuild a queue from checkpointed state.
    pub fn restore(
        clock_now: VirtualTime,
        next_seq: u64,
        popped: u64,
        entries: Vec<(VirtualTime, u64, Message)>,
    ) -> Self {
        let mut heap = BinaryHeap::with_capacity(entries.len());
        for (time, seq, msg) in entries {
            heap.push(std::cmp::Reverse(Entry { time, seq, msg }));
        }
        EventQueue {
            heap,
            clock: VirtualClock { now: clock_now },
            next_seq,
            popped,
        }
    }
}

impl Default for EventQueue {
    fn default() -> Self {
        Self::new()
    }
}

/// Distribution over a positive duration in virtual seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyDist {
    /// Constant duration.
    Degenerate { value: f64 },
    /// Log-normal parameterized by its mean and the underlying normal's sigma.
    LogNormal { mean: f64, sigma: f64 },
}

impl LatencyDist {
    pub fn validate(&self) -> Result<(), SimNetError> {
        match *self {
            LatencyDist::Degenerate { value } => {
                if !value.is_finite() || value <= 0.0 {
                    return Err(SimNetError::InvalidLatency {
                        what: "requires a positive constant",
                        value,
                    });
                }
            }
            LatencyDist::LogNormal { mean, sigma } => {
                if !mean.is_finite() || mean <= 0.0 {
                    return Err(SimNetError::InvalidLatency {
                        what: "requires a positive mean",
                        value: mean,
                    });
                }
                if !sigma.is_finite() || sigma < 0.0 {
                    return Err(SimNetError::InvalidLatency {
                        what: "requires sigma >= 0",
                        value: sigma,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match *self {
            LatencyDist::Degenerate { value } => value,
            LatencyDist::LogNormal { mean, .. } => mean,
        }
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            LatencyDist::Degenerate { value } => value,
            LatencyDist::LogNormal { mean, sigma } => {
                if sigma <= 0.0 {
                    return mean;
                }
                // E[LogNormal(mu, sigma)] = exp(mu + sigma^2/2) = mean.
                let mu = mean.ln() - sigma * sigma / 2.0;
                rand_distr::LogNormal::new(mu, sigma)
                    .expect("validated parameters")
                    .sample(rng)
            }
        }
    }
}

/// Per-client cost model for one round trip of work.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub id: ParticipantId,
    /// Local training cost per assignment.
    pub comp: LatencyDist,
    /// One-way transfer cost, charged once per direction.
    pub comm: LatencyDist,
}

impl ClientProfile {
    pub fn new(
        id: ParticipantId,
        comp: LatencyDist,
        comm: LatencyDist,
    ) -> Result<Self, SimNetError> {
        comp.validate()?;
        comm.validate()?;
        Ok(ClientProfile { id, comp, comm })
    }

    /// Responsiveness summary: one compute plus two transfers per exchange.
    pub fn speed_score(&self) -> f64 {
        1.0 / (self.comp.mean() + 2.0 * self.comm.mean())
    }
}

/// When a client that received a model at `receive_time` finishes training
/// and its reply lands at the server (compute plus uplink transfer).
pub fn client_reply_time<R: Rng>(
    profile: &ClientProfile,
    receive_time: VirtualTime,
    rng: &mut R,
) -> Result<VirtualTime, SimNetError> {
    let comp = profile.comp.draw(rng);
    let comm = profile.comm.draw(rng);
    receive_time.plus(comp + comm)
}

/// Deterministic substream factory over a 64-bit master seed.
///
/// Streams are keyed by `(purpose, client, index)`; identical keys yield
/// identical sequences and distinct keys independent ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeededRng {
    seed: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, purpose: &str, client: u64, index: u64) -> ChaCha12Rng {
        let mut h = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        h = mix(h ^ fnv1a(purpose.as_bytes()));
        h = mix(h ^ client.wrapping_mul(0xd6e8_feb8_6659_fd93));
        h = mix(h ^ index.wrapping_mul(0xa076_1d64_78bd_642f));
        let mut bytes = [0u8; 32];
        for (i, chunk) in bytes.chunks_exact_mut(8).enumerate() {
            let word = mix(h.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        ChaCha12Rng::from_seed(bytes)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
