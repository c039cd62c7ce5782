//! Checkpoints: the full mutable course state as one canonical payload.
//!
//! The immutable world rebuilds from the course spec, so a snapshot holds
//! only what time has changed: the queue, the server, per-client state,
//! and every stream counter. Scalars keep their exact bits through the codec,
//! which is what makes resumption byte-identical.

use std::collections::{BTreeMap, BTreeSet};

use super::{FedCoreError, Update};
use crate::learnkit::ParamVector;
use crate::msgflow::{Message, ParticipantId, Payload, Value};
use crate::simnet::VirtualTime;

/// Bumped whenever the snapshot layout changes incompatibly.
const SNAPSHOT_SCHEMA: u64 = 1;

/// Counters above this bound would lose precision as scalar payloads.
const MAX_EXACT: u64 = 1 << 53;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub seed: u64,
    pub clock: VirtualTime,
    pub next_seq: u64,
    pub popped: u64,
    pub queue: Vec<(VirtualTime, u64, Message)>,
    pub version: u64,
    pub global_params: ParamVector,
    pub buffer: Vec<Update>,
    pub in_flight: BTreeSet<ParticipantId>,
    pub ever_sampled: BTreeSet<ParticipantId>,
    pub joined: BTreeSet<ParticipantId>,
    pub agg_count: BTreeMap<ParticipantId, u64>,
    pub round_started_at: VirtualTime,
    pub deadline: VirtualTime,
    pub timer_gen: u64,
    pub budget_extended: bool,
    pub empty_restarts: u32,
    pub received: u64,
    pub contributed: u64,
    pub dropped: u64,
    pub sample_count: u64,
    pub best_val_loss: f64,
    pub evals_since_improve: u64,
    pub last_eval_version: Option<u64>,
    pub clients: Vec<ClientSnap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientSnap {
    pub full: ParamVector,
    pub local: Option<ParamVector>,
    pub send_count: u64,
    pub cfg_count: u64,
    pub reply_count: u64,
    pub train_count: u64,
}

fn scalar(x: f64) -> Value {
    Value::Scalar(x)
}

fn count(x: u64) -> Value {
    debug_assert!(x < MAX_EXACT, "counter {x} exceeds exact scalar range");
    Value::Scalar(x as f64)
}

fn ids(set: &BTreeSet<ParticipantId>) -> Value {
    Value::Array(set.iter().map(|id| f64::from(id.0)).collect())
}

fn string_bytes(s: &str) -> Value {
    Value::Array(s.bytes().map(f64::from).collect())
}

fn push(p: &mut Payload, name: &str, v: Value) {
    p.push(name, v).expect("snapshot field names are unique");
}

fn encode_params(params: &ParamVector) -> Value {
    Value::Entries(params.to_payload())
}

fn encode_update(u: &Update) -> Payload {
    let mut p = Payload::new();
    push(&mut p, "client", count(u64::from(u.client.0)));
    push(&mut p, "delta", encode_params(&u.delta));
    push(&mut p, "num_samples", count(u.num_samples));
    push(&mut p, "model_version", count(u.model_version));
    push(&mut p, "staleness", count(u.staleness));
    push(&mut p, "received_at", scalar(u.received_at.seconds()));
    p
}

fn encode_entry(t: VirtualTime, seq: u64, msg: &Message) -> Payload {
    let mut p = Payload::new();
    push(&mut p, "t", scalar(t.seconds()));
    push(&mut p, "seq", count(seq));
    push(&mut p, "type", string_bytes(&msg.msg_type));
    push(&mut p, "sender", count(u64::from(msg.sender.0)));
    push(
        &mut p,
        "receivers",
        Value::Array(msg.receivers.iter().map(|r| f64::from(r.0)).collect()),
    );
    push(&mut p, "payload", Value::Entries(msg.payload.clone()));
    p
}

fn encode_client(c: &ClientSnap) -> Payload {
    let mut p = Payload::new();
    push(&mut p, "full", encode_params(&c.full));
    if let Some(local) = &c.local {
        push(&mut p, "local", encode_params(local));
    }
    push(&mut p, "send_count", count(c.send_count));
    push(&mut p, "cfg_count", count(c.cfg_count));
    push(&mut p, "reply_count", count(c.reply_count));
    push(&mut p, "train_count", count(c.train_count));
    p
}

fn indexed(items: impl Iterator<Item = Payload>) -> Value {
    let mut p = Payload::new();
    for (i, item) in items.enumerate() {
        push(&mut p, &i.to_string(), Value::Entries(item));
    }
    Value::Entries(p)
}

pub fn encode_checkpoint(s: &Snapshot) -> Payload {
    let mut p = Payload::new();
    push(&mut p, "schema", count(SNAPSHOT_SCHEMA));
    push(&mut p, "seed_lo", scalar(f64::from(s.seed as u32)));
    push(&mut p, "seed_hi", scalar(f64::from((s.seed >> 32) as u32)));
    push(&mut p, "clock", scalar(s.clock.seconds()));
    push(&mut p, "next_seq", count(s.next_seq));
    push(&mut p, "popped", count(s.popped));
    push(&mut p, "version", count(s.version));
    push(
        &mut p,
        "round_started_at",
        scalar(s.round_started_at.seconds()),
    );
    push(&mut p, "deadline", scalar(s.deadline.seconds()));
    push(&mut p, "timer_gen", count(s.timer_gen));
    push(
        &mut p,
        "budget_extended",
        scalar(f64::from(u8::from(s.budget_extended))),
    );
    push(&mut p, "empty_restarts", count(u64::from(s.empty_restarts)));
    push(&mut p, "received", count(s.received));
    push(&mut p, "contributed", count(s.contributed));
    push(&mut p, "dropped", count(s.dropped));
    push(&mut p, "sample_count", count(s.sample_count));
    // Exact bits matter here: the loss can be +inf before the first eval.
    push(&mut p, "best_val_loss", scalar(s.best_val_loss));
    push(&mut p, "evals_since_improve", count(s.evals_since_improve));
    let last = s.last_eval_version.map_or(-1.0, |v| v as f64);
    push(&mut p, "last_eval_version", scalar(last));
    push(&mut p, "global", encode_params(&s.global_params));
    push(&mut p, "in_flight", ids(&s.in_flight));
    push(&mut p, "ever_sampled", ids(&s.ever_sampled));
    push(&mut p, "joined", ids(&s.joined));
    {
        let mut counts = Payload::new();
        for (id, n) in &s.agg_count {
            push(&mut counts, &id.0.to_string(), count(*n));
        }
        push(&mut p, "agg_count", Value::Entries(counts));
    }
    push(
        &mut p,
        "buffer",
        indexed(s.buffer.iter().map(encode_update)),
    );
    push(
        &mut p,
        "queue",
        indexed(s.queue.iter().map(|(t, seq, m)| encode_entry(*t, *seq, m))),
    );
    push(
        &mut p,
        "clients",
        indexed(s.clients.iter().map(encode_client)),
    );
    p
}

struct Reader<'a> {
    p: &'a Payload,
}

impl<'a> Reader<'a> {
    fn scalar(&self, name: &str) -> Result<f64, FedCoreError> {
        self.p
            .scalar(name)
            .ok_or_else(|| FedCoreError::Checkpoint(format!("missing scalar `{name}`")))
    }

    fn count(&self, name: &str) -> Result<u64, FedCoreError> {
        let x = self.scalar(name)?;
        if x < 0.0 || x.fract() != 0.0 || x >= MAX_EXACT as f64 {
            return Err(FedCoreError::Checkpoint(format!(
                "field `{name}` is not a counter: {x}"
            )));
        }
        Ok(x as u64)
    }

    fn time(&self, name: &str) -> Result<VirtualTime, FedCoreError> {
        VirtualTime::new(self.scalar(name)?)
            .map_err(|e| FedCoreError::Checkpoint(format!("field `{name}`: {e}")))
    }

    fn array(&self, name: &str) -> Result<&'a [f64], FedCoreError> {
        self.p
            .array(name)
            .ok_or_else(|| FedCoreError::Checkpoint(format!("missing array `{name}`")))
    }

    fn nested(&self, name: &str) -> Result<Reader<'a>, FedCoreError> {
        let p = self
            .p
            .nested(name)
            .ok_or_else(|| FedCoreError::Checkpoint(format!("missing entries `{name}`")))?;
        Ok(Reader { p })
    }

    fn params(&self, name: &str) -> Result<ParamVector, FedCoreError> {
        let inner = self.nested(name)?;
        ParamVector::from_payload(inner.p)
            .map_err(|e| FedCoreError::Checkpoint(format!("field `{name}`: {e}")))
    }

    fn id_set(&self, name: &str) -> Result<BTreeSet<ParticipantId>, FedCoreError> {
        id_list(self.array(name)?, name).map(|v| v.into_iter().collect())
    }

    fn items(&self) -> impl Iterator<Item = &'a Payload> {
        self.p.entries().iter().filter_map(|(_, v)| match v {
            Value::Entries(p) => Some(p),
            _ => None,
        })
    }
}

fn id_list(raw: &[f64], what: &str) -> Result<Vec<ParticipantId>, FedCoreError> {
    raw.iter()
        .map(|&x| {
            if x < 0.0 || x.fract() != 0.0 || x > f64::from(u32::MAX) {
                return Err(FedCoreError::Checkpoint(format!(
                    "`{what}` holds a non-id value {x}"
                )));
            }
            Ok(ParticipantId(x as u32))
        })
        .collect()
}

fn decode_string(raw: &[f64], what: &str) -> Result<String, FedCoreError> {
    let bytes: Result<Vec<u8>, _> = raw
        .iter()
        .map(|&x| {
            if x < 0.0 || x.fract() != 0.0 || x > 255.0 {
                Err(FedCoreError::Checkpoint(format!(
                    "`{what}` holds a non-byte value {x}"
                )))
            } else {
                Ok(x as u8)
            }
        })
        .collect();
    String::from_utf8(bytes?)
        .map_err(|_| FedCoreError::Checkpoint(format!("`{what}` is not utf-8")))
}

fn decode_update(r: &Reader) -> Result<Update, FedCoreError> {
    Ok(Update {
        client: ParticipantId(r.count("client")? as u32),
        delta: r.params("delta")?,
        num_samples: r.count("num_samples")?,
        model_version: r.count("model_version")?,
        staleness: r.count("staleness")?,
        received_at: r.time("received_at")?,
    })
}

fn decode_entry(r: &Reader) -> Result<(VirtualTime, u64, Message), FedCoreError> {
    let t = r.time("t")?;
    let seq = r.count("seq")?;
    let msg_type = decode_string(r.array("type")?, "type")?;
    let sender = ParticipantId(r.count("sender")? as u32);
    let receivers = id_list(r.array("receivers")?, "receivers")?;
    let payload = r.nested("payload")?.p.clone();
    if receivers.is_empty() {
        return Err(FedCoreError::Checkpoint(format!(
            "queued `{msg_type}` has no receivers"
        )));
    }
    let msg = Message {
        msg_type,
        sender,
        receivers,
        timestamp: t,
        payload,
    };
    Ok((t, seq, msg))
}

fn decode_client(r: &Reader) -> Result<ClientSnap, FedCoreError> {
    Ok(ClientSnap {
        full: r.params("full")?,
        local: match r.p.nested("local") {
            Some(_) => Some(r.params("local")?),
            None => None,
        },
        send_count: r.count("send_count")?,
        cfg_count: r.count("cfg_count")?,
        reply_count: r.count("reply_count")?,
        train_count: r.count("train_count")?,
    })
}

pub fn decode_checkpoint(p: &Payload) -> Result<Snapshot, FedCoreError> {
    let r = Reader { p };
    let schema = r.count("schema")?;
    if schema != SNAPSHOT_SCHEMA {
        return Err(FedCoreError::Checkpoint(format!(
            "snapshot schema {schema} unsupported (want {SNAPSHOT_SCHEMA})"
        )));
    }
    let seed_lo = r.count("seed_lo")?;
    let seed_hi = r.count("seed_hi")?;
    if seed_lo > u64::from(u32::MAX) || seed_hi > u64::from(u32::MAX) {
        return Err(FedCoreError::Checkpoint("seed halves out of range".into()));
    }
    let seed = (seed_hi << 32) | seed_lo;

    let last = r.scalar("last_eval_version")?;
    let last_eval_version = if last < 0.0 { None } else { Some(last as u64) };

    let mut agg_count = BTreeMap::new();
    for (name, v) in r.nested("agg_count")?.p.entries() {
        let id: u32 = name
            .parse()
            .map_err(|_| FedCoreError::Checkpoint(format!("bad agg_count id `{name}`")))?;
        match v {
            Value::Scalar(x) if *x >= 0.0 && x.fract() == 0.0 => {
                agg_count.insert(ParticipantId(id), *x as u64);
            }
            _ => {
                return Err(FedCoreError::Checkpoint(format!(
                    "bad agg_count value for `{name}`"
                )));
            }
        }
    }

    let buffer = r
        .nested("buffer")?
        .items()
        .map(|p| decode_update(&Reader { p }))
        .collect::<Result<Vec<_>, _>>()?;
    let queue = r
        .nested("queue")?
        .items()
        .map(|p| decode_entry(&Reader { p }))
        .collect::<Result<Vec<_>, _>>()?;
    let clients = r
        .nested("clients")?
        .items()
        .map(|p| decode_client(&Reader { p }))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(Snapshot {
        seed,
        clock: r.time("clock")?,
        next_seq: r.count("next_seq")?,
        popped: r.count("popped")?,
        queue,
        version: r.count("version")?,
        global_params: r.params("global")?,
        buffer,
        in_flight: r.id_set("in_flight")?,
        ever_sampled: r.id_set("ever_sampled")?,
        joined: r.id_set("joined")?,
        agg_count,
        round_started_at: r.time("round_started_at")?,
        deadline: r.time("deadline")?,
        timer_gen: r.count("timer_gen")?,
        budget_extended: r.count("budget_extended")? != 0,
        empty_restarts: r.count("empty_restarts")? as u32,
        received: r.count("received")?,
        contributed: r.count("contributed")?,
        dropped: r.count("dropped")?,
        sample_count: r.count("sample_count")?,
        best_val_loss: r.scalar("best_val_loss")?,
        evals_since_improve: r.count("evals_since_improve")?,
        last_eval_version,
        clients,
    })
}
