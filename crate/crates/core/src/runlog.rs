//! JSON-lines run log: one self-describing record per line, identical bytes
//! for identical runs. The `kind` field discriminates record types so logs
//! stay readable with standard line tools.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bumped whenever a record shape changes incompatibly.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum RunLogError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One log line. Field order is serialization order, so it is part of the
/// byte-stability contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    /// First line of every log.
    Meta {
        schema: u32,
        strategy: String,
        seed: u64,
        num_clients: u32,
    },
    /// One registration-log entry, in registration order.
    Handler {
        event: String,
        handler: String,
        /// Previous handler id when this registration overwrote one.
        overwrote: Option<String>,
    },
    /// A delivered simulation event.
    Event {
        t: f64,
        seq: u64,
        msg_type: String,
        sender: u32,
        receivers: Vec<u32>,
        round: u64,
        extra: BTreeMap<String, serde_json::Value>,
    },
    /// Clients drawn for a broadcast.
    Sample {
        t: f64,
        round: u64,
        sampler: String,
        clients: Vec<u32>,
    },
    /// An update accepted into the aggregation buffer.
    Buffered {
        t: f64,
        round: u64,
        client: u32,
        staleness: u64,
        weight: f64,
        num_samples: u64,
    },
    /// An update rejected for excessive staleness.
    Drop {
        t: f64,
        round: u64,
        client: u32,
        staleness: u64,
        tau_max: u64,
    },
    /// One aggregation step, with the buffer it consumed.
    Agg {
        t: f64,
        round: u64,
        contributors: Vec<u32>,
        staleness: Vec<u64>,
        weights: Vec<f64>,
    },
    /// Global model evaluation on a held-out split.
    Eval {
        t: f64,
        round: u64,
        split: String,
        loss: f64,
        accuracy: Option<f64>,
    },
    /// Per-client evaluation of the model that client would deploy.
    ClientEval {
        round: u64,
        client: u32,
        loss: f64,
        accuracy: Option<f64>,
        count: u64,
    },
    /// Per-client trainer-configuration assignment for one round.
    CfgAssign {
        round: u64,
        client: u32,
        candidate: usize,
    },
    /// A remedial decision after a time budget expired.
    Remedial {
        t: f64,
        round: u64,
        action: String,
        buffer_size: u64,
    },
    /// Last line of every log, with update-conservation totals:
    /// `received == contributed + dropped + unconsumed`.
    End {
        t: f64,
        rounds: u64,
        reason: String,
        received: u64,
        contributed: u64,
        dropped: u64,
        unconsumed: u64,
    },
}

/// Serializes records as JSON lines.
pub struct RunLogWriter<W: Write> {
    out: W,
    lines: u64,
}

impl<W: Write> RunLogWriter<W> {
    pub fn new(out: W) -> Self {
        RunLogWriter { out, lines: 0 }
    }

    pub fn write(&mut self, record: &Record) -> Result<(), RunLogError> {
        let line = serde_json::to_string(record).expect("record serialization cannot fail");
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn flush(&mut self) -> Result<(), RunLogError> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Parses a whole log, reporting the 1-based line of the first bad record.
pub fn read_records(text: &str) -> Result<Vec<Record>, RunLogError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|source| RunLogError::Parse {
            line: i + 1,
            source,
        })?;
        records.push(record);
    }
    Ok(records)
}
