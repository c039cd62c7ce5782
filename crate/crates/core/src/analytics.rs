//! Post-run measurement over stored run logs: time-to-target, contribution
//! and staleness distributions, and client-wise statistics. Everything here
//! is a pure function of the log text, so analysing a stored run twice
//! gives byte-identical output.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde_json::json;
use thiserror::Error;

use crate::runlog::{read_records, Record, RunLogError};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error(transparent)]
    Log(#[from] RunLogError),
    #[error("log does not reconcile: {0}")]
    Reconciliation(String),
    #[error("{0}")]
    Input(String),
}

/// One evaluation of the global model at a virtual instant.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub t: f64,
    pub round: u64,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// A parsed run log with typed accessors over its records.
pub struct RunView {
    records: Vec<Record>,
}

impl RunView {
    pub fn from_text(text: &str) -> Result<Self, AnalyticsError> {
        Ok(RunView {
            records: read_records(text)?,
        })
    }

    pub fn from_records(records: Vec<Record>) -> Self {
        RunView { records }
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn strategy(&self) -> Option<&str> {
        self.records.iter().find_map(|r| match r {
            Record::Meta { strategy, .. } => Some(strategy.as_str()),
            _ => None,
        })
    }

    pub fn eval_points(&self, split: &str) -> Vec<EvalPoint> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Eval {
                    t,
                    round,
                    split: s,
                    loss,
                    accuracy,
                } if s == split => Some(EvalPoint {
                    t: *t,
                    round: *round,
                    split: s.clone(),
                    loss: *loss,
                    accuracy: *accuracy,
                }),
                _ => None,
            })
            .collect()
    }

    fn end(&self) -> Option<&Record> {
        self.records
            .iter()
            .rev()
            .find(|r| matches!(r, Record::End { .. }))
    }
}

/// Earliest evaluation timestamp at which the split's accuracy reaches the
/// target; no interpolation between evaluation points.
pub fn time_to_target(view: &RunView, split: &str, target_acc: f64) -> Option<f64> {
    view.eval_points(split)
        .iter()
        .find(|p| p.accuracy.is_some_and(|a| a >= target_acc))
        .map(|p| p.t)
}

/// Per-client effective contribution counts plus the histogram over them.
/// A client sampled at least once but never present in an aggregation has
/// count zero; dropped updates never count.
#[derive(Debug, Clone, PartialEq)]
pub struct AggCountDistribution {
    pub per_client: BTreeMap<u32, u64>,
    pub histogram: BTreeMap<u64, u64>,
    pub normalized: BTreeMap<u64, f64>,
}

pub fn agg_count_distribution(view: &RunView) -> AggCountDistribution {
    let mut per_client: BTreeMap<u32, u64> = BTreeMap::new();
    for r in view.records() {
        match r {
            Record::Sample { clients, .. } => {
                for c in clients {
                    per_client.entry(*c).or_insert(0);
                }
            }
            Record::Agg { contributors, .. } => {
                for c in contributors {
                    *per_client.entry(*c).or_insert(0) += 1;
                }
            }
            _ => {}
        }
    }
    let mut histogram: BTreeMap<u64, u64> = BTreeMap::new();
    for count in per_client.values() {
        *histogram.entry(*count).or_insert(0) += 1;
    }
    let total = per_client.len() as f64;
    let normalized = histogram
        .iter()
        .map(|(&count, &n)| (count, n as f64 / total))
        .collect();
    AggCountDistribution {
        per_client,
        histogram,
        normalized,
    }
}

/// Histogram over staleness at aggregation, one sample per contributing
/// update; drops are excluded and tallied separately.
#[derive(Debug, Clone, PartialEq)]
pub struct StalenessDistribution {
    pub histogram: BTreeMap<u64, u64>,
    pub dropped: u64,
}

impl StalenessDistribution {
    pub fn mean(&self) -> Option<f64> {
        let n: u64 = self.histogram.values().sum();
        if n == 0 {
            return None;
        }
        let sum: f64 = self
            .histogram
            .iter()
            .map(|(&tau, &count)| tau as f64 * count as f64)
            .sum();
        Some(sum / n as f64)
    }
}

pub fn staleness_distribution(view: &RunView) -> StalenessDistribution {
    let mut histogram: BTreeMap<u64, u64> = BTreeMap::new();
    let mut dropped = 0;
    for r in view.records() {
        match r {
            Record::Agg { staleness, .. } => {
                for tau in staleness {
                    *histogram.entry(*tau).or_insert(0) += 1;
                }
            }
            Record::Drop { .. } => dropped += 1,
            _ => {}
        }
    }
    StalenessDistribution { histogram, dropped }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientStats {
    pub mean: f64,
    pub quantile: f64,
    pub std: f64,
}

/// Mean, nearest-rank q-quantile, and population standard deviation over a
/// per-client metric.
pub fn clientwise_stats(
    per_client: &BTreeMap<u32, f64>,
    q: f64,
) -> Result<ClientStats, AnalyticsError> {
    if per_client.is_empty() {
        return Err(AnalyticsError::Input("no client values".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(AnalyticsError::Input(format!(
            "quantile level {q} is outside (0, 1)"
        )));
    }
    let mut values: Vec<f64> = per_client.values().copied().collect();
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let rank = (q * n as f64).ceil() as usize;
    let quantile = values[rank.clamp(1, n) - 1];
    Ok(ClientStats {
        mean,
        quantile,
        std: var.sqrt(),
    })
}

/// End-of-run totals cross-checked against the raw records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Totals {
    pub received: u64,
    pub contributed: u64,
    pub dropped: u64,
    pub unconsumed: u64,
}

/// Verifies update conservation: the end record's totals must match both
/// each other and a recount of the buffered/dropped/aggregated records.
pub fn reconcile(view: &RunView) -> Result<Totals, AnalyticsError> {
    let end = view
        .end()
        .ok_or_else(|| AnalyticsError::Reconciliation("log has no end record".into()))?;
    let (received, contributed, dropped, unconsumed) = match end {
        Record::End {
            received,
            contributed,
            dropped,
            unconsumed,
            ..
        } => (*received, *contributed, *dropped, *unconsumed),
        _ => unreachable!(),
    };
    if received != contributed + dropped + unconsumed {
        return Err(AnalyticsError::Reconciliation(format!(
            "end record claims {received} received vs {contributed} + {dropped} + {unconsumed}"
        )));
    }
    let mut buffered = 0;
    let mut drops = 0;
    let mut agg_updates = 0;
    for r in view.records() {
        match r {
            Record::Buffered { .. } => buffered += 1,
            Record::Drop { .. } => drops += 1,
            Record::Agg { contributors, .. } => agg_updates += contributors.len() as u64,
            _ => {}
        }
    }
    if drops != dropped {
        return Err(AnalyticsError::Reconciliation(format!(
            "{drops} drop records vs {dropped} claimed"
        )));
    }
    if buffered != contributed + unconsumed {
        return Err(AnalyticsError::Reconciliation(format!(
            "{buffered} buffered records vs {contributed} contributed + {unconsumed} unconsumed"
        )));
    }
    if agg_updates != contributed {
        return Err(AnalyticsError::Reconciliation(format!(
            "{agg_updates} aggregated updates vs {contributed} contributed"
        )));
    }
    Ok(Totals {
        received,
        contributed,
        dropped,
        unconsumed,
    })
}

/// Plot-ready CSV tables plus a compact JSON summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub evals_csv: String,
    pub agg_counts_csv: String,
    pub staleness_csv: String,
    pub clientwise_csv: String,
    pub summary_json: String,
}

pub fn render_report(
    view: &RunView,
    target_accuracy: Option<f64>,
) -> Result<Report, AnalyticsError> {
    let totals = reconcile(view)?;

    let mut evals_csv = String::from("t,round,split,loss,accuracy\n");
    for r in view.records() {
        if let Record::Eval {
            t,
            round,
            split,
            loss,
            accuracy,
        } = r
        {
            let acc = accuracy.map(|a| a.to_string()).unwrap_or_default();
            writeln!(evals_csv, "{t},{round},{split},{loss},{acc}").unwrap();
        }
    }

    let agg = agg_count_distribution(view);
    let mut agg_counts_csv = String::from("client,count\n");
    for (client, count) in &agg.per_client {
        writeln!(agg_counts_csv, "{client},{count}").unwrap();
    }

    let stale = staleness_distribution(view);
    let mut staleness_csv = String::from("staleness,count\n");
    for (tau, count) in &stale.histogram {
        writeln!(staleness_csv, "{tau},{count}").unwrap();
    }

    let mut clientwise_csv = String::from("client,loss,accuracy,count\n");
    let mut per_client_acc = BTreeMap::new();
    for r in view.records() {
        if let Record::ClientEval {
            client,
            loss,
            accuracy,
            count,
            ..
        } = r
        {
            let acc = accuracy.map(|a| a.to_string()).unwrap_or_default();
            writeln!(clientwise_csv, "{client},{loss},{acc},{count}").unwrap();
            if let Some(a) = accuracy {
                per_client_acc.insert(*client, *a);
            }
        }
    }
    let clientwise = if per_client_acc.is_empty() {
        None
    } else {
        Some(clientwise_stats(&per_client_acc, 0.9)?)
    };

    let (rounds, reason, finished_at) = match view.end() {
        Some(Record::End {
            rounds, reason, t, ..
        }) => (*rounds, reason.clone(), *t),
        _ => unreachable!("reconcile found the end record"),
    };
    let ttt = target_accuracy.map(|target| {
        json!({
            "target": target,
            "time": time_to_target(view, "test", target),
        })
    });
    let summary = json!({
        "strategy": view.strategy(),
        "rounds": rounds,
        "reason": reason,
        "finished_at": finished_at,
        "updates": {
            "received": totals.received,
            "contributed": totals.contributed,
            "dropped": totals.dropped,
            "unconsumed": totals.unconsumed,
        },
        "staleness": {
            "mean": stale.mean(),
            "dropped": stale.dropped,
        },
        "time_to_target": ttt,
        "clientwise_accuracy": clientwise.as_ref().map(|s| {
            json!({"mean": s.mean, "q90": s.quantile, "std": s.std})
        }),
    });
    Ok(Report {
        evals_csv,
        agg_counts_csv,
        staleness_csv,
        clientwise_csv,
        summary_json: serde_json::to_string_pretty(&summary).expect("summary serializes"),
    })
}
