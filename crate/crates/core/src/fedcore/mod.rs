//! Server and client actors, aggregation triggers, broadcast manners,
//! client sampling, and the staleness policy: the asynchronous design
//! space, driven over the virtual-time event queue.

mod checkpoint;
mod engine;
mod sampler;
mod world;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, Snapshot};
pub use engine::{
    resume_course, resume_course_with_checkpoint, run_course, run_course_final_snapshot,
    run_course_with_checkpoint, ClientEvalRow, CourseOutcome, EndReason,
};
pub use sampler::sample_clients;
#[cfg(test)]
pub(crate) use world::small_spec;
pub use world::{course_registry, World};

use crate::datasynth::DataError;
use crate::learnkit::{LearnError, TrainerConfig};
use crate::msgflow::{MsgFlowError, ParticipantId};
use crate::runlog::RunLogError;
use crate::simnet::{SimNetError, VirtualTime};

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum FedCoreError {
    #[error("invalid strategy: {0}")]
    Config(String),
    #[error("update from unknown client {client}")]
    Protocol { client: u32 },
    #[error("requested {requested} clients but only {idle} are idle")]
    InsufficientClients { requested: usize, idle: usize },
    #[error("course stalled: no feedback after {restarts} round restarts")]
    CourseStalled { restarts: u32 },
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sim(#[from] SimNetError),
    #[error(transparent)]
    Flow(#[from] MsgFlowError),
    #[error(transparent)]
    Codec(#[from] crate::msgflow::DecodeError),
    #[error(transparent)]
    Log(#[from] RunLogError),
}

/// When the server moves a round forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trigger {
    /// Wait for every in-flight client.
    AllReceived,
    /// Aggregate once `goal` updates are buffered.
    GoalAchieved { goal: usize },
    /// Aggregate when the round's virtual budget expires, given at least
    /// `min_feedback` buffered updates; otherwise take remedial action.
    TimeUp {
        budget: VirtualTime,
        min_feedback: usize,
    },
}

/// When the server broadcasts the current model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manner {
    /// To a fresh sample after each aggregation.
    AfterAggregating,
    /// To one idle client immediately upon each received update.
    AfterReceiving,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Uniform,
    /// Inclusion weight proportional to speed score.
    ResponsivenessRelated,
    /// Speed-quantile buckets visited round-robin by server version.
    Grouped {
        num_groups: usize,
    },
}

/// Staleness discount shape; both choices are 1 at zero and non-increasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discount {
    /// weight(tau) = 1 / (1 + tau).
    Reciprocal,
    /// weight(tau) = 1 for every accepted update.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StalenessPolicy {
    pub tau_max: u64,
    pub discount: Discount,
}

impl StalenessPolicy {
    /// Aggregation weight multiplier for staleness `tau`; zero past the cap.
    pub fn weight(&self, tau: u64) -> f64 {
        if tau > self.tau_max {
            return 0.0;
        }
        match self.discount {
            Discount::Reciprocal => 1.0 / (1.0 + tau as f64),
            Discount::None => 1.0,
        }
    }
}

/// The full strategy axis of a course.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyConfig {
    pub trigger: Trigger,
    pub manner: Manner,
    pub sampler: SamplerKind,
    pub staleness: StalenessPolicy,
    /// Clients training simultaneously, before over-selection.
    pub concurrency: usize,
    /// Extra fraction sampled beyond `concurrency` for synchronous rounds.
    pub over_selection_extra: f64,
}

impl StrategyConfig {
    /// Sample size per synchronous round: `ceil(concurrency * (1 + extra))`.
    pub fn effective_concurrency(&self) -> usize {
        (self.concurrency as f64 * (1.0 + self.over_selection_extra)).ceil() as usize
    }

    pub fn validate(&self, num_clients: usize) -> Result<(), FedCoreError> {
        if self.concurrency == 0 {
            return Err(FedCoreError::Config("concurrency must be >= 1".into()));
        }
        if self.over_selection_extra < 0.0 || !self.over_selection_extra.is_finite() {
            return Err(FedCoreError::Config(
                "over_selection_extra must be a finite fraction >= 0".into(),
            ));
        }
        if self.effective_concurrency() > num_clients {
            return Err(FedCoreError::Config(format!(
                "effective concurrency {} exceeds the {} available clients",
                self.effective_concurrency(),
                num_clients
            )));
        }
        if self.over_selection_extra > 0.0 {
            let sync_trigger = matches!(
                self.trigger,
                Trigger::AllReceived | Trigger::GoalAchieved { .. }
            );
            if !sync_trigger || self.manner == Manner::AfterReceiving {
                return Err(FedCoreError::Config(
                    "over-selection applies only to synchronous after-aggregating rounds".into(),
                ));
            }
        }
        match self.trigger {
            Trigger::AllReceived => {
                if self.manner == Manner::AfterReceiving {
                    return Err(FedCoreError::Config(
                        "all-received trigger never fires under after-receiving broadcasts".into(),
                    ));
                }
            }
            Trigger::GoalAchieved { goal } => {
                if goal == 0 || goal > self.effective_concurrency() {
                    return Err(FedCoreError::Config(format!(
                        "aggregation goal {goal} outside 1..={}",
                        self.effective_concurrency()
                    )));
                }
            }
            Trigger::TimeUp {
                budget,
                min_feedback,
            } => {
                if budget <= VirtualTime::ZERO {
                    return Err(FedCoreError::Config("time budget must be positive".into()));
                }
                if min_feedback == 0 || min_feedback > self.effective_concurrency() {
                    return Err(FedCoreError::Config(format!(
                        "min_feedback {min_feedback} outside 1..={}",
                        self.effective_concurrency()
                    )));
                }
            }
        }
        if let SamplerKind::Grouped { num_groups } = self.sampler {
            if num_groups == 0 || num_groups > num_clients {
                return Err(FedCoreError::Config(format!(
                    "num_groups {num_groups} outside 1..={num_clients}"
                )));
            }
        }
        Ok(())
    }

    /// Log name, e.g. `Sync-vanilla`, `Sync-OS`, `Async-Goal-Rece-Unif`.
    pub fn name(&self) -> String {
        match self.trigger {
            Trigger::AllReceived => {
                if self.over_selection_extra > 0.0 {
                    return "Sync-OS".into();
                }
                return "Sync-vanilla".into();
            }
            Trigger::GoalAchieved { .. } if self.over_selection_extra > 0.0 => {
                return "Sync-OS".into();
            }
            _ => {}
        }
        let trigger = match self.trigger {
            Trigger::GoalAchieved { .. } => "Goal",
            Trigger::TimeUp { .. } => "Time",
            Trigger::AllReceived => unreachable!("handled above"),
        };
        let manner = match self.manner {
            Manner::AfterAggregating => "Aggr",
            Manner::AfterReceiving => "Rece",
        };
        let sampler = match self.sampler {
            SamplerKind::Uniform => "Unif",
            SamplerKind::ResponsivenessRelated => "Resp",
            SamplerKind::Grouped { .. } => "Group",
        };
        format!("Async-{trigger}-{manner}-{sampler}")
    }
}

/// One client contribution as buffered by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub client: ParticipantId,
    pub delta: crate::learnkit::ParamVector,
    pub num_samples: u64,
    /// Server version the client trained from.
    pub model_version: u64,
    /// Versions elapsed while the client trained, fixed at buffering time.
    /// The buffer is consumed before the version moves again, so this equals
    /// the staleness at aggregation.
    pub staleness: u64,
    pub received_at: VirtualTime,
}

/// Mutable server half of a course.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub version: u64,
    pub global_params: crate::learnkit::ParamVector,
    pub buffer: Vec<Update>,
    pub in_flight: BTreeSet<ParticipantId>,
    pub ever_sampled: BTreeSet<ParticipantId>,
    pub round_started_at: VirtualTime,
    pub agg_count: BTreeMap<ParticipantId, u64>,
}

/// The aggregation decision after an arrival or a budget expiry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    No,
    Yes,
    Remedial,
}

/// Trigger evaluation against the current buffer and clock. `deadline` is
/// the round's current expiry, which a remedial extension may have pushed
/// past `round_started_at + budget`; it is ignored by the other triggers.
pub fn should_aggregate(
    trigger: &Trigger,
    buffered: usize,
    in_flight: usize,
    deadline: VirtualTime,
    now: VirtualTime,
) -> Decision {
    match *trigger {
        Trigger::AllReceived => {
            if in_flight == 0 && buffered > 0 {
                Decision::Yes
            } else {
                Decision::No
            }
        }
        Trigger::GoalAchieved { goal } => {
            if buffered >= goal {
                Decision::Yes
            } else {
                Decision::No
            }
        }
        Trigger::TimeUp { min_feedback, .. } => {
            if now < deadline {
                Decision::No
            } else if buffered >= min_feedback {
                Decision::Yes
            } else {
                Decision::Remedial
            }
        }
    }
}

/// How the synthetic pool is built and split across clients.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub n_total: usize,
    pub separation: f64,
    pub partition: PartitionKind,
    /// Pool fractions held out for the server's validation and test splits.
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Classes owned exclusively by slow clients; empty disables coupling.
    pub rare_labels: Vec<usize>,
    pub slow_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionKind {
    Iid,
    Dirichlet { alpha: f64 },
}

/// Client latency population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySpec {
    pub comp_mean: f64,
    pub comm_mean: f64,
    /// Lognormal shape; zero makes every draw deterministic.
    pub sigma: f64,
    pub kind: LatencyKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatencyKind {
    /// Every client shares the same means.
    Homogeneous,
    /// Per-client mean multipliers log-uniform over [1/sqrt(s), sqrt(s)],
    /// an `s`-fold spread between the extremes.
    LogSpread { spread: f64 },
    /// The last `floor(slow_fraction * M)` clients run `slow_factor` times
    /// slower than the rest.
    TwoPoint {
        slow_fraction: f64,
        slow_factor: f64,
    },
}

/// Everything a course needs; worlds rebuild deterministically from this.
#[derive(Debug, Clone, PartialEq)]
pub struct CourseSpec {
    pub seed: u64,
    pub num_clients: usize,
    pub data: DataSpec,
    pub trainer: TrainerConfig,
    pub strategy: StrategyConfig,
    pub latency: LatencySpec,
    /// Evaluate every `eval_cadence` aggregations (plus start and end).
    pub eval_cadence: u64,
    pub max_rounds: u64,
    /// Stop after this many evaluations without validation improvement.
    pub patience: Option<u64>,
    /// Fraction of clients whose outgoing deltas receive Gaussian noise.
    pub dp_noisy_fraction: f64,
    pub dp_sigma: f64,
    /// Per-client trainer candidates; empty disables the assignment hook.
    pub candidates: Vec<TrainerConfig>,
    /// Weight contributions equally instead of by sample count.
    pub uniform_weights: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_strategy() -> StrategyConfig {
        StrategyConfig {
            trigger: Trigger::AllReceived,
            manner: Manner::AfterAggregating,
            sampler: SamplerKind::Uniform,
            staleness: StalenessPolicy {
                tau_max: 0,
                discount: Discount::Reciprocal,
            },
            concurrency: 4,
            over_selection_extra: 0.0,
        }
    }

    #[test]
    fn staleness_weights_follow_the_policy() {
        let p = StalenessPolicy {
            tau_max: 3,
            discount: Discount::Reciprocal,
        };
        assert_eq!(p.weight(0), 1.0);
        assert_eq!(p.weight(1), 0.5);
        assert_eq!(p.weight(3), 0.25);
        assert_eq!(p.weight(4), 0.0);
        // Non-increasing across the whole accepted range.
        for tau in 0..3 {
            assert!(p.weight(tau + 1) <= p.weight(tau));
        }
        let flat = StalenessPolicy {
            tau_max: 2,
            discount: Discount::None,
        };
        assert_eq!(flat.weight(0), 1.0);
        assert_eq!(flat.weight(2), 1.0);
        assert_eq!(flat.weight(3), 0.0);
    }

    #[test]
    fn effective_concurrency_rounds_up() {
        let mut s = base_strategy();
        s.concurrency = 10;
        s.over_selection_extra = 0.3;
        assert_eq!(s.effective_concurrency(), 13);
        s.concurrency = 3;
        assert_eq!(s.effective_concurrency(), 4); // ceil(3.9)
        s.over_selection_extra = 0.0;
        assert_eq!(s.effective_concurrency(), 3);
    }

    #[test]
    fn validation_rejects_bad_combinations() {
        let mut s = base_strategy();
        assert!(s.validate(10).is_ok());

        s.concurrency = 0;
        assert!(s.validate(10).is_err());
        s.concurrency = 11;
        assert!(s.validate(10).is_err());
        s.concurrency = 4;

        s.trigger = Trigger::GoalAchieved { goal: 5 };
        assert!(s.validate(10).is_err(), "goal above concurrency");
        s.over_selection_extra = 0.3; // effective 6
        assert!(s.validate(10).is_ok(), "goal within over-selected sample");
        s.manner = Manner::AfterReceiving;
        assert!(
            s.validate(10).is_err(),
            "over-selection is synchronous only"
        );
        s.manner = Manner::AfterAggregating;
        s.over_selection_extra = 0.0;
        s.trigger = Trigger::GoalAchieved { goal: 0 };
        assert!(s.validate(10).is_err());

        s.trigger = Trigger::TimeUp {
            budget: VirtualTime::ZERO,
            min_feedback: 1,
        };
        assert!(s.validate(10).is_err(), "zero budget");
        s.trigger = Trigger::TimeUp {
            budget: VirtualTime::new(5.0).unwrap(),
            min_feedback: 5,
        };
        assert!(s.validate(10).is_err(), "min_feedback above concurrency");
        s.over_selection_extra = 0.5;
        assert!(s.validate(10).is_err(), "over-selection with time trigger");
        s.over_selection_extra = 0.0;

        s.trigger = Trigger::AllReceived;
        s.manner = Manner::AfterReceiving;
        assert!(
            s.validate(10).is_err(),
            "all-received needs after-aggregating"
        );
        s.manner = Manner::AfterAggregating;
        s.sampler = SamplerKind::Grouped { num_groups: 0 };
        assert!(s.validate(10).is_err());
        s.sampler = SamplerKind::Grouped { num_groups: 11 };
        assert!(s.validate(10).is_err());
        s.sampler = SamplerKind::Grouped { num_groups: 2 };
        assert!(s.validate(10).is_ok());
    }

    #[test]
    fn strategy_names_follow_the_scheme() {
        let mut s = base_strategy();
        assert_eq!(s.name(), "Sync-vanilla");

        s.trigger = Trigger::GoalAchieved { goal: 4 };
        s.over_selection_extra = 0.3;
        assert_eq!(s.name(), "Sync-OS");

        s.over_selection_extra = 0.0;
        assert_eq!(s.name(), "Async-Goal-Aggr-Unif");

        s.manner = Manner::AfterReceiving;
        s.sampler = SamplerKind::ResponsivenessRelated;
        assert_eq!(s.name(), "Async-Goal-Rece-Resp");

        s.trigger = Trigger::TimeUp {
            budget: VirtualTime::new(10.0).unwrap(),
            min_feedback: 1,
        };
        s.sampler = SamplerKind::Grouped { num_groups: 3 };
        assert_eq!(s.name(), "Async-Time-Rece-Group");
    }

    #[test]
    fn trigger_decisions_by_hand() {
        let deadline = VirtualTime::new(10.0).unwrap();
        let now = VirtualTime::new(10.0).unwrap();

        let all = Trigger::AllReceived;
        assert_eq!(should_aggregate(&all, 3, 1, deadline, now), Decision::No);
        assert_eq!(should_aggregate(&all, 4, 0, deadline, now), Decision::Yes);
        assert_eq!(should_aggregate(&all, 0, 0, deadline, now), Decision::No);

        let goal = Trigger::GoalAchieved { goal: 40 };
        assert_eq!(
            should_aggregate(&goal, 40, 60, deadline, now),
            Decision::Yes
        );
        assert_eq!(should_aggregate(&goal, 39, 61, deadline, now), Decision::No);

        let time = Trigger::TimeUp {
            budget: VirtualTime::new(10.0).unwrap(),
            min_feedback: 5,
        };
        let early = VirtualTime::new(9.0).unwrap();
        assert_eq!(should_aggregate(&time, 3, 7, deadline, early), Decision::No);
        assert_eq!(
            should_aggregate(&time, 3, 7, deadline, now),
            Decision::Remedial
        );
        assert_eq!(should_aggregate(&time, 5, 5, deadline, now), Decision::Yes);
    }
}
