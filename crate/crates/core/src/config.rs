//! Experiment configuration: a TOML file with nested sections, every key
//! validated and defaulted, echoed back out so a run directory is
//! self-describing.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fedcore::{
    CourseSpec, DataSpec, Discount, LatencyKind, LatencySpec, Manner, PartitionKind, SamplerKind,
    StalenessPolicy, StrategyConfig, Trigger,
};
use crate::learnkit::{LossKind, ModelKind, TrainerConfig};
use crate::msgflow::{EventKind, HandlerDecl, Role};
use crate::simnet::VirtualTime;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config does not parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config key `{key}`: {problem}")]
    Invalid { key: &'static str, problem: String },
}

fn invalid(key: &'static str, problem: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        problem: problem.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "defaults::num_clients")]
    pub num_clients: usize,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub strategy: StrategySection,
    #[serde(default)]
    pub staleness: StalenessSection,
    #[serde(default)]
    pub latency: LatencySection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub termination: TerminationSection,
    #[serde(default)]
    pub dp: DpSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Per-client trainer candidates; each entry overrides step/rate/batch
    /// fields of `[trainer]`, never the architecture.
    #[serde(default)]
    pub candidate: Vec<CandidateSection>,
    /// Handler declarations registered over the built-in bindings, in file
    /// order. Overwrites are legal and logged; the resulting flow graph must
    /// still pass the completeness check before a course runs.
    #[serde(default)]
    pub handler: Vec<HandlerSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_classes: usize,
    pub dim: usize,
    pub n_total: usize,
    pub separation: f64,
    /// "iid" or "dirichlet".
    pub partition: String,
    pub alpha: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub rare_labels: Vec<usize>,
    pub slow_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            num_classes: 3,
            dim: 8,
            n_total: 1000,
            separation: 2.0,
            partition: "iid".into(),
            alpha: 0.5,
            val_fraction: 0.1,
            test_fraction: 0.1,
            rare_labels: vec![],
            slow_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub local_steps: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// "cross_entropy" or "squared_error".
    pub loss: String,
    /// "logistic", "quadratic", or "mlp".
    pub model: String,
    /// Hidden width, only meaningful for "mlp".
    pub hidden: usize,
    /// Parameter groups exchanged in federation; empty shares everything.
    pub share_list: Vec<String>,
    pub ditto_lambda: Option<f64>,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            local_steps: 4,
            learning_rate: 0.1,
            batch_size: 8,
            loss: "cross_entropy".into(),
            model: "logistic".into(),
            hidden: 16,
            share_list: vec![],
            ditto_lambda: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    /// "all_received", "goal", or "time".
    pub trigger: String,
    pub goal: usize,
    /// Virtual seconds per round under the "time" trigger.
    pub budget: f64,
    pub min_feedback: usize,
    /// "after_aggregating" or "after_receiving".
    pub manner: String,
    /// "uniform", "responsiveness", or "grouped".
    pub sampler: String,
    pub num_groups: usize,
    /// Clients training concurrently; 0 means every client.
    pub concurrency: usize,
    pub over_selection_extra: f64,
    pub uniform_weights: bool,
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection {
            trigger: "all_received".into(),
            goal: 1,
            budget: 10.0,
            min_feedback: 1,
            manner: "after_aggregating".into(),
            sampler: "uniform".into(),
            num_groups: 1,
            concurrency: 0,
            over_selection_extra: 0.0,
            uniform_weights: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StalenessSection {
    pub tau_max: u64,
    /// "reciprocal" or "none".
    pub discount: String,
}

impl Default for StalenessSection {
    fn default() -> Self {
        StalenessSection {
            tau_max: 0,
            discount: "reciprocal".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencySection {
    pub comp_mean: f64,
    pub comm_mean: f64,
    pub sigma: f64,
    /// "homogeneous", "log_spread", or "two_point".
    pub kind: String,
    pub spread: f64,
    pub slow_fraction: f64,
    pub slow_factor: f64,
}

impl Default for LatencySection {
    fn default() -> Self {
        LatencySection {
            comp_mean: 1.0,
            comm_mean: 0.1,
            sigma: 0.0,
            kind: "homogeneous".into(),
            spread: 10.0,
            slow_fraction: 0.1,
            slow_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub cadence: u64,
    pub target_accuracy: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            cadence: 1,
            target_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminationSection {
    pub max_rounds: u64,
    pub patience: Option<u64>,
}

impl Default for TerminationSection {
    fn default() -> Self {
        TerminationSection {
            max_rounds: 10,
            patience: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpSection {
    pub noisy_client_fraction: f64,
    pub sigma: f64,
}

impl Default for DpSection {
    fn default() -> Self {
        DpSection {
            noisy_client_fraction: 0.0,
            sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
    pub log_level: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "runs".into(),
            log_level: "info".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSection {
    pub local_steps: Option<u32>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub ditto_lambda: Option<f64>,
}

/// One handler declaration. `event` is "message:<msg_type>" or
/// "condition:<name>"; consumes/produces describe the declared message I/O
/// the completeness checker reasons over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandlerSection {
    pub event: String,
    pub id: String,
    pub role: Role,
    #[serde(default)]
    pub consumes: Vec<String>,
    #[serde(default)]
    pub produces: Vec<String>,
}

impl HandlerSection {
    fn to_binding(&self) -> Result<(EventKind, HandlerDecl), ConfigError> {
        let event = match self.event.split_once(':') {
            Some(("message", m)) if !m.is_empty() => EventKind::MessagePassing(m.to_string()),
            Some(("condition", c)) if !c.is_empty() => EventKind::ConditionCheck(c.to_string()),
            _ => {
                return Err(invalid(
                    "handler.event",
                    format!("`{}` is not message:<type> or condition:<name>", self.event),
                ))
            }
        };
        if self.id.is_empty() {
            return Err(invalid("handler.id", "must be non-empty"));
        }
        Ok((
            event,
            HandlerDecl {
                id: self.id.clone(),
                role: self.role,
                consumes: self.consumes.iter().cloned().collect(),
                produces: self.produces.iter().cloned().collect(),
            },
        ))
    }
}

impl ExperimentConfig {
    pub fn handler_overrides(&self) -> Result<Vec<(EventKind, HandlerDecl)>, ConfigError> {
        self.handler
            .iter()
            .map(HandlerSection::to_binding)
            .collect()
    }
}

/// A standalone handler-graph description: a file of `[[handler]]` tables.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    #[serde(default)]
    handler: Vec<HandlerSection>,
}

pub fn parse_graph(path: &Path) -> Result<Vec<(EventKind, HandlerDecl)>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_graph_str(&text)
}

pub fn parse_graph_str(text: &str) -> Result<Vec<(EventKind, HandlerDecl)>, ConfigError> {
    let file: GraphFile = toml::from_str(text)?;
    file.handler
        .iter()
        .map(HandlerSection::to_binding)
        .collect()
}

mod defaults {
    pub fn num_clients() -> usize {
        10
    }
}

/// Parses and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text)?;
    cfg.to_course_spec()?;
    Ok(cfg)
}

/// The effective config as TOML, defaults filled in.
pub fn render_effective(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}

impl ExperimentConfig {
    pub fn to_course_spec(&self) -> Result<CourseSpec, ConfigError> {
        let partition = match self.data.partition.as_str() {
            "iid" => PartitionKind::Iid,
            "dirichlet" => PartitionKind::Dirichlet {
                alpha: self.data.alpha,
            },
            other => return Err(invalid("data.partition", format!("unknown kind `{other}`"))),
        };
        let loss = match self.trainer.loss.as_str() {
            "cross_entropy" => LossKind::CrossEntropy,
            "squared_error" => LossKind::SquaredError,
            other => return Err(invalid("trainer.loss", format!("unknown loss `{other}`"))),
        };
        let model = match self.trainer.model.as_str() {
            "logistic" => ModelKind::Logistic,
            "quadratic" => ModelKind::Quadratic,
            "mlp" => ModelKind::Mlp {
                hidden: self.trainer.hidden,
            },
            other => return Err(invalid("trainer.model", format!("unknown model `{other}`"))),
        };
        let trigger = match self.strategy.trigger.as_str() {
            "all_received" => Trigger::AllReceived,
            "goal" => Trigger::GoalAchieved {
                goal: self.strategy.goal,
            },
            "time" => Trigger::TimeUp {
                budget: VirtualTime::new(self.strategy.budget)
                    .map_err(|e| invalid("strategy.budget", e.to_string()))?,
                min_feedback: self.strategy.min_feedback,
            },
            other => {
                return Err(invalid(
                    "strategy.trigger",
                    format!("unknown trigger `{other}`"),
                ))
            }
        };
        let manner = match self.strategy.manner.as_str() {
            "after_aggregating" => Manner::AfterAggregating,
            "after_receiving" => Manner::AfterReceiving,
            other => {
                return Err(invalid(
                    "strategy.manner",
                    format!("unknown manner `{other}`"),
                ))
            }
        };
        let sampler = match self.strategy.sampler.as_str() {
            "uniform" => SamplerKind::Uniform,
            "responsiveness" => SamplerKind::ResponsivenessRelated,
            "grouped" => SamplerKind::Grouped {
                num_groups: self.strategy.num_groups,
            },
            other => {
                return Err(invalid(
                    "strategy.sampler",
                    format!("unknown sampler `{other}`"),
                ))
            }
        };
        let discount = match self.staleness.discount.as_str() {
            "reciprocal" => Discount::Reciprocal,
            "none" => Discount::None,
            other => {
                return Err(invalid(
                    "staleness.discount",
                    format!("unknown discount `{other}`"),
                ))
            }
        };
        let kind = match self.latency.kind.as_str() {
            "homogeneous" => LatencyKind::Homogeneous,
            "log_spread" => LatencyKind::LogSpread {
                spread: self.latency.spread,
            },
            "two_point" => LatencyKind::TwoPoint {
                slow_fraction: self.latency.slow_fraction,
                slow_factor: self.latency.slow_factor,
            },
            other => return Err(invalid("latency.kind", format!("unknown kind `{other}`"))),
        };
        let trainer = TrainerConfig {
            local_steps: self.trainer.local_steps,
            learning_rate: self.trainer.learning_rate,
            batch_size: self.trainer.batch_size,
            loss,
            model,
            share_list: self
                .trainer
                .share_list
                .iter()
                .cloned()
                .collect::<BTreeSet<_>>(),
            ditto_lambda: self.trainer.ditto_lambda,
            dp_sigma: None,
        };
        let candidates = self
            .candidate
            .iter()
            .map(|c| {
                let mut t = trainer.clone();
                if let Some(v) = c.local_steps {
                    t.local_steps = v;
                }
                if let Some(v) = c.learning_rate {
                    t.learning_rate = v;
                }
                if let Some(v) = c.batch_size {
                    t.batch_size = v;
                }
                if let Some(v) = c.ditto_lambda {
                    t.ditto_lambda = Some(v);
                }
                t
            })
            .collect();
        let concurrency = if self.strategy.concurrency == 0 {
            self.num_clients
        } else {
            self.strategy.concurrency
        };
        let spec = CourseSpec {
            seed: self.seed,
            num_clients: self.num_clients,
            data: DataSpec {
                num_classes: self.data.num_classes,
                dim: self.data.dim,
                n_total: self.data.n_total,
                separation: self.data.separation,
                partition,
                val_fraction: self.data.val_fraction,
                test_fraction: self.data.test_fraction,
                rare_labels: self.data.rare_labels.clone(),
                slow_fraction: self.data.slow_fraction,
            },
            trainer,
            strategy: StrategyConfig {
                trigger,
                manner,
                sampler,
                staleness: StalenessPolicy {
                    tau_max: self.staleness.tau_max,
                    discount,
                },
                concurrency,
                over_selection_extra: self.strategy.over_selection_extra,
            },
            latency: LatencySpec {
                comp_mean: self.latency.comp_mean,
                comm_mean: self.latency.comm_mean,
                sigma: self.latency.sigma,
                kind,
            },
            eval_cadence: self.eval.cadence,
            max_rounds: self.termination.max_rounds,
            patience: self.termination.patience,
            dp_noisy_fraction: self.dp.noisy_client_fraction,
            dp_sigma: self.dp.sigma,
            candidates,
            uniform_weights: self.strategy.uniform_weights,
        };
        spec.strategy
            .validate(spec.num_clients)
            .map_err(|e| invalid("strategy", e.to_string()))?;
        Ok(spec)
    }
}
