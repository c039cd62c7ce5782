//! Learning toolkit: parameter containers, local trainers, aggregation
//! rules, parameter-subset sharing, and noise injection.
//!
//! Everything here is a pure function of its inputs plus an explicit seeded
//! stream, so results are reproducible and safe to call from any thread.

mod aggregate;
mod bound;
mod model;
mod params;
mod trainer;

pub use aggregate::{
    fedavg_aggregate, filter_shared, inject_dp_noise, krum_aggregate, merge_shared, AggregateEntry,
};
pub use bound::{convergence_bound, ConvergenceBoundParams};
pub use model::{LossKind, ModelKind, ModelSpec};
pub use params::ParamVector;
pub use trainer::{evaluate, evaluate_indices, local_train_ditto, local_train_sgd, EvalOutcome};

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum LearnError {
    #[error("parameter shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("duplicate parameter group `{0}`")]
    DuplicateGroup(String),
    #[error("non-finite loss or gradient at local step {step}")]
    Numerical { step: u32 },
    #[error("aggregation buffer empty or all weights zero")]
    EmptyAggregation,
    #[error("krum requires n >= f+3, got n={n} with f={f}")]
    InsufficientUpdates { n: usize, f: usize },
    #[error("evaluation split is empty")]
    EmptyEvaluation,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bound requires 0 < mu*Q*eta < 1, got mu*Q*eta = {0}")]
    Domain(f64),
    #[error("invalid dataset: {0}")]
    Dataset(String),
}

/// Which split of a dataset an operation ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Row indices of the train/validation/test splits; disjoint and covering.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// A labeled feature matrix with split bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<f64>,
    num_classes: usize,
    splits: Splits,
}

impl Dataset {
    /// All rows assigned to the training split.
    pub fn unsplit(
        features: Vec<Vec<f64>>,
        labels: Vec<f64>,
        num_classes: usize,
    ) -> Result<Self, LearnError> {
        let n = features.len();
        let splits = Splits {
            train: (0..n).collect(),
            validation: vec![],
            test: vec![],
        };
        Dataset::new(features, labels, num_classes, splits)
    }

    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<f64>,
        num_classes: usize,
        splits: Splits,
    ) -> Result<Self, LearnError> {
        if features.len() != labels.len() {
            return Err(LearnError::Dataset(format!(
                "{} feature rows vs {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features.first().map_or(0, |r| r.len());
        if features.iter().any(|r| r.len() != dim) {
            return Err(LearnError::Dataset("ragged feature rows".into()));
        }
        let n = features.len();
        let mut seen = vec![false; n];
        let mut covered = 0usize;
        for &i in splits
            .train
            .iter()
            .chain(splits.validation.iter())
            .chain(splits.test.iter())
        {
            if i >= n {
                return Err(LearnError::Dataset(format!("split index {i} out of range")));
            }
            if seen[i] {
                return Err(LearnError::Dataset(format!("row {i} in two splits")));
            }
            seen[i] = true;
            covered += 1;
        }
        if covered != n {
            return Err(LearnError::Dataset(format!(
                "splits cover {covered} of {n} rows"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, |r| r.len())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn split(&self, which: Split) -> &[usize] {
        match which {
            Split::Train => &self.splits.train,
            Split::Validation => &self.splits.validation,
            Split::Test => &self.splits.test,
        }
    }
}

/// Per-client training settings; the model and loss ride along so a course
/// can swap per-client configurations wholesale.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub local_steps: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub model: ModelKind,
    /// Parameter groups exchanged in federation; empty means all groups.
    pub share_list: BTreeSet<String>,
    pub ditto_lambda: Option<f64>,
    pub dp_sigma: Option<f64>,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        if self.local_steps < 1 {
            return Err(LearnError::Config("local_steps must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(LearnError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(LearnError::Config("batch_size must be >= 1".into()));
        }
        if let Some(lambda) = self.ditto_lambda {
            if lambda < 0.0 || !lambda.is_finite() {
                return Err(LearnError::Config("ditto_lambda must be >= 0".into()));
            }
        }
        if let Some(sigma) = self.dp_sigma {
            if sigma < 0.0 || !sigma.is_finite() {
                return Err(LearnError::Config("dp_sigma must be >= 0".into()));
            }
        }
        Ok(())
    }
}
