//! Hyperparameter search over courses: random search and successive
//! halving. Halving never retrains a survivor from scratch; each rung
//! resumes from the trial's checkpoint.

use std::collections::BTreeMap;
use std::io;

use rand::Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::fedcore::{
    resume_course_with_checkpoint, run_course_with_checkpoint, CourseSpec, FedCoreError, Snapshot,
    World,
};
use crate::learnkit::TrainerConfig;
use crate::runlog::RunLogWriter;
use crate::simnet::SeededRng;

#[derive(Debug, Error)]
pub enum AutotuneError {
    #[error("invalid search space: {0}")]
    Space(String),
    #[error("every trial failed ({failures} of {failures})")]
    SearchFailed { failures: usize },
    #[error(transparent)]
    Course(#[from] FedCoreError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DimensionKind {
    Linear { lo: f64, hi: f64 },
    Log { lo: f64, hi: f64 },
    Categorical { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dimension {
    pub name: String,
    pub kind: DimensionKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub dimensions: Vec<Dimension>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    dimension: Vec<DimensionFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DimensionFile {
    name: String,
    lo: Option<f64>,
    hi: Option<f64>,
    scale: Option<String>,
    values: Option<Vec<f64>>,
}

impl SearchSpace {
    pub fn new(dimensions: Vec<Dimension>) -> Result<Self, AutotuneError> {
        if dimensions.is_empty() {
            return Err(AutotuneError::Space("no dimensions".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &dimensions {
            if !seen.insert(d.name.clone()) {
                return Err(AutotuneError::Space(format!(
                    "dimension `{}` appears twice",
                    d.name
                )));
            }
            match &d.kind {
                DimensionKind::Linear { lo, hi } => {
                    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                        return Err(AutotuneError::Space(format!(
                            "dimension `{}` has degenerate range [{lo}, {hi}]",
                            d.name
                        )));
                    }
                }
                DimensionKind::Log { lo, hi } => {
                    if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo < hi) {
                        return Err(AutotuneError::Space(format!(
                            "dimension `{}` needs 0 < lo < hi for a log range, got [{lo}, {hi}]",
                            d.name
                        )));
                    }
                }
                DimensionKind::Categorical { values } => {
                    if values.is_empty() {
                        return Err(AutotuneError::Space(format!(
                            "dimension `{}` has no values",
                            d.name
                        )));
                    }
                }
            }
        }
        Ok(SearchSpace { dimensions })
    }

    pub fn from_toml(text: &str) -> Result<Self, AutotuneError> {
        let file: SpaceFile =
            toml::from_str(text).map_err(|e| AutotuneError::Space(e.to_string()))?;
        let mut dims = Vec::with_capacity(file.dimension.len());
        for d in file.dimension {
            let kind = match (d.lo, d.hi, d.values) {
                (Some(lo), Some(hi), None) => match d.scale.as_deref() {
                    None | Some("linear") => DimensionKind::Linear { lo, hi },
                    Some("log") => DimensionKind::Log { lo, hi },
                    Some(other) => {
                        return Err(AutotuneError::Space(format!(
                            "dimension `{}` has unknown scale `{other}`",
                            d.name
                        )))
                    }
                },
                (None, None, Some(values)) => {
                    if d.scale.is_some() {
                        return Err(AutotuneError::Space(format!(
                            "dimension `{}` mixes values with a scale",
                            d.name
                        )));
                    }
                    DimensionKind::Categorical { values }
                }
                _ => {
                    return Err(AutotuneError::Space(format!(
                        "dimension `{}` needs either lo+hi or values",
                        d.name
                    )))
                }
            };
            dims.push(Dimension { name: d.name, kind });
        }
        SearchSpace::new(dims)
    }

    /// One uniform draw per dimension (log-uniform on log dimensions).
    pub fn sample<R: Rng>(&self, rng: &mut R) -> BTreeMap<String, f64> {
        self.dimensions
            .iter()
            .map(|d| {
                let v = match &d.kind {
                    DimensionKind::Linear { lo, hi } => rng.random_range(*lo..=*hi),
                    DimensionKind::Log { lo, hi } => rng.random_range(lo.ln()..=hi.ln()).exp(),
                    DimensionKind::Categorical { values } => {
                        values[rng.random_range(0..values.len())]
                    }
                };
                (d.name.clone(), v)
            })
            .collect()
    }
}

/// Something a trial can train and score: `run` trains `rounds` additional
/// rounds (resuming when `from` is given) and reports the validation loss
/// plus the state to continue from.
pub trait Objective {
    type State;

    fn run(
        &self,
        point: &BTreeMap<String, f64>,
        rounds: u64,
        from: Option<Self::State>,
    ) -> Result<(f64, Self::State), FedCoreError>;
}

/// The real objective: a course built from `base` with the sampled point
/// written over it, scored by validation loss after the allotted rounds.
/// Early stopping is disabled so every trial trains the full allotment.
pub struct CourseObjective {
    pub base: CourseSpec,
}

/// Writes one sampled coordinate into a course spec. Count-valued keys
/// round to the nearest count.
pub fn apply_dimension(spec: &mut CourseSpec, name: &str, value: f64) -> Result<(), FedCoreError> {
    match name {
        "trainer.learning_rate" => spec.trainer.learning_rate = value,
        "trainer.local_steps" => spec.trainer.local_steps = value.round().max(1.0) as u32,
        "trainer.batch_size" => spec.trainer.batch_size = value.round().max(1.0) as usize,
        "trainer.ditto_lambda" => spec.trainer.ditto_lambda = Some(value),
        "dp.sigma" => spec.dp_sigma = value,
        other => {
            return Err(FedCoreError::Config(format!(
                "unknown search dimension `{other}`"
            )))
        }
    }
    Ok(())
}

impl Objective for CourseObjective {
    type State = Snapshot;

    fn run(
        &self,
        point: &BTreeMap<String, f64>,
        rounds: u64,
        from: Option<Snapshot>,
    ) -> Result<(f64, Snapshot), FedCoreError> {
        let mut spec = self.base.clone();
        for (name, value) in point {
            apply_dimension(&mut spec, name, *value)?;
        }
        let start = from.as_ref().map_or(0, |s| s.version);
        let target = start + rounds;
        spec.max_rounds = target;
        spec.patience = None;
        let world = World::build(spec)?;
        let mut log = RunLogWriter::new(io::sink());
        let (outcome, snap) = match from {
            None => run_course_with_checkpoint(&world, &mut log, Some(target))?,
            Some(s) => resume_course_with_checkpoint(&world, &s, &mut log, Some(target))?,
        };
        let (snap, _) = snap.ok_or_else(|| {
            FedCoreError::Config("trial ended before reaching its round allotment".into())
        })?;
        debug_assert_eq!(snap.version, target);
        Ok((outcome.final_val_loss, snap))
    }
}

/// One trial's standing after a rung; random search rows are all rung 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub trial: usize,
    pub rung: u32,
    pub point: BTreeMap<String, f64>,
    pub rounds_total: u64,
    /// None when the trial errored.
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: BTreeMap<String, f64>,
    pub best_loss: f64,
    pub trials: Vec<TrialRow>,
    pub total_rounds: u64,
}

fn draw_points(space: &SearchSpace, n: usize, seed: u64) -> Vec<BTreeMap<String, f64>> {
    let seeds = SeededRng::new(seed);
    (0..n)
        .map(|i| space.sample(&mut seeds.stream("hpo", 0, i as u64)))
        .collect()
}

/// Argmin over rows with a loss; ties break toward the earlier trial.
fn best_row(rows: &[TrialRow]) -> Option<&TrialRow> {
    rows.iter()
        .filter(|r| r.loss.is_some_and(|l| !l.is_nan()))
        .min_by(|a, b| a.loss.unwrap().total_cmp(&b.loss.unwrap()))
}

pub fn random_search<O: Objective>(
    space: &SearchSpace,
    budget: usize,
    rounds_per_trial: u64,
    objective: &O,
    seed: u64,
) -> Result<SearchOutcome, AutotuneError> {
    if budget == 0 {
        return Err(AutotuneError::Space("budget must be at least 1".into()));
    }
    if rounds_per_trial == 0 {
        return Err(AutotuneError::Space(
            "trials need at least one round".into(),
        ));
    }
    let points = draw_points(space, budget, seed);
    let mut trials = Vec::with_capacity(budget);
    let mut total_rounds = 0;
    for (i, point) in points.into_iter().enumerate() {
        let loss = match objective.run(&point, rounds_per_trial, None) {
            Ok((loss, _)) => {
                total_rounds += rounds_per_trial;
                Some(loss)
            }
            Err(e) => {
                log::warn!("trial {i} failed: {e}");
                None
            }
        };
        trials.push(TrialRow {
            trial: i,
            rung: 0,
            point,
            rounds_total: rounds_per_trial,
            loss,
        });
    }
    let best = best_row(&trials).ok_or(AutotuneError::SearchFailed { failures: budget })?;
    Ok(SearchOutcome {
        best: best.point.clone(),
        best_loss: best.loss.unwrap(),
        trials,
        total_rounds,
    })
}

pub fn successive_halving<O: Objective>(
    space: &SearchSpace,
    n0: usize,
    halving_rate: usize,
    rungs: u32,
    rounds_per_rung: u64,
    objective: &O,
    seed: u64,
) -> Result<SearchOutcome, AutotuneError> {
    if halving_rate < 2 {
        return Err(AutotuneError::Space(
            "halving rate must be at least 2".into(),
        ));
    }
    if rungs == 0 || rounds_per_rung == 0 {
        return Err(AutotuneError::Space(
            "halving needs at least one rung of at least one round".into(),
        ));
    }
    let floor = halving_rate.pow(rungs - 1);
    if n0 < floor {
        return Err(AutotuneError::Space(format!(
            "{n0} initial trials cannot fill {rungs} rungs at rate {halving_rate} (need {floor})"
        )));
    }

    struct Live<S> {
        trial: usize,
        point: BTreeMap<String, f64>,
        state: Option<S>,
    }
    let mut alive: Vec<Live<O::State>> = draw_points(space, n0, seed)
        .into_iter()
        .enumerate()
        .map(|(trial, point)| Live {
            trial,
            point,
            state: None,
        })
        .collect();

    let mut trials = Vec::new();
    let mut total_rounds = 0;
    for rung in 0..rungs {
        let rounds_total = (u64::from(rung) + 1) * rounds_per_rung;
        let mut scored = Vec::with_capacity(alive.len());
        for mut live in alive {
            let loss = match objective.run(&live.point, rounds_per_rung, live.state.take()) {
                Ok((loss, state)) => {
                    total_rounds += rounds_per_rung;
                    live.state = Some(state);
                    Some(loss)
                }
                Err(e) => {
                    log::warn!("trial {} failed at rung {rung}: {e}", live.trial);
                    None
                }
            };
            trials.push(TrialRow {
                trial: live.trial,
                rung,
                point: live.point.clone(),
                rounds_total,
                loss,
            });
            scored.push((loss, live));
        }
        // Failed trials sort to the back and never survive.
        scored.sort_by(|(la, a), (lb, b)| match (la, lb) {
            (Some(la), Some(lb)) => la.total_cmp(lb).then(a.trial.cmp(&b.trial)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.trial.cmp(&b.trial),
        });
        let keep = alive_count_after(scored.len(), halving_rate);
        scored.truncate(keep);
        if scored.iter().all(|(loss, _)| loss.is_none()) {
            return Err(AutotuneError::SearchFailed { failures: n0 });
        }
        alive = scored.into_iter().map(|(_, live)| live).collect();
    }

    let final_trials: std::collections::BTreeSet<usize> = alive.iter().map(|l| l.trial).collect();
    let best = trials
        .iter()
        .filter(|r| r.rung == rungs - 1 && final_trials.contains(&r.trial))
        .filter(|r| r.loss.is_some())
        .min_by(|a, b| a.loss.unwrap().total_cmp(&b.loss.unwrap()))
        .ok_or(AutotuneError::SearchFailed { failures: n0 })?;
    Ok(SearchOutcome {
        best: best.point.clone(),
        best_loss: best.loss.unwrap(),
        trials,
        total_rounds,
    })
}

fn alive_count_after(n: usize, rate: usize) -> usize {
    n.div_ceil(rate)
}

/// Uniform candidate assignment for one sampled client. Feedback is
/// accepted but unused; a learned policy can replace the draw without
/// changing the message shape.
pub fn per_client_config_hook<R: Rng>(
    candidates: &[TrainerConfig],
    _feedback: Option<f64>,
    rng: &mut R,
) -> usize {
    assert!(!candidates.is_empty(), "candidate list is empty");
    rng.random_range(0..candidates.len())
}
