//! Deterministic construction of a course's immutable surroundings: data,
//! client population, model, and the event-handler registry.

use std::collections::BTreeSet;

use super::{CourseSpec, FedCoreError, LatencyKind, PartitionKind};
#[cfg(test)]
use super::{
    DataSpec, Discount, LatencySpec, Manner, SamplerKind, StalenessPolicy, StrategyConfig, Trigger,
};
use crate::datasynth::{
    couple_rare_labels, gen_classification, partition_dirichlet, partition_iid, LabeledPool,
};
use crate::learnkit::{Dataset, ModelSpec, ParamVector};
#[cfg(test)]
use crate::learnkit::{LossKind, ModelKind, TrainerConfig};
use crate::msgflow::{EventKind, HandlerDecl, HandlerRegistry, ParticipantId, Role};
use crate::simnet::{ClientProfile, LatencyDist, SeededRng};

use rand::seq::SliceRandom;
use rand::Rng;

/// Everything about a course that never changes while it runs. Rebuilding
/// from the same spec yields an identical world, which is what makes
/// checkpoints small: only mutable state is saved.
pub struct World {
    pub spec: CourseSpec,
    pub seeds: SeededRng,
    pub profiles: Vec<ClientProfile>,
    /// Per client slot; local rows split 4:1 into train and holdout.
    pub client_data: Vec<Dataset>,
    /// Server-side validation and test splits from the global pool.
    pub server_eval: Dataset,
    pub registry: HandlerRegistry,
    pub model: ModelSpec,
    pub init_params: ParamVector,
    /// Clients whose outgoing deltas receive Gaussian noise.
    pub noisy: BTreeSet<ParticipantId>,
    /// Expanded share list: the parameter groups that cross the network.
    pub share_groups: BTreeSet<String>,
}

impl World {
    pub fn build(spec: CourseSpec) -> Result<World, FedCoreError> {
        validate(&spec)?;
        let seeds = SeededRng::new(spec.seed);
        let m = spec.num_clients;

        let pool = gen_classification(
            spec.data.num_classes,
            spec.data.dim,
            spec.data.n_total,
            spec.data.separation,
            spec.seed,
        );

        // Server holdout comes off the top of one global shuffle.
        let n = pool.len();
        let n_test = ((spec.data.test_fraction * n as f64).round() as usize).max(1);
        let n_val = ((spec.data.val_fraction * n as f64).round() as usize).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeds.stream("holdout", 0, 0));
        let test_rows = &order[..n_test];
        let val_rows = &order[n_test..n_test + n_val];
        let train_rows = &order[n_test + n_val..];
        let server_eval = pool.materialize(&[], val_rows, test_rows)?;

        let train_pool = LabeledPool::new(
            train_rows.iter().map(|&i| pool.row(i).to_vec()).collect(),
            train_rows.iter().map(|&i| pool.label(i)).collect(),
            pool.num_classes(),
        )?;

        let profiles = build_profiles(&spec, &seeds)?;

        let min_size = spec.trainer.batch_size.max(1);
        let mut partition = match spec.data.partition {
            PartitionKind::Iid => partition_iid(&train_pool, m, min_size, spec.seed)?,
            PartitionKind::Dirichlet { alpha } => {
                partition_dirichlet(&train_pool, m, alpha, min_size, spec.seed)?
            }
        };
        if !spec.data.rare_labels.is_empty() {
            partition = couple_rare_labels(
                &train_pool,
                &partition,
                &profiles,
                &spec.data.rare_labels,
                spec.data.slow_fraction,
            )?;
        }

        let mut client_data = Vec::with_capacity(m);
        for slot in 0..m {
            let list = partition.client(slot);
            let mut local_train = Vec::new();
            let mut local_test = Vec::new();
            for (pos, &row) in list.iter().enumerate() {
                if pos % 5 == 4 {
                    local_test.push(row);
                } else {
                    local_train.push(row);
                }
            }
            client_data.push(train_pool.materialize(&local_train, &[], &local_test)?);
        }

        let model = ModelSpec::new(
            spec.trainer.model,
            spec.trainer.loss,
            spec.data.dim,
            spec.data.num_classes,
        )?;
        let init_params = model.init_params(&mut seeds.stream("init", 0, 0));

        let all_groups: BTreeSet<String> = model
            .group_shapes()
            .into_iter()
            .map(|(name, _)| name)
            .collect();
        let share_groups = if spec.trainer.share_list.is_empty() {
            all_groups
        } else {
            for name in &spec.trainer.share_list {
                if !all_groups.contains(name) {
                    return Err(FedCoreError::Config(format!(
                        "share_list names unknown parameter group `{name}`"
                    )));
                }
            }
            spec.trainer.share_list.clone()
        };

        let noisy = pick_noisy(&spec, &seeds);
        let registry = course_registry();

        Ok(World {
            spec,
            seeds,
            profiles,
            client_data,
            server_eval,
            registry,
            model,
            init_params,
            noisy,
            share_groups,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.spec.num_clients
    }

    /// Slot index for a client id; ids are 1-based, the server is 0.
    pub fn slot(&self, id: ParticipantId) -> usize {
        (id.0 - 1) as usize
    }

    pub fn id_of(&self, slot: usize) -> ParticipantId {
        ParticipantId(slot as u32 + 1)
    }
}

fn validate(spec: &CourseSpec) -> Result<(), FedCoreError> {
    spec.strategy.validate(spec.num_clients)?;
    spec.trainer.validate()?;
    for (i, cand) in spec.candidates.iter().enumerate() {
        cand.validate()?;
        if cand.model != spec.trainer.model || cand.loss != spec.trainer.loss {
            return Err(FedCoreError::Config(format!(
                "candidate {i} changes the model architecture"
            )));
        }
        if cand.share_list != spec.trainer.share_list {
            return Err(FedCoreError::Config(format!(
                "candidate {i} changes the share list"
            )));
        }
    }
    let d = &spec.data;
    if d.num_classes < 2 {
        return Err(FedCoreError::Config("need at least two classes".into()));
    }
    if d.dim < d.num_classes {
        return Err(FedCoreError::Config(
            "feature dim must be >= num_classes".into(),
        ));
    }
    if d.separation < 0.0 || !d.separation.is_finite() {
        return Err(FedCoreError::Config(
            "separation must be finite and >= 0".into(),
        ));
    }
    for f in [d.val_fraction, d.test_fraction] {
        if !(0.0..0.5).contains(&f) {
            return Err(FedCoreError::Config(
                "holdout fractions must lie in [0, 0.5)".into(),
            ));
        }
    }
    let n = d.n_total as f64;
    let holdout = ((d.test_fraction * n).round() + (d.val_fraction * n).round()) as usize + 2;
    if d.n_total < holdout + spec.num_clients * spec.trainer.batch_size.max(1) {
        return Err(FedCoreError::Config(format!(
            "n_total {} cannot cover the holdout plus {} clients",
            d.n_total, spec.num_clients
        )));
    }
    if spec.num_clients == 0 {
        return Err(FedCoreError::Config("need at least one client".into()));
    }
    if spec.eval_cadence == 0 {
        return Err(FedCoreError::Config("eval_cadence must be >= 1".into()));
    }
    if !(spec.dp_noisy_fraction >= 0.0 && spec.dp_noisy_fraction <= 1.0) {
        return Err(FedCoreError::Config(
            "dp_noisy_fraction must lie in [0, 1]".into(),
        ));
    }
    if spec.dp_sigma < 0.0 || !spec.dp_sigma.is_finite() {
        return Err(FedCoreError::Config(
            "dp_sigma must be finite and >= 0".into(),
        ));
    }
    let l = &spec.latency;
    let means_ok = l.comp_mean.is_finite()
        && l.comp_mean > 0.0
        && l.comm_mean.is_finite()
        && l.comm_mean > 0.0;
    if !means_ok || l.sigma < 0.0 || !l.sigma.is_finite() {
        return Err(FedCoreError::Config(
            "latency means must be positive and sigma >= 0".into(),
        ));
    }
    match l.kind {
        LatencyKind::Homogeneous => {}
        LatencyKind::LogSpread { spread } => {
            if spread < 1.0 || !spread.is_finite() {
                return Err(FedCoreError::Config("latency spread must be >= 1".into()));
            }
        }
        LatencyKind::TwoPoint {
            slow_fraction,
            slow_factor,
        } => {
            if !(0.0..1.0).contains(&slow_fraction) {
                return Err(FedCoreError::Config(
                    "slow_fraction must lie in [0, 1)".into(),
                ));
            }
            if slow_factor < 1.0 || !slow_factor.is_finite() {
                return Err(FedCoreError::Config("slow_factor must be >= 1".into()));
            }
        }
    }
    Ok(())
}

fn build_profiles(
    spec: &CourseSpec,
    seeds: &SeededRng,
) -> Result<Vec<ClientProfile>, FedCoreError> {
    let l = spec.latency;
    let m = spec.num_clients;
    let mut profiles = Vec::with_capacity(m);
    for slot in 0..m {
        let id = ParticipantId(slot as u32 + 1);
        let factor = match l.kind {
            LatencyKind::Homogeneous => 1.0,
            LatencyKind::LogSpread { spread } => {
                let half = spread.sqrt().ln();
                let mut rng = seeds.stream("profile", u64::from(id.0), 0);
                rng.random_range(-half..=half).exp()
            }
            LatencyKind::TwoPoint {
                slow_fraction,
                slow_factor,
            } => {
                let slow_count = (slow_fraction * m as f64).floor() as usize;
                if slot >= m - slow_count {
                    slow_factor
                } else {
                    1.0
                }
            }
        };
        let dist = |mean: f64| {
            if l.sigma == 0.0 {
                LatencyDist::Degenerate { value: mean }
            } else {
                LatencyDist::LogNormal {
                    mean,
                    sigma: l.sigma,
                }
            }
        };
        profiles.push(ClientProfile::new(
            id,
            dist(l.comp_mean * factor),
            dist(l.comm_mean * factor),
        )?);
    }
    Ok(profiles)
}

fn pick_noisy(spec: &CourseSpec, seeds: &SeededRng) -> BTreeSet<ParticipantId> {
    let count = (spec.dp_noisy_fraction * spec.num_clients as f64).round() as usize;
    if count == 0 || spec.dp_sigma == 0.0 {
        return BTreeSet::new();
    }
    let mut slots: Vec<usize> = (0..spec.num_clients).collect();
    slots.shuffle(&mut seeds.stream("dpsel", 0, 0));
    slots[..count.min(spec.num_clients)]
        .iter()
        .map(|&s| ParticipantId(s as u32 + 1))
        .collect()
}

/// The canonical federated-averaging course: clients join, the server
/// welcomes them with the model, clients reply with updates, the server
/// aggregates. Timer and trigger handlers declare no message I/O, so they
/// stay invisible to the flow graph.
pub fn course_registry() -> HandlerRegistry {
    let mut reg = HandlerRegistry::new();
    let entries = [
        (
            EventKind::ConditionCheck("course_start".into()),
            HandlerDecl::new("client_start", Role::Client, &[], &["join_in"]),
        ),
        (
            EventKind::MessagePassing("join_in".into()),
            HandlerDecl::new(
                "server_welcome",
                Role::Server,
                &["join_in"],
                &["model_param"],
            ),
        ),
        (
            EventKind::MessagePassing("model_param".into()),
            HandlerDecl::new(
                "client_train",
                Role::Client,
                &["model_param"],
                &["model_update"],
            ),
        ),
        (
            EventKind::MessagePassing("model_update".into()),
            HandlerDecl::new("server_aggregate", Role::Server, &["model_update"], &[]),
        ),
        (
            EventKind::MessagePassing("time_up".into()),
            HandlerDecl::new("server_timer", Role::Server, &[], &[]),
        ),
        (
            EventKind::ConditionCheck("aggregation_trigger".into()),
            HandlerDecl::new("server_trigger", Role::Server, &[], &[]),
        ),
    ];
    for (event, decl) in entries {
        reg.register(event, decl)
            .expect("canonical handler ids are non-empty");
    }
    reg
}

/// A compact 4-client logistic course used across the engine tests.
#[cfg(test)]
pub(crate) fn small_spec() -> CourseSpec {
    CourseSpec {
        seed: 7,
        num_clients: 4,
        data: DataSpec {
            num_classes: 3,
            dim: 3,
            n_total: 200,
            separation: 3.0,
            partition: PartitionKind::Iid,
            val_fraction: 0.1,
            test_fraction: 0.1,
            rare_labels: vec![],
            slow_fraction: 0.0,
        },
        trainer: TrainerConfig {
            local_steps: 2,
            learning_rate: 0.1,
            batch_size: 4,
            loss: LossKind::CrossEntropy,
            model: ModelKind::Logistic,
            share_list: BTreeSet::new(),
            ditto_lambda: None,
            dp_sigma: None,
        },
        strategy: StrategyConfig {
            trigger: Trigger::AllReceived,
            manner: Manner::AfterAggregating,
            sampler: SamplerKind::Uniform,
            staleness: StalenessPolicy {
                tau_max: 0,
                discount: Discount::Reciprocal,
            },
            concurrency: 4,
            over_selection_extra: 0.0,
        },
        latency: LatencySpec {
            comp_mean: 1.0,
            comm_mean: 0.25,
            sigma: 0.0,
            kind: LatencyKind::Homogeneous,
        },
        eval_cadence: 1,
        max_rounds: 3,
        patience: None,
        dp_noisy_fraction: 0.0,
        dp_sigma: 0.0,
        candidates: vec![],
        uniform_weights: false,
    }
}
