//! The course engine: one event loop over virtual time, from join-in to
//! the end-of-run record. All behavior is deterministic in the course seed.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use super::checkpoint::{ClientSnap, Snapshot};
use super::{
    sample_clients, should_aggregate, Decision, FedCoreError, Manner, SamplerKind, ServerState,
    Trigger, Update, World,
};
use crate::learnkit::{
    evaluate, fedavg_aggregate, filter_shared, inject_dp_noise, local_train_ditto, local_train_sgd,
    merge_shared, AggregateEntry, EvalOutcome, ParamVector, Split,
};
use crate::msgflow::{
    decode_message, encode_message, EventKind, Message, ParticipantId, Payload, Value,
};
use crate::runlog::{Record, RunLogWriter, SCHEMA_VERSION};
use crate::simnet::{client_reply_time, EventQueue, VirtualTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndReason {
    MaxRounds,
    EarlyStopped,
}

impl EndReason {
    pub fn as_str(self) -> &'static str {
        match self {
            EndReason::MaxRounds => "max_rounds",
            EndReason::EarlyStopped => "early_stopped",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientEvalRow {
    pub client: ParticipantId,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub count: u64,
}

/// What a finished course reports back to its caller.
#[derive(Debug, Clone, PartialEq)]
pub struct CourseOutcome {
    pub strategy: String,
    pub rounds: u64,
    pub reason: EndReason,
    pub finished_at: VirtualTime,
    pub final_val_loss: f64,
    pub final_val_accuracy: Option<f64>,
    pub final_test_loss: f64,
    pub final_test_accuracy: Option<f64>,
    pub client_evals: Vec<ClientEvalRow>,
    pub received: u64,
    pub contributed: u64,
    pub dropped: u64,
    pub unconsumed: u64,
}

struct ClientLocal {
    full: ParamVector,
    /// Personalized parameters; present once the client trains with a pull
    /// toward the global model.
    local: Option<ParamVector>,
    send_count: u64,
    cfg_count: u64,
    reply_count: u64,
    train_count: u64,
}

struct Engine<'a, W: Write> {
    world: &'a World,
    log: &'a mut RunLogWriter<W>,
    queue: EventQueue,
    server: ServerState,
    clients: Vec<ClientLocal>,
    joined: BTreeSet<ParticipantId>,
    deadline: VirtualTime,
    timer_gen: u64,
    budget_extended: bool,
    empty_restarts: u32,
    received: u64,
    contributed: u64,
    dropped: u64,
    sample_count: u64,
    best_val_loss: f64,
    evals_since_improve: u64,
    last_eval_version: Option<u64>,
    last_val: Option<EvalOutcome>,
    last_test: Option<EvalOutcome>,
    done: Option<EndReason>,
    checkpoint_at: Option<u64>,
    pending_snapshot: Option<(Snapshot, u64)>,
    snapshot_final: bool,
}

/// Run a whole course, writing the log as it goes.
pub fn run_course<W: Write>(
    world: &World,
    log: &mut RunLogWriter<W>,
) -> Result<CourseOutcome, FedCoreError> {
    run_course_with_checkpoint(world, log, None).map(|(outcome, _)| outcome)
}

/// Like [`run_course`], additionally capturing a snapshot the moment the
/// server version reaches `checkpoint_at`. The returned `u64` is the number
/// of log lines written before the snapshot instant, so callers can compare
/// a resumed log against this run's suffix.
pub fn run_course_with_checkpoint<W: Write>(
    world: &World,
    log: &mut RunLogWriter<W>,
    checkpoint_at: Option<u64>,
) -> Result<(CourseOutcome, Option<(Snapshot, u64)>), FedCoreError> {
    let mut eng = Engine::start(world, log, checkpoint_at)?;
    eng.event_loop()?;
    let outcome = eng.finalize()?;
    Ok((outcome, eng.pending_snapshot))
}

/// Like [`run_course`], additionally returning the server state as of the
/// last aggregation, which is the state a finished course resumes from.
pub fn run_course_final_snapshot<W: Write>(
    world: &World,
    log: &mut RunLogWriter<W>,
) -> Result<(CourseOutcome, Option<Snapshot>), FedCoreError> {
    let mut eng = Engine::start(world, log, None)?;
    eng.snapshot_final = true;
    eng.event_loop()?;
    let outcome = eng.finalize()?;
    Ok((outcome, eng.pending_snapshot.map(|(snap, _)| snap)))
}

/// Continue a checkpointed course under `world`, which must share the
/// snapshot's seed. The log receives only records from the resumption
/// point on; no header is repeated.
pub fn resume_course<W: Write>(
    world: &World,
    snapshot: &Snapshot,
    log: &mut RunLogWriter<W>,
) -> Result<CourseOutcome, FedCoreError> {
    resume_course_with_checkpoint(world, snapshot, log, None).map(|(outcome, _)| outcome)
}

pub fn resume_course_with_checkpoint<W: Write>(
    world: &World,
    snapshot: &Snapshot,
    log: &mut RunLogWriter<W>,
    checkpoint_at: Option<u64>,
) -> Result<(CourseOutcome, Option<(Snapshot, u64)>), FedCoreError> {
    let mut eng = Engine::restore(world, snapshot.clone(), log, checkpoint_at)?;
    if eng.done.is_none() {
        let now = eng.queue.now();
        eng.begin_round(now)?;
    }
    eng.event_loop()?;
    let outcome = eng.finalize()?;
    Ok((outcome, eng.pending_snapshot))
}

impl<'a, W: Write> Engine<'a, W> {
    fn start(
        world: &'a World,
        log: &'a mut RunLogWriter<W>,
        checkpoint_at: Option<u64>,
    ) -> Result<Self, FedCoreError> {
        let spec = &world.spec;
        log.write(&Record::Meta {
            schema: SCHEMA_VERSION,
            strategy: spec.strategy.name(),
            seed: spec.seed,
            num_clients: spec.num_clients as u32,
        })?;
        let mut effective: BTreeMap<&EventKind, &str> = BTreeMap::new();
        for (event, handler) in world.registry.registration_log() {
            let overwrote = effective.insert(event, handler).map(String::from);
            log.write(&Record::Handler {
                event: event.to_string(),
                handler: handler.to_string(),
                overwrote,
            })?;
        }

        let mut agg_count = BTreeMap::new();
        let mut clients = Vec::with_capacity(spec.num_clients);
        for slot in 0..spec.num_clients {
            agg_count.insert(world.id_of(slot), 0);
            clients.push(ClientLocal {
                full: world.init_params.clone(),
                local: None,
                send_count: 0,
                cfg_count: 0,
                reply_count: 0,
                train_count: 0,
            });
        }

        let mut eng = Engine {
            world,
            log,
            queue: EventQueue::new(),
            server: ServerState {
                version: 0,
                global_params: world.init_params.clone(),
                buffer: Vec::new(),
                in_flight: BTreeSet::new(),
                ever_sampled: BTreeSet::new(),
                round_started_at: VirtualTime::ZERO,
                agg_count,
            },
            clients,
            joined: BTreeSet::new(),
            deadline: VirtualTime::ZERO,
            timer_gen: 0,
            budget_extended: false,
            empty_restarts: 0,
            received: 0,
            contributed: 0,
            dropped: 0,
            sample_count: 0,
            best_val_loss: f64::INFINITY,
            evals_since_improve: 0,
            last_eval_version: None,
            last_val: None,
            last_test: None,
            done: None,
            checkpoint_at,
            pending_snapshot: None,
            snapshot_final: false,
        };
        for slot in 0..spec.num_clients {
            let id = eng.world.id_of(slot);
            eng.queue.schedule(Message::new(
                "join_in",
                id,
                vec![ParticipantId::SERVER],
                VirtualTime::ZERO,
                Payload::new(),
            )?)?;
        }
        Ok(eng)
    }

    fn restore(
        world: &'a World,
        snap: Snapshot,
        log: &'a mut RunLogWriter<W>,
        checkpoint_at: Option<u64>,
    ) -> Result<Self, FedCoreError> {
        if snap.seed != world.spec.seed {
            return Err(FedCoreError::Checkpoint(format!(
                "snapshot seed {} does not match spec seed {}",
                snap.seed, world.spec.seed
            )));
        }
        if snap.clients.len() != world.spec.num_clients {
            return Err(FedCoreError::Checkpoint(format!(
                "snapshot holds {} clients, spec has {}",
                snap.clients.len(),
                world.spec.num_clients
            )));
        }
        world.model.check_shape(&snap.global_params)?;
        let queue = EventQueue::restore(snap.clock, snap.next_seq, snap.popped, snap.queue);
        let clients = snap
            .clients
            .into_iter()
            .map(|c| ClientLocal {
                full: c.full,
                local: c.local,
                send_count: c.send_count,
                cfg_count: c.cfg_count,
                reply_count: c.reply_count,
                train_count: c.train_count,
            })
            .collect();
        let mut eng = Engine {
            world,
            log,
            queue,
            server: ServerState {
                version: snap.version,
                global_params: snap.global_params,
                buffer: snap.buffer,
                in_flight: snap.in_flight,
                ever_sampled: snap.ever_sampled,
                round_started_at: snap.round_started_at,
                agg_count: snap.agg_count,
            },
            clients,
            joined: snap.joined,
            deadline: snap.deadline,
            timer_gen: snap.timer_gen,
            budget_extended: snap.budget_extended,
            empty_restarts: snap.empty_restarts,
            received: snap.received,
            contributed: snap.contributed,
            dropped: snap.dropped,
            sample_count: snap.sample_count,
            best_val_loss: snap.best_val_loss,
            evals_since_improve: snap.evals_since_improve,
            last_eval_version: snap.last_eval_version,
            last_val: None,
            last_test: None,
            done: None,
            checkpoint_at,
            pending_snapshot: None,
            snapshot_final: false,
        };
        eng.done = eng.termination();
        Ok(eng)
    }

    fn event_loop(&mut self) -> Result<(), FedCoreError> {
        while self.done.is_none() && !self.queue.is_empty() {
            let popped = self.queue.next_event()?;
            self.deliver(popped.msg, popped.seq)?;
        }
        if self.done.is_none() && self.joined.len() == self.world.num_clients() {
            return Err(FedCoreError::Config(
                "event queue drained before the course terminated".into(),
            ));
        }
        Ok(())
    }

    fn deliver(&mut self, msg: Message, seq: u64) -> Result<(), FedCoreError> {
        let now = self.queue.now();
        // Every delivery crosses the canonical codec, keeping the bit-exact
        // round-trip contract under continuous exercise.
        let payload = decode_message(&encode_message(&msg.payload))?;
        self.world
            .registry
            .dispatch(&EventKind::MessagePassing(msg.msg_type.clone()))?;
        self.log.write(&Record::Event {
            t: now.seconds(),
            seq,
            msg_type: msg.msg_type.clone(),
            sender: msg.sender.0,
            receivers: msg.receivers.iter().map(|r| r.0).collect(),
            round: self.server.version,
            extra: BTreeMap::new(),
        })?;
        match msg.msg_type.as_str() {
            "join_in" => self.handle_join(msg.sender, now),
            "model_param" => self.handle_train(msg.receivers[0], &payload, now),
            "model_update" => self.handle_update(msg.sender, &payload, now),
            "time_up" => self.handle_timer(&payload, now),
            other => Err(FedCoreError::Config(format!(
                "no behavior bound to message `{other}`"
            ))),
        }
    }

    fn handle_join(&mut self, client: ParticipantId, now: VirtualTime) -> Result<(), FedCoreError> {
        self.joined.insert(client);
        if self.joined.len() == self.world.num_clients() {
            self.run_eval(now)?;
            self.done = self.termination();
            if self.done.is_none() {
                self.begin_round(now)?;
            }
        }
        Ok(())
    }

    fn handle_train(
        &mut self,
        client: ParticipantId,
        payload: &Payload,
        now: VirtualTime,
    ) -> Result<(), FedCoreError> {
        let slot = self.world.slot(client);
        let version_trained = field_scalar(payload, "version")? as u64;
        let shared = ParamVector::from_payload(field_nested(payload, "params")?)?;
        let cfg = match payload.scalar("candidate") {
            Some(x) => self
                .world
                .spec
                .candidates
                .get(x as usize)
                .ok_or_else(|| FedCoreError::Config(format!("candidate {x} out of range")))?,
            None => &self.world.spec.trainer,
        };
        let merged = merge_shared(&self.clients[slot].full, &shared)?;
        let data = &self.world.client_data[slot];
        let mut rng =
            self.world
                .seeds
                .stream("train", u64::from(client.0), self.clients[slot].train_count);
        let delta_full = if cfg.ditto_lambda.is_some() {
            let local0 = self.clients[slot]
                .local
                .clone()
                .unwrap_or_else(|| merged.clone());
            let (delta, new_local) = local_train_ditto(&merged, &local0, data, cfg, &mut rng)?;
            self.clients[slot].local = Some(new_local);
            delta
        } else {
            local_train_sgd(&merged, data, cfg, &mut rng)?
        };
        let mut full_after = merged;
        full_after.add_scaled(&delta_full, 1.0)?;
        self.clients[slot].full = full_after;

        let mut delta_shared = filter_shared(&delta_full, &self.world.share_groups)?;
        if self.world.noisy.contains(&client) {
            let mut dp_rng =
                self.world
                    .seeds
                    .stream("dp", u64::from(client.0), self.clients[slot].train_count);
            delta_shared = inject_dp_noise(&delta_shared, self.world.spec.dp_sigma, &mut dp_rng)?;
        }
        self.clients[slot].train_count += 1;

        let mut reply = Payload::new();
        reply.push("delta", Value::Entries(delta_shared.to_payload()))?;
        reply.push("version", Value::Scalar(version_trained as f64))?;
        let num_samples = data.split(Split::Train).len() as u64;
        reply.push("num_samples", Value::Scalar(num_samples as f64))?;

        let mut lat_rng =
            self.world
                .seeds
                .stream("reply", u64::from(client.0), self.clients[slot].reply_count);
        self.clients[slot].reply_count += 1;
        let at = client_reply_time(&self.world.profiles[slot], now, &mut lat_rng)?;
        self.queue.schedule(Message::new(
            "model_update",
            client,
            vec![ParticipantId::SERVER],
            at,
            reply,
        )?)?;
        Ok(())
    }

    fn handle_update(
        &mut self,
        client: ParticipantId,
        payload: &Payload,
        now: VirtualTime,
    ) -> Result<(), FedCoreError> {
        self.received += 1;
        if !self.server.ever_sampled.contains(&client) {
            return Err(FedCoreError::Protocol { client: client.0 });
        }
        self.server.in_flight.remove(&client);

        let model_version = field_scalar(payload, "version")? as u64;
        let delta = ParamVector::from_payload(field_nested(payload, "delta")?)?;
        let num_samples = field_scalar(payload, "num_samples")? as u64;
        let staleness = self.server.version - model_version;
        let policy = self.world.spec.strategy.staleness;
        if staleness > policy.tau_max {
            self.dropped += 1;
            self.log.write(&Record::Drop {
                t: now.seconds(),
                round: self.server.version,
                client: client.0,
                staleness,
                tau_max: policy.tau_max,
            })?;
        } else {
            self.log.write(&Record::Buffered {
                t: now.seconds(),
                round: self.server.version,
                client: client.0,
                staleness,
                weight: policy.weight(staleness),
                num_samples,
            })?;
            *self.server.agg_count.entry(client).or_insert(0) += 1;
            self.server.buffer.push(Update {
                client,
                delta,
                num_samples,
                model_version,
                staleness,
                received_at: now,
            });
        }

        // An after-receiving server hands the current model to one idle
        // client before it even looks at the trigger.
        if self.world.spec.strategy.manner == Manner::AfterReceiving && self.done.is_none() {
            self.sample_and_broadcast(1, now)?;
        }

        self.world
            .registry
            .dispatch(&EventKind::ConditionCheck("aggregation_trigger".into()))?;
        let decision = should_aggregate(
            &self.world.spec.strategy.trigger,
            self.server.buffer.len(),
            self.server.in_flight.len(),
            self.deadline,
            now,
        );
        // Remedial never surfaces here: the round timer sorts before any
        // same-instant arrival, so arrivals always see the pre-deadline
        // clock or a fresh deadline.
        if decision == Decision::Yes {
            self.aggregate(now)?;
        }
        Ok(())
    }

    fn handle_timer(&mut self, payload: &Payload, now: VirtualTime) -> Result<(), FedCoreError> {
        let gen = field_scalar(payload, "gen")? as u64;
        if gen != self.timer_gen {
            return Ok(()); // a displaced round's timer
        }
        match should_aggregate(
            &self.world.spec.strategy.trigger,
            self.server.buffer.len(),
            self.server.in_flight.len(),
            self.deadline,
            now,
        ) {
            Decision::Yes => self.aggregate(now),
            Decision::Remedial => self.remedial(now),
            Decision::No => Ok(()),
        }
    }

    fn remedial(&mut self, now: VirtualTime) -> Result<(), FedCoreError> {
        let buffer_size = self.server.buffer.len() as u64;
        let budget = match self.world.spec.strategy.trigger {
            Trigger::TimeUp { budget, .. } => budget,
            _ => unreachable!("remedial decisions come from time budgets"),
        };
        if !self.budget_extended {
            self.budget_extended = true;
            self.log.write(&Record::Remedial {
                t: now.seconds(),
                round: self.server.version,
                action: "extend_budget".into(),
                buffer_size,
            })?;
            self.timer_gen += 1;
            self.deadline = now.plus(budget.seconds())?;
            self.schedule_timer()?;
            return Ok(());
        }
        if !self.server.buffer.is_empty() {
            self.log.write(&Record::Remedial {
                t: now.seconds(),
                round: self.server.version,
                action: "aggregate_partial".into(),
                buffer_size,
            })?;
            return self.aggregate(now);
        }
        self.empty_restarts += 1;
        self.log.write(&Record::Remedial {
            t: now.seconds(),
            round: self.server.version,
            action: "restart_round".into(),
            buffer_size,
        })?;
        if self.empty_restarts >= 3 {
            self.write_end(now, "course_stalled")?;
            self.log.flush()?;
            return Err(FedCoreError::CourseStalled {
                restarts: self.empty_restarts,
            });
        }
        self.budget_extended = false;
        self.begin_round(now)
    }

    /// Top the training pool back up to the effective concurrency and arm
    /// the round timer. Serves the initial round, every after-aggregating
    /// round, and remedial restarts alike.
    fn begin_round(&mut self, now: VirtualTime) -> Result<(), FedCoreError> {
        self.server.round_started_at = now;
        let want = self.world.spec.strategy.effective_concurrency();
        let k = want.saturating_sub(self.server.in_flight.len());
        if k > 0 {
            self.sample_and_broadcast(k, now)?;
        }
        if let Trigger::TimeUp { budget, .. } = self.world.spec.strategy.trigger {
            self.timer_gen += 1;
            self.deadline = now.plus(budget.seconds())?;
            self.schedule_timer()?;
        }
        Ok(())
    }

    fn schedule_timer(&mut self) -> Result<(), FedCoreError> {
        let mut p = Payload::new();
        p.push("gen", Value::Scalar(self.timer_gen as f64))?;
        self.queue.schedule(Message::internal(
            "time_up",
            ParticipantId::SERVER,
            self.deadline,
            p,
        )?)?;
        Ok(())
    }

    fn sample_and_broadcast(&mut self, k: usize, now: VirtualTime) -> Result<(), FedCoreError> {
        let idle: BTreeSet<ParticipantId> = (0..self.world.num_clients())
            .map(|slot| self.world.id_of(slot))
            .filter(|id| !self.server.in_flight.contains(id))
            .collect();
        let mut rng = self.world.seeds.stream("sample", 0, self.sample_count);
        self.sample_count += 1;
        let picked = sample_clients(
            &self.world.spec.strategy.sampler,
            &self.world.profiles,
            &idle,
            k,
            self.server.version,
            &mut rng,
        )?;
        self.log.write(&Record::Sample {
            t: now.seconds(),
            round: self.server.version,
            sampler: sampler_label(&self.world.spec.strategy.sampler).into(),
            clients: picked.iter().map(|id| id.0).collect(),
        })?;
        self.broadcast(&picked, now)
    }

    fn broadcast(
        &mut self,
        picked: &[ParticipantId],
        now: VirtualTime,
    ) -> Result<(), FedCoreError> {
        let shared = filter_shared(&self.server.global_params, &self.world.share_groups)?;
        for &id in picked {
            self.server.in_flight.insert(id);
            self.server.ever_sampled.insert(id);
            let slot = self.world.slot(id);
            let mut payload = Payload::new();
            payload.push("params", Value::Entries(shared.to_payload()))?;
            payload.push("version", Value::Scalar(self.server.version as f64))?;
            if !self.world.spec.candidates.is_empty() {
                let mut rng =
                    self.world
                        .seeds
                        .stream("cfg", u64::from(id.0), self.clients[slot].cfg_count);
                self.clients[slot].cfg_count += 1;
                let idx = crate::autotune::per_client_config_hook(
                    &self.world.spec.candidates,
                    None,
                    &mut rng,
                );
                payload.push("candidate", Value::Scalar(idx as f64))?;
                self.log.write(&Record::CfgAssign {
                    round: self.server.version,
                    client: id.0,
                    candidate: idx,
                })?;
            }
            let mut rng =
                self.world
                    .seeds
                    .stream("down", u64::from(id.0), self.clients[slot].send_count);
            self.clients[slot].send_count += 1;
            let at = now.plus(self.world.profiles[slot].comm.draw(&mut rng))?;
            self.queue.schedule(Message::new(
                "model_param",
                ParticipantId::SERVER,
                vec![id],
                at,
                payload,
            )?)?;
        }
        Ok(())
    }

    fn aggregate(&mut self, now: VirtualTime) -> Result<(), FedCoreError> {
        let spec = &self.world.spec;
        let policy = spec.strategy.staleness;
        let round = self.server.version;
        let mut contributors = Vec::with_capacity(self.server.buffer.len());
        let mut staleness = Vec::with_capacity(self.server.buffer.len());
        let mut weights = Vec::with_capacity(self.server.buffer.len());
        let mut entries = Vec::with_capacity(self.server.buffer.len());
        for u in &self.server.buffer {
            let num_samples = if spec.uniform_weights {
                1
            } else {
                u.num_samples
            };
            let staleness_weight = policy.weight(u.staleness);
            contributors.push(u.client.0);
            staleness.push(u.staleness);
            weights.push(num_samples as f64 * staleness_weight);
            entries.push(AggregateEntry {
                delta: u.delta.clone(),
                num_samples,
                staleness_weight,
            });
        }
        let base = filter_shared(&self.server.global_params, &self.world.share_groups)?;
        let new_shared = fedavg_aggregate(&base, &entries)?;
        self.server.global_params = merge_shared(&self.server.global_params, &new_shared)?;
        self.log.write(&Record::Agg {
            t: now.seconds(),
            round,
            contributors,
            staleness,
            weights,
        })?;
        self.contributed += self.server.buffer.len() as u64;
        self.server.buffer.clear();
        self.server.version += 1;
        self.empty_restarts = 0;
        self.budget_extended = false;

        if self.server.version.is_multiple_of(spec.eval_cadence) {
            self.run_eval(now)?;
        }
        if self.snapshot_final
            || (self.checkpoint_at == Some(self.server.version) && self.pending_snapshot.is_none())
        {
            let snap = self.make_snapshot();
            self.pending_snapshot = Some((snap, self.log.lines()));
        }
        self.done = self.termination();
        if self.done.is_none() {
            self.begin_round(now)?;
        }
        Ok(())
    }

    fn run_eval(&mut self, now: VirtualTime) -> Result<(), FedCoreError> {
        let loss = self.world.spec.trainer.loss;
        let val = evaluate(
            &self.server.global_params,
            &self.world.server_eval,
            loss,
            Split::Validation,
        )?;
        self.log.write(&Record::Eval {
            t: now.seconds(),
            round: self.server.version,
            split: "validation".into(),
            loss: val.loss,
            accuracy: val.accuracy,
        })?;
        let test = evaluate(
            &self.server.global_params,
            &self.world.server_eval,
            loss,
            Split::Test,
        )?;
        self.log.write(&Record::Eval {
            t: now.seconds(),
            round: self.server.version,
            split: "test".into(),
            loss: test.loss,
            accuracy: test.accuracy,
        })?;
        if val.loss < self.best_val_loss {
            self.best_val_loss = val.loss;
            self.evals_since_improve = 0;
        } else {
            self.evals_since_improve += 1;
        }
        self.last_eval_version = Some(self.server.version);
        self.last_val = Some(val);
        self.last_test = Some(test);
        Ok(())
    }

    fn termination(&self) -> Option<EndReason> {
        if self.server.version >= self.world.spec.max_rounds {
            return Some(EndReason::MaxRounds);
        }
        if let Some(patience) = self.world.spec.patience {
            if self.evals_since_improve >= patience {
                return Some(EndReason::EarlyStopped);
            }
        }
        None
    }

    fn write_end(&mut self, now: VirtualTime, reason: &str) -> Result<(), FedCoreError> {
        let unconsumed = self.server.buffer.len() as u64;
        debug_assert_eq!(
            self.received,
            self.contributed + self.dropped + unconsumed,
            "update conservation"
        );
        self.log
            .write(&Record::End {
                t: now.seconds(),
                rounds: self.server.version,
                reason: reason.into(),
                received: self.received,
                contributed: self.contributed,
                dropped: self.dropped,
                unconsumed,
            })
            .map_err(FedCoreError::from)
    }

    fn finalize(&mut self) -> Result<CourseOutcome, FedCoreError> {
        let now = self.queue.now();
        let reason = self.done.ok_or_else(|| {
            FedCoreError::Config("event queue drained before the course terminated".into())
        })?;
        if self.last_eval_version != Some(self.server.version) || self.last_val.is_none() {
            self.run_eval(now)?;
        }
        let shared = filter_shared(&self.server.global_params, &self.world.share_groups)?;
        let mut client_evals = Vec::with_capacity(self.world.num_clients());
        for slot in 0..self.world.num_clients() {
            let id = self.world.id_of(slot);
            let deploy = match &self.clients[slot].local {
                Some(local) => local.clone(),
                None => merge_shared(&self.clients[slot].full, &shared)?,
            };
            let data = &self.world.client_data[slot];
            let which = if data.split(Split::Test).is_empty() {
                Split::Train
            } else {
                Split::Test
            };
            let out = evaluate(&deploy, data, self.world.spec.trainer.loss, which)?;
            self.log.write(&Record::ClientEval {
                round: self.server.version,
                client: id.0,
                loss: out.loss,
                accuracy: out.accuracy,
                count: out.count as u64,
            })?;
            client_evals.push(ClientEvalRow {
                client: id,
                loss: out.loss,
                accuracy: out.accuracy,
                count: out.count as u64,
            });
        }
        self.write_end(now, reason.as_str())?;
        self.log.flush()?;
        let val = self.last_val.expect("final evaluation ran");
        let test = self.last_test.expect("final evaluation ran");
        Ok(CourseOutcome {
            strategy: self.world.spec.strategy.name(),
            rounds: self.server.version,
            reason,
            finished_at: now,
            final_val_loss: val.loss,
            final_val_accuracy: val.accuracy,
            final_test_loss: test.loss,
            final_test_accuracy: test.accuracy,
            client_evals,
            received: self.received,
            contributed: self.contributed,
            dropped: self.dropped,
            unconsumed: self.server.buffer.len() as u64,
        })
    }

    fn make_snapshot(&mut self) -> Snapshot {
        let clock = self.queue.now();
        let counters = self.queue.counters();
        let entries = self.queue.drain_entries();
        self.queue =
            EventQueue::restore(clock, counters.scheduled, counters.popped, entries.clone());
        Snapshot {
            seed: self.world.spec.seed,
            clock,
            next_seq: counters.scheduled,
            popped: counters.popped,
            queue: entries,
            version: self.server.version,
            global_params: self.server.global_params.clone(),
            buffer: self.server.buffer.clone(),
            in_flight: self.server.in_flight.clone(),
            ever_sampled: self.server.ever_sampled.clone(),
            joined: self.joined.clone(),
            agg_count: self.server.agg_count.clone(),
            round_started_at: self.server.round_started_at,
            deadline: self.deadline,
            timer_gen: self.timer_gen,
            budget_extended: self.budget_extended,
            empty_restarts: self.empty_restarts,
            received: self.received,
            contributed: self.contributed,
            dropped: self.dropped,
            sample_count: self.sample_count,
            best_val_loss: self.best_val_loss,
            evals_since_improve: self.evals_since_improve,
            last_eval_version: self.last_eval_version,
            clients: self
                .clients
                .iter()
                .map(|c| ClientSnap {
                    full: c.full.clone(),
                    local: c.local.clone(),
                    send_count: c.send_count,
                    cfg_count: c.cfg_count,
                    reply_count: c.reply_count,
                    train_count: c.train_count,
                })
                .collect(),
        }
    }
}

fn sampler_label(kind: &SamplerKind) -> &'static str {
    match kind {
        SamplerKind::Uniform => "uniform",
        SamplerKind::ResponsivenessRelated => "responsiveness",
        SamplerKind::Grouped { .. } => "grouped",
    }
}

fn field_scalar(payload: &Payload, name: &str) -> Result<f64, FedCoreError> {
    payload
        .scalar(name)
        .ok_or_else(|| FedCoreError::Config(format!("payload lacks scalar `{name}`")))
}

fn field_nested<'p>(payload: &'p Payload, name: &str) -> Result<&'p Payload, FedCoreError> {
    payload
        .nested(name)
        .ok_or_else(|| FedCoreError::Config(format!("payload lacks entries `{name}`")))
}
