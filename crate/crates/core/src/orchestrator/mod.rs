//! Frame-by-frame federated training over the push-pull medium.
//!
//! Each frame the server broadcasts the global model, pulls the scheduled
//! clients in the first `Q` uplink slots and opens the remaining `M - Q` slots
//! to framed-ALOHA contention. Pull deliveries and push successes are averaged
//! by sample count, the pulled updates are valued with truncated Monte-Carlo
//! Shapley, and the running client values drive the next schedule.

mod env;
mod policy;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use env::{ComputeSpec, DatasetSource, EnvSpec, Environment};
pub use policy::{round_robin_block, select_pull_set, top_by_value, Policy, PolicyKind};

use crate::compute::local_latency;
use crate::data::{ClientId, LabeledDataset};
use crate::error::{Error, Result};
use crate::learn::{
    add_noise, evaluate, fed_average, init_model, local_train, EvalReport, ModelParams, TrainConfig,
};
use crate::mac::{self, FrameConfig, PushOutcome, UeKind};
use crate::rng::{self, tag};
use crate::valuation::{exp_average, gtg_shapley, GtgConfig, UtilityContext, MAX_PLAYERS};

/// Which received updates are valued each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSet {
    /// Only the pulled updates.
    PullOnly,
    /// Every update received in the frame, pull and push.
    AllReceived,
}

/// What a push contender does after a collision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionPolicy {
    /// Drop the update; train afresh from the next broadcast.
    Retrain,
    /// Keep the update and contend with it again next frame.
    Reoffer,
}

/// What a pulled client does when its computation has not finished by its slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatePull {
    /// Send the latest (partially trained) local model anyway.
    Transmit,
    /// Send nothing this frame.
    Forfeit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub frame: FrameConfig,
    pub train: TrainConfig,
    /// Time budget `T_max`, seconds; the loop runs `ceil(T_max / T_F)` frames.
    pub time_budget: f64,
    /// Exponential-averaging rate for client values.
    pub zeta: f64,
    pub gtg: GtgConfig,
    pub value_set: ValueSet,
    /// Fixes the number of push contenders per frame instead of deriving it
    /// from the computation model.
    pub fixed_push_n: Option<usize>,
    pub on_collision: CollisionPolicy,
    pub late_pull: LatePull,
    /// Stop after the first frame whose test accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Fraction of clients uploading raw data under the centralized baseline.
    pub central_fraction: f64,
    /// Keep the latest valued frame's utility inputs in its record. A run
    /// option, not part of the experiment description.
    #[serde(skip)]
    pub capture_snapshots: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        let frame = FrameConfig::default();
        SimConfig {
            time_budget: 60.0 * frame.frame_time(),
            frame,
            train: TrainConfig::default(),
            zeta: 0.5,
            gtg: GtgConfig::default(),
            value_set: ValueSet::PullOnly,
            fixed_push_n: None,
            on_collision: CollisionPolicy::Retrain,
            late_pull: LatePull::Transmit,
            target_accuracy: None,
            central_fraction: 0.1,
            capture_snapshots: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.frame.validate()?;
        self.train.validate()?;
        if !(self.time_budget >= 0.0 && self.time_budget.is_finite()) {
            return Err(Error::Config(format!(
                "time budget must be nonnegative, got {}",
                self.time_budget
            )));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::Config(format!(
                "zeta must lie in [0, 1], got {}",
                self.zeta
            )));
        }
        if !(self.central_fraction > 0.0 && self.central_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "central_fraction must lie in (0, 1], got {}",
                self.central_fraction
            )));
        }
        if let Some(t) = self.target_accuracy {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!(
                    "target accuracy must lie in (0, 1], got {t}"
                )));
            }
        }
        if self.frame.slots > MAX_PLAYERS {
            return Err(Error::Config(format!(
                "at most {MAX_PLAYERS} uplink slots are supported by the valuation"
            )));
        }
        Ok(())
    }

    /// `ceil(T_max / T_F)`.
    pub fn round_budget(&self) -> usize {
        let ratio = self.time_budget / self.frame.frame_time();
        let r = ratio.round();
        if (ratio - r).abs() < 1e-9 {
            r as usize
        } else {
            ratio.ceil() as usize
        }
    }

    pub fn with_rounds(mut self, rounds: usize) -> Self {
        self.time_budget = rounds as f64 * self.frame.frame_time();
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub round: usize,
    pub global: ModelParams,
    /// Running client values `nu_k`; clients never valued are absent (zero).
    pub values: BTreeMap<ClientId, f64>,
    /// Collided push updates kept for re-offering.
    pub pending: BTreeMap<ClientId, ModelParams>,
}

impl SimState {
    pub fn initial(global: ModelParams) -> Self {
        SimState {
            round: 0,
            global,
            values: BTreeMap::new(),
            pending: BTreeMap::new(),
        }
    }
}

/// Inputs to one frame's valuation, enough to rerun it offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilitySnapshot {
    pub round: usize,
    pub base: ModelParams,
    pub updates: Vec<(ClientId, f64, ModelParams)>,
    pub validation: LabeledDataset,
}

impl UtilitySnapshot {
    pub fn context(&self) -> Result<UtilityContext> {
        let updates = self
            .updates
            .iter()
            .map(|(k, n, p)| (*k, (*n, p.clone())))
            .collect();
        UtilityContext::new(self.base.clone(), updates, self.validation.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuationSummary {
    pub valued: Vec<ClientId>,
    pub round_values: BTreeMap<ClientId, f64>,
    pub permutations_used: usize,
    pub truncation_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// `Q_t` in pull-slot order.
    pub pull_set: Vec<ClientId>,
    /// Pulled clients that sent nothing.
    pub forfeited: Vec<ClientId>,
    pub push_contenders: Vec<ClientId>,
    pub push_outcome: Option<PushOutcome>,
    /// `[Y]`, ascending.
    pub received: Vec<ClientId>,
    /// `T_k` per received client, slots.
    pub slot_costs: BTreeMap<ClientId, usize>,
    pub time_cost: usize,
    pub eval: EvalReport,
    pub valuation: Option<ValuationSummary>,
    pub values: BTreeMap<ClientId, f64>,
    #[serde(skip)]
    pub snapshot: Option<UtilitySnapshot>,
}

impl RoundRecord {
    pub fn push_successes(&self) -> usize {
        self.push_outcome.as_ref().map_or(0, |o| o.successes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub policy: Policy,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub cumulative_slots: usize,
    pub fingerprint: String,
    pub final_model: ModelParams,
}

impl RunTrace {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.eval.accuracy)
    }
}

/// FNV-1a over the debug rendering of the run inputs.
fn fingerprint(env: &Environment, cfg: &SimConfig, policy: &Policy, seed: u64) -> String {
    let text = format!(
        "{cfg:?}|{policy:?}|{seed}|{}|{}|{}|{}",
        env.arch,
        env.num_clients(),
        env.validation.len(),
        env.test.len()
    );
    let hash = text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    format!("{hash:016x}")
}

/// Training seed for client `k` in frame `round`.
pub fn client_train_seed(seed: u64, round: usize, client: ClientId) -> u64 {
    rng::derive_seed(seed, &[tag::TRAIN, round as u64, client as u64])
}

pub fn client_noise_seed(seed: u64, round: usize, client: ClientId) -> u64 {
    rng::derive_seed(seed, &[tag::NOISE, round as u64, client as u64])
}

/// Epochs a client trains this frame: all `E` for regular clients, a
/// uniform draw from `[1, E]` for stragglers.
pub fn effective_epochs(
    env: &Environment,
    train: &TrainConfig,
    seed: u64,
    round: usize,
    client: ClientId,
) -> Result<usize> {
    let profile = env.client(client)?;
    if !profile.is_straggler {
        return Ok(train.epochs);
    }
    let mut r = rng::stream(seed, &[tag::STRAGGLER_EPOCHS, round as u64, client as u64]);
    Ok(r.random_range(1..=train.epochs))
}

/// `ClientUpdate`: local training from the broadcast model plus the client's
/// privacy noise.
pub fn client_update(
    env: &Environment,
    global: &ModelParams,
    train: &TrainConfig,
    seed: u64,
    round: usize,
    client: ClientId,
) -> Result<ModelParams> {
    let profile = env.client(client)?;
    let epochs = effective_epochs(env, train, seed, round, client)?;
    let local = local_train(
        global,
        &profile.dataset,
        train,
        epochs,
        client_train_seed(seed, round, client),
    )?;
    add_noise(
        &local,
        profile.noise_std,
        client_noise_seed(seed, round, client),
    )
}

fn computation_times(env: &Environment, seed: u64, round: usize) -> Result<Vec<f64>> {
    env.clients
        .iter()
        .map(|c| {
            let fresh = c.compute.resample(rng::derive_seed(
                seed,
                &[tag::COMPUTE, round as u64, c.id as u64],
            ))?;
            local_latency(&fresh, env.compute.eps, env.compute.p_scale)
        })
        .collect()
}

/// Clients whose raw data the centralized baseline pools.
pub fn central_sample(env: &Environment, fraction: f64, seed: u64) -> Vec<ClientId> {
    let k = env.num_clients();
    let count = ((fraction * k as f64).round() as usize).clamp(1, k);
    let mut ids: Vec<ClientId> = index::sample(&mut rng::stream(seed, &[tag::CENTRAL]), k, count)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    ids.sort_unstable();
    ids
}

fn run_centralized_round(
    env: &Environment,
    state: &SimState,
    cfg: &SimConfig,
    policy: &Policy,
    seed: u64,
) -> Result<(SimState, RoundRecord)> {
    let t = state.round;
    let pooled = LabeledDataset::concat(
        central_sample(env, cfg.central_fraction, seed)
            .iter()
            .map(|&k| env.client(k).map(|c| &c.dataset))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let global = local_train(
        &state.global,
        &pooled,
        &cfg.train,
        1,
        client_train_seed(seed, t, 0),
    )?;
    let eval = evaluate(&global, &env.test)?;
    let record = RoundRecord {
        round: t,
        pull_set: Vec::new(),
        forfeited: Vec::new(),
        push_contenders: Vec::new(),
        push_outcome: None,
        received: Vec::new(),
        slot_costs: BTreeMap::new(),
        time_cost: policy.pull_budget.max(1),
        eval,
        valuation: None,
        values: state.values.clone(),
        snapshot: None,
    };
    let next = SimState {
        round: t + 1,
        global,
        values: state.values.clone(),
        pending: BTreeMap::new(),
    };
    Ok((next, record))
}

/// One frame: schedule, broadcast, pull, push contention, aggregation,
/// valuation and the frame's time cost.
pub fn run_round(
    env: &Environment,
    state: &SimState,
    cfg: &SimConfig,
    policy: &Policy,
    seed: u64,
) -> Result<(SimState, RoundRecord)> {
    if policy.kind == PolicyKind::Centralized {
        return run_centralized_round(env, state, cfg, policy, seed);
    }
    let t = state.round;
    let frame = &cfg.frame;
    let k_total = env.num_clients();
    let pull_now = policy.pull_slots_at(t, frame);
    let pull_set = select_pull_set(
        policy,
        t,
        &state.values,
        k_total,
        frame.slots,
        policy.pull_budget,
        seed,
    )?;
    debug_assert!(pull_set.len() <= pull_now);
    let comp = computation_times(env, seed, t)?;
    let comp_of = |k: ClientId| comp[k - 1];

    // pull period
    let mut slot_costs = BTreeMap::new();
    let mut forfeited = Vec::new();
    let mut pulled = Vec::new();
    for (i, &k) in pull_set.iter().enumerate() {
        let slot = i + 1;
        if cfg.late_pull == LatePull::Forfeit && comp_of(k) > slot as f64 * frame.slot_len {
            forfeited.push(k);
            continue;
        }
        let frame_q = FrameConfig {
            pull_slots: pull_now,
            ..*frame
        };
        slot_costs.insert(
            k,
            mac::time_cost_ue(UeKind::Pull { slot }, comp_of(k), &frame_q)?,
        );
        pulled.push(k);
    }

    // push period
    let pulled_set: BTreeSet<ClientId> = pull_set.iter().copied().collect();
    let mut pending = state.pending.clone();
    pending.retain(|k, _| !pulled_set.contains(k));
    let mut contenders = Vec::new();
    let mut outcome = None;
    let mut push_winners = Vec::new();
    let mut collided = Vec::new();
    if policy.push_active(t, frame) {
        let reoffer: Vec<ClientId> = if cfg.on_collision == CollisionPolicy::Reoffer {
            pending.keys().copied().collect()
        } else {
            Vec::new()
        };
        let pool: Vec<ClientId> = (1..=k_total)
            .filter(|k| !pulled_set.contains(k) && !reoffer.contains(k))
            .collect();
        contenders = reoffer.clone();
        match cfg.fixed_push_n {
            Some(n) => {
                let extra = n.saturating_sub(contenders.len()).min(pool.len());
                let mut r = rng::stream(seed, &[tag::PUSH_POOL, t as u64]);
                contenders.extend(
                    index::sample(&mut r, pool.len(), extra)
                        .into_iter()
                        .map(|i| pool[i]),
                );
            }
            None => contenders.extend(
                pool.iter()
                    .copied()
                    .filter(|&k| comp_of(k) <= frame.frame_time()),
            ),
        }
        contenders.sort_unstable();
        let mut r = rng::stream(seed, &[tag::PUSH_SLOTS, t as u64]);
        let o = mac::simulate_push_frame_with(contenders.len(), frame.push_slots(), &mut r)?;
        for (&k, &ok) in contenders.iter().zip(&o.success) {
            if ok {
                let busy = if pending.contains_key(&k) {
                    0.0
                } else {
                    comp_of(k).min(frame.frame_time())
                };
                slot_costs.insert(k, mac::time_cost_ue(UeKind::Push, busy, frame)?);
                push_winners.push(k);
            } else {
                collided.push(k);
            }
        }
        outcome = Some(o);
    }

    // local training, merged in client-id order
    let mut to_train: Vec<ClientId> = pulled
        .iter()
        .chain(&push_winners)
        .copied()
        .filter(|k| !pending.contains_key(k))
        .collect();
    if cfg.on_collision == CollisionPolicy::Reoffer {
        to_train.extend(
            collided
                .iter()
                .copied()
                .filter(|k| !pending.contains_key(k)),
        );
    }
    to_train.sort_unstable();
    to_train.dedup();
    let trained: Vec<(ClientId, ModelParams)> = to_train
        .par_iter()
        .map(|&k| client_update(env, &state.global, &cfg.train, seed, t, k).map(|m| (k, m)))
        .collect::<Result<_>>()?;
    let mut models: BTreeMap<ClientId, ModelParams> = trained.into_iter().collect();
    for &k in &push_winners {
        if let Some(m) = pending.remove(&k) {
            models.insert(k, m);
        }
    }
    let mut next_pending = BTreeMap::new();
    if cfg.on_collision == CollisionPolicy::Reoffer {
        for &k in &collided {
            let m = pending
                .remove(&k)
                .or_else(|| models.remove(&k))
                .expect("collided update trained");
            next_pending.insert(k, m);
        }
    }

    let mut received: Vec<ClientId> = pulled.iter().chain(&push_winners).copied().collect();
    received.sort_unstable();
    let weight = |k: ClientId| env.client(k).map(|c| c.num_samples as f64);

    let (global, time_cost) = if received.is_empty() {
        (state.global.clone(), frame.slots)
    } else {
        let entries = received
            .iter()
            .map(|&k| Ok((weight(k)?, &models[&k])))
            .collect::<Result<Vec<_>>>()?;
        let costs: Vec<usize> = received.iter().map(|k| slot_costs[k]).collect();
        (fed_average(&entries)?, mac::frame_time_cost(&costs)?)
    };

    // valuation
    let mut values = state.values.clone();
    let mut valuation = None;
    let mut snapshot = None;
    if policy.kind.uses_valuation() {
        let valued: Vec<ClientId> = match cfg.value_set {
            ValueSet::PullOnly => pulled.clone(),
            ValueSet::AllReceived => received.clone(),
        };
        if !valued.is_empty() {
            let updates = valued
                .iter()
                .map(|&k| Ok((k, (weight(k)?, models[&k].clone()))))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let ctx = UtilityContext::new(state.global.clone(), updates, env.validation.clone())?;
            let gtg = GtgConfig {
                seed: rng::derive_seed(seed, &[tag::VALUATION, t as u64]),
                ..cfg.gtg
            };
            let est = gtg_shapley(&ctx, &gtg)?;
            for (&k, &nu) in &est.values {
                let prev = values.get(&k).copied().unwrap_or(0.0);
                values.insert(k, exp_average(prev, nu, cfg.zeta)?);
            }
            if cfg.capture_snapshots {
                snapshot = Some(UtilitySnapshot {
                    round: t,
                    base: state.global.clone(),
                    updates: valued
                        .iter()
                        .map(|&k| Ok((k, weight(k)?, models[&k].clone())))
                        .collect::<Result<_>>()?,
                    validation: env.validation.clone(),
                });
            }
            valuation = Some(ValuationSummary {
                valued,
                round_values: est.values,
                permutations_used: est.permutations_used,
                truncation_events: est.truncation_events,
            });
        }
    }

    let eval = evaluate(&global, &env.test)?;
    let record = RoundRecord {
        round: t,
        pull_set,
        forfeited,
        push_contenders: contenders,
        push_outcome: outcome,
        received,
        slot_costs,
        time_cost,
        eval,
        valuation,
        values: values.clone(),
        snapshot,
    };
    let next = SimState {
        round: t + 1,
        global,
        values,
        pending: next_pending,
    };
    Ok((next, record))
}

/// Runs frames until the round budget is spent (or the target accuracy is
/// reached, when configured).
pub fn run_training(
    env: &Environment,
    cfg: &SimConfig,
    policy: &Policy,
    seed: u64,
) -> Result<RunTrace> {
    cfg.validate()?;
    policy.validate(&cfg.frame)?;
    if env.num_clients() == 0 {
        return Err(Error::Empty("clients"));
    }
    let initial = init_model(&env.arch, rng::derive_seed(seed, &[tag::INIT]))?;
    let mut state = SimState::initial(initial);
    let mut records = Vec::new();
    let mut cumulative = 0;
    for _ in 0..cfg.round_budget() {
        let (next, record) = run_round(env, &state, cfg, policy, seed)?;
        cumulative += record.time_cost;
        let reached = cfg
            .target_accuracy
            .is_some_and(|th| record.eval.accuracy >= th);
        if record.snapshot.is_some() {
            records
                .iter_mut()
                .for_each(|r: &mut RoundRecord| r.snapshot = None);
        }
        records.push(record);
        state = next;
        if reached {
            break;
        }
    }
    Ok(RunTrace {
        policy: *policy,
        seed,
        records,
        cumulative_slots: cumulative,
        fingerprint: fingerprint(env, cfg, policy, seed),
        final_model: state.global,
    })
}

/// Cumulative slots up to and including the first frame whose accuracy
/// reaches `threshold`.
pub fn time_to_accuracy(trace: &RunTrace, threshold: f64) -> Option<usize> {
    let mut slots = 0;
    for r in &trace.records {
        slots += r.time_cost;
        if r.eval.accuracy >= threshold {
            return Some(slots);
        }
    }
    None
}
