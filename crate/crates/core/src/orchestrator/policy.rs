use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::ClientId;
use crate::error::{Error, Result};
use crate::mac::FrameConfig;
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Shapley-greedy pull plus framed-ALOHA push after an all-pull warmup.
    Proposed,
    /// Shapley-greedy pull on every slot.
    GreedyShap,
    /// Uniformly random pull on every slot, no valuation.
    #[serde(rename = "fedavg_random")]
    FedAvgRandom,
    /// The server trains on data uploaded by a fraction of the clients.
    Centralized,
    /// The proposed scheduler with the push period switched off.
    OnlyPull,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Proposed,
        PolicyKind::GreedyShap,
        PolicyKind::FedAvgRandom,
        PolicyKind::Centralized,
        PolicyKind::OnlyPull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Proposed => "proposed",
            PolicyKind::GreedyShap => "greedy_shap",
            PolicyKind::FedAvgRandom => "fedavg_random",
            PolicyKind::Centralized => "centralized",
            PolicyKind::OnlyPull => "only_pull",
        }
    }

    pub fn uses_valuation(self) -> bool {
        matches!(
            self,
            PolicyKind::Proposed | PolicyKind::GreedyShap | PolicyKind::OnlyPull
        )
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == norm || (norm == "fedavg" && *k == PolicyKind::FedAvgRandom))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown policy `{s}`; expected one of proposed, greedy_shap, fedavg_random, centralized, only_pull"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    /// Pull slots per frame once warmup is over.
    pub pull_budget: usize,
    pub push_enabled: bool,
    /// Leading frames that pull round-robin blocks of `M` clients.
    pub warmup_rounds: usize,
}

impl Policy {
    /// The standard configuration of each policy for a frame layout and
    /// client count.
    pub fn standard(kind: PolicyKind, frame: &FrameConfig, clients: usize) -> Policy {
        let m = frame.slots;
        match kind {
            PolicyKind::Proposed => Policy {
                kind,
                pull_budget: frame.pull_slots,
                push_enabled: true,
                warmup_rounds: frame.warmup_frames,
            },
            PolicyKind::GreedyShap => Policy {
                kind,
                pull_budget: m,
                push_enabled: false,
                warmup_rounds: clients.div_ceil(m.max(1)),
            },
            PolicyKind::FedAvgRandom => Policy {
                kind,
                pull_budget: m,
                push_enabled: false,
                warmup_rounds: 0,
            },
            PolicyKind::Centralized => Policy {
                kind,
                pull_budget: frame.pull_slots,
                push_enabled: false,
                warmup_rounds: 0,
            },
            PolicyKind::OnlyPull => Policy {
                kind,
                pull_budget: m,
                push_enabled: false,
                warmup_rounds: frame.warmup_frames,
            },
        }
    }

    pub fn validate(&self, frame: &FrameConfig) -> Result<()> {
        if self.pull_budget > frame.slots {
            return Err(Error::Config(format!(
                "{}: pull budget {} exceeds {} slots",
                self.kind, self.pull_budget, frame.slots
            )));
        }
        if self.kind == PolicyKind::OnlyPull
            && (self.push_enabled || self.pull_budget != frame.slots)
        {
            return Err(Error::Config(
                "only_pull requires Q = M and push disabled".into(),
            ));
        }
        Ok(())
    }

    pub fn in_warmup(&self, round: usize) -> bool {
        round < self.warmup_rounds
    }

    /// Push slots are open this frame.
    pub fn push_active(&self, round: usize, frame: &FrameConfig) -> bool {
        self.push_enabled && !self.in_warmup(round) && self.pull_budget < frame.slots
    }

    /// Pull slots scheduled this frame.
    pub fn pull_slots_at(&self, round: usize, frame: &FrameConfig) -> usize {
        if self.in_warmup(round) {
            frame.slots
        } else {
            self.pull_budget
        }
    }
}

/// Round-robin block `round` of `size` consecutive client ids (1-based,
/// wrapping around `clients`).
pub fn round_robin_block(round: usize, size: usize, clients: usize) -> Vec<ClientId> {
    let size = size.min(clients);
    (0..size)
        .map(|j| (round * size + j) % clients + 1)
        .collect()
}

/// Top `count` clients by value, ties broken by ascending id.
pub fn top_by_value(
    values: &BTreeMap<ClientId, f64>,
    clients: usize,
    count: usize,
) -> Vec<ClientId> {
    let mut ranked: Vec<(ClientId, f64)> = (1..=clients)
        .map(|k| (k, values.get(&k).copied().unwrap_or(0.0)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(count).map(|(k, _)| k).collect()
}

/// The pull schedule for frame `round`, in pull-slot order.
///
/// Warmup frames pull round-robin blocks of `M` clients; afterwards the
/// valuation policies pull the `Q` highest-valued clients and FedAvgRandom
/// pulls a uniform sample of `min(Q, K)`. Centralized pulls nobody.
pub fn select_pull_set(
    policy: &Policy,
    round: usize,
    values: &BTreeMap<ClientId, f64>,
    clients: usize,
    slots: usize,
    pull_budget: usize,
    seed: u64,
) -> Result<Vec<ClientId>> {
    if pull_budget > slots {
        return Err(Error::param(
            "pull_budget",
            format!("Q = {pull_budget} exceeds M = {slots}"),
        ));
    }
    if clients == 0 {
        return Err(Error::Empty("clients"));
    }
    Ok(match policy.kind {
        PolicyKind::Centralized => Vec::new(),
        _ if policy.in_warmup(round) => round_robin_block(round, slots, clients),
        PolicyKind::FedAvgRandom => {
            let mut r = rng::stream(seed, &[tag::SELECTION, round as u64]);
            index::sample(&mut r, clients, pull_budget.min(clients))
                .into_iter()
                .map(|i| i + 1)
                .collect()
        }
        PolicyKind::Proposed | PolicyKind::GreedyShap | PolicyKind::OnlyPull => {
            top_by_value(values, clients, pull_budget)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(m: usize, q: usize) -> FrameConfig {
        FrameConfig {
            slots: m,
            pull_slots: q,
            slot_len: 1.0,
            warmup_frames: 2,
        }
    }

    #[test]
    fn warmup_blocks() {
        let p = Policy::standard(PolicyKind::GreedyShap, &frame(3, 3), 6);
        assert_eq!(p.warmup_rounds, 2);
        let v = BTreeMap::new();
        assert_eq!(
            select_pull_set(&p, 0, &v, 6, 3, 3, 1).unwrap(),
            vec![1, 2, 3]
        );
        assert_eq!(
            select_pull_set(&p, 1, &v, 6, 3, 3, 1).unwrap(),
            vec![4, 5, 6]
        );
        assert_eq!(round_robin_block(2, 4, 10), vec![9, 10, 1, 2]);
    }

    #[test]
    fn greedy_ties_by_id() {
        let p = Policy {
            warmup_rounds: 0,
            ..Policy::standard(PolicyKind::Proposed, &frame(4, 2), 4)
        };
        let v: BTreeMap<_, _> = [(1, 0.5), (2, 0.1), (3, 0.5), (4, 0.2)]
            .into_iter()
            .collect();
        assert_eq!(select_pull_set(&p, 5, &v, 4, 4, 2, 1).unwrap(), vec![1, 3]);
    }

    #[test]
    fn random_selection_is_seeded() {
        let p = Policy::standard(PolicyKind::FedAvgRandom, &frame(5, 5), 30);
        let v = BTreeMap::new();
        let a = select_pull_set(&p, 3, &v, 30, 5, 5, 9).unwrap();
        assert_eq!(a, select_pull_set(&p, 3, &v, 30, 5, 5, 9).unwrap());
        assert_eq!(a.len(), 5);
        let mut dedup = a.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 5);
        assert_eq!(select_pull_set(&p, 3, &v, 3, 5, 5, 9).unwrap().len(), 3);
    }

    #[test]
    fn budget_checks() {
        let p = Policy::standard(PolicyKind::Proposed, &frame(4, 2), 4);
        assert!(select_pull_set(&p, 0, &BTreeMap::new(), 4, 4, 5, 1).is_err());
        let bad = Policy {
            push_enabled: true,
            ..Policy::standard(PolicyKind::OnlyPull, &frame(4, 2), 4)
        };
        assert!(bad.validate(&frame(4, 2)).is_err());
    }

    #[test]
    fn policy_names_round_trip() {
        for k in PolicyKind::ALL {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
            assert_eq!(
                serde_json::to_string(&k).unwrap(),
                format!("\"{}\"", k.name())
            );
        }
        assert_eq!(
            "FedAvg".parse::<PolicyKind>().unwrap(),
            PolicyKind::FedAvgRandom
        );
        assert!("nope".parse::<PolicyKind>().is_err());
    }
}
