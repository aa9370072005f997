//! Coalition utilities and Shapley valuation of client updates.
//!
//! Coalitions are bitmasks over a game's player list: bit `i` set means
//! `players()[i]` is a member. Two utilities are provided: [`UtilityContext`]
//! evaluates the federated average of a coalition's updates on the
//! validation set, and [`TabularGame`] looks values up in a table (used for
//! testing and for the `valuate` subcommand).
//!
//! # Tabular game files
//!
//! One `mask,value` pair per line. The mask is binary with a `0b` prefix
//! (`0b1010,0.75`) or plain decimal. Bit `i` (least significant is bit 0)
//! stands for player `i`. Blank lines and lines starting with `#` are
//! ignored. The player count is one more than the highest bit used and every
//! one of the `2^n` coalitions must be listed exactly once.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ClientId, LabeledDataset};
use crate::error::{Error, Result};
use crate::learn::{evaluate, fed_average, ModelParams};
use crate::rng::{self, tag};

pub type Coalition = u64;

/// Largest game for exhaustive subset enumeration.
pub const EXACT_PLAYER_LIMIT: usize = 12;
/// Coalitions are `u64` bitmasks.
pub const MAX_PLAYERS: usize = 64;

pub trait CoalitionGame {
    fn players(&self) -> &[ClientId];
    fn value(&self, coalition: Coalition) -> Result<f64>;

    fn grand_coalition(&self) -> Coalition {
        full_mask(self.players().len())
    }
}

fn full_mask(n: usize) -> Coalition {
    if n >= 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

/// Utility of client-update coalitions: validation accuracy of the
/// sample-weighted average of the members' models, or of the base model for
/// the empty coalition.
#[derive(Debug, Clone)]
pub struct UtilityContext {
    pub base: ModelParams,
    ids: Vec<ClientId>,
    updates: Vec<(f64, ModelParams)>,
    pub validation: LabeledDataset,
}

impl UtilityContext {
    pub fn new(
        base: ModelParams,
        updates: BTreeMap<ClientId, (f64, ModelParams)>,
        validation: LabeledDataset,
    ) -> Result<Self> {
        if updates.is_empty() {
            return Err(Error::Empty("client updates"));
        }
        if updates.len() > MAX_PLAYERS {
            return Err(Error::param(
                "updates",
                format!("at most {MAX_PLAYERS} players supported"),
            ));
        }
        if let Some((_, (_, p))) = updates.iter().find(|(_, (_, p))| p.arch != base.arch) {
            return Err(Error::ArchMismatch {
                expected: base.arch.to_string(),
                found: p.arch.to_string(),
            });
        }
        let (ids, updates) = updates.into_iter().unzip();
        Ok(UtilityContext {
            base,
            ids,
            updates,
            validation,
        })
    }

    /// Coalition mask for a list of client ids, in any order.
    pub fn coalition_of(&self, members: &[ClientId]) -> Result<Coalition> {
        members.iter().try_fold(0u64, |mask, id| {
            let pos = self
                .ids
                .iter()
                .position(|x| x == id)
                .ok_or(Error::UnknownClient(*id))?;
            Ok(mask | (1 << pos))
        })
    }

    /// `U(S)` for a set of client ids.
    pub fn utility(&self, members: &[ClientId]) -> Result<f64> {
        self.value(self.coalition_of(members)?)
    }

    pub fn update(&self, id: ClientId) -> Option<&(f64, ModelParams)> {
        self.ids
            .iter()
            .position(|&x| x == id)
            .map(|i| &self.updates[i])
    }
}

impl CoalitionGame for UtilityContext {
    fn players(&self) -> &[ClientId] {
        &self.ids
    }

    fn value(&self, coalition: Coalition) -> Result<f64> {
        if coalition & !self.grand_coalition() != 0 {
            return Err(Error::param(
                "coalition",
                format!("mask {coalition:#b} has unknown members"),
            ));
        }
        if coalition == 0 {
            return Ok(evaluate(&self.base, &self.validation)?.accuracy);
        }
        let entries: Vec<(f64, &ModelParams)> = self
            .updates
            .iter()
            .enumerate()
            .filter(|(i, _)| coalition & (1 << i) != 0)
            .map(|(_, (n, p))| (*n, p))
            .collect();
        Ok(evaluate(&fed_average(&entries)?, &self.validation)?.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularGame {
    players: Vec<ClientId>,
    values: Vec<f64>,
}

impl TabularGame {
    /// `values[mask]` is the utility of coalition `mask`; the length must be
    /// a power of two.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = values.len().trailing_zeros() as usize;
        if values.len() != 1usize << n {
            return Err(Error::Game(format!(
                "{} values is not a power of two",
                values.len()
            )));
        }
        if n > 30 {
            return Err(Error::Game(format!("{n} players is too many for a table")));
        }
        Ok(TabularGame {
            players: (0..n).collect(),
            values,
        })
    }

    pub fn from_fn(players: usize, f: impl Fn(Coalition) -> f64) -> Result<Self> {
        Self::new((0..1u64 << players).map(f).collect())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<Coalition, f64> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Game(format!("line {}: {msg}", lineno + 1));
            let (mask, value) = line
                .split_once(',')
                .ok_or_else(|| err(format!("expected `mask,value`, got `{line}`")))?;
            let mask = mask.trim();
            let mask = match mask.strip_prefix("0b") {
                Some(bits) => Coalition::from_str_radix(bits, 2),
                None => mask.parse(),
            }
            .map_err(|e| err(format!("bad mask `{mask}`: {e}")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|e| err(format!("bad value `{}`: {e}", value.trim())))?;
            if !value.is_finite() {
                return Err(err("value must be finite".into()));
            }
            if entries.insert(mask, value).is_some() {
                return Err(err(format!("duplicate mask {mask:#b}")));
            }
        }
        let top = entries
            .keys()
            .copied()
            .max()
            .ok_or(Error::Game("no entries".into()))?;
        let players = (64 - top.leading_zeros()) as usize;
        let size = 1usize << players;
        if entries.len() != size {
            let missing = (0..size as u64)
                .find(|m| !entries.contains_key(m))
                .unwrap_or(0);
            return Err(Error::Game(format!(
                "{players} players need {size} coalitions, found {}; first missing mask {missing:#b}",
                entries.len()
            )));
        }
        Self::new(entries.into_values().collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let width = self.players.len().max(1);
        self.values
            .iter()
            .enumerate()
            .map(|(m, v)| format!("0b{m:0width$b},{v}\n"))
            .collect()
    }
}

impl CoalitionGame for TabularGame {
    fn players(&self) -> &[ClientId] {
        &self.players
    }

    fn value(&self, coalition: Coalition) -> Result<f64> {
        self.values.get(coalition as usize).copied().ok_or_else(|| {
            Error::param(
                "coalition",
                format!("mask {coalition:#b} has unknown members"),
            )
        })
    }
}

/// Memoises coalition values for the duration of one estimator call.
struct Cached<'a, G: ?Sized> {
    game: &'a G,
    memo: HashMap<Coalition, f64>,
}

impl<'a, G: CoalitionGame + ?Sized> Cached<'a, G> {
    fn new(game: &'a G) -> Self {
        Cached {
            game,
            memo: HashMap::new(),
        }
    }

    fn value(&mut self, c: Coalition) -> Result<f64> {
        if let Some(&v) = self.memo.get(&c) {
            return Ok(v);
        }
        let v = self.game.value(c)?;
        self.memo.insert(c, v);
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    TruncatedMc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEstimate {
    pub values: BTreeMap<ClientId, f64>,
    pub method: Method,
    pub permutations_used: usize,
    pub truncation_events: usize,
    /// Distinct coalitions evaluated.
    pub utility_calls: usize,
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Subset-form Shapley values
/// `nu_k = (1/Y) sum_{S not containing k} (U(S + k) - U(S)) / C(Y-1, |S|)`.
pub fn exact_shapley<G: CoalitionGame + ?Sized>(game: &G) -> Result<ShapleyEstimate> {
    let players = game.players();
    let n = players.len();
    if n == 0 {
        return Err(Error::Empty("players"));
    }
    if n > EXACT_PLAYER_LIMIT {
        return Err(Error::TooManyPlayers {
            players: n,
            limit: EXACT_PLAYER_LIMIT,
        });
    }
    let table: Vec<f64> = (0..1u64 << n)
        .map(|m| game.value(m))
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = (0..n)
        .map(|s| 1.0 / (n as f64 * binomial(n - 1, s)))
        .collect();
    let mut values = BTreeMap::new();
    for (i, &id) in players.iter().enumerate() {
        let bit = 1u64 << i;
        let nu: f64 = (0..1u64 << n)
            .filter(|m| m & bit == 0)
            .map(|m| {
                (table[(m | bit) as usize] - table[m as usize]) * weights[m.count_ones() as usize]
            })
            .sum();
        values.insert(id, nu);
    }
    Ok(ShapleyEstimate {
        values,
        method: Method::Exact,
        permutations_used: 0,
        truncation_events: 0,
        utility_calls: table.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationOrder {
    /// Random permutations; permutation `j` starts with player `j mod Y` and
    /// shuffles the rest from its own substream.
    Guided,
    /// Every permutation in lexicographic order (small games only).
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtgConfig {
    pub max_permutations: usize,
    /// Within-permutation truncation threshold on `|U(full) - U(prefix)|`,
    /// also the between-permutation convergence threshold.
    pub tolerance: f64,
    /// Consecutive permutations whose running means all move less than
    /// `tolerance` before sampling stops.
    pub convergence_window: usize,
    pub seed: u64,
    pub order: PermutationOrder,
}

impl Default for GtgConfig {
    fn default() -> Self {
        GtgConfig {
            max_permutations: 50,
            tolerance: 1e-3,
            convergence_window: 5,
            seed: 0,
            order: PermutationOrder::Guided,
        }
    }
}

/// Truncated Monte-Carlo permutation sampling in the GTG style.
pub fn gtg_shapley<G: CoalitionGame + ?Sized>(
    game: &G,
    cfg: &GtgConfig,
) -> Result<ShapleyEstimate> {
    if !(cfg.tolerance >= 0.0 && cfg.tolerance.is_finite()) {
        return Err(Error::param(
            "tolerance",
            format!("must be nonnegative, got {}", cfg.tolerance),
        ));
    }
    if cfg.max_permutations == 0 || cfg.convergence_window == 0 {
        return Err(Error::param(
            "max_permutations",
            "permutation budget and window must be positive",
        ));
    }
    let players = game.players().to_vec();
    let n = players.len();
    if n == 0 {
        return Err(Error::Empty("players"));
    }
    if n > MAX_PLAYERS {
        return Err(Error::param(
            "players",
            format!("at most {MAX_PLAYERS} players supported"),
        ));
    }

    let mut cache = Cached::new(game);
    let full = cache.value(game.grand_coalition())?;
    let empty = cache.value(0)?;

    let mut sums = vec![0.0; n];
    let mut prev_means = vec![0.0; n];
    let mut stable = 0usize;
    let mut used = 0usize;
    let mut truncations = 0usize;
    let mut lex: Vec<usize> = (0..n).collect();
    let mut lex_done = false;

    while used < cfg.max_permutations {
        let perm = match cfg.order {
            PermutationOrder::Guided => guided_permutation(n, used, cfg.seed),
            PermutationOrder::Exhaustive => {
                if lex_done {
                    break;
                }
                let p = lex.clone();
                lex_done = !next_permutation(&mut lex);
                p
            }
        };

        let mut prefix: Coalition = 0;
        let mut prev = empty;
        for &player in &perm {
            if (full - prev).abs() < cfg.tolerance {
                truncations += 1;
                break;
            }
            prefix |= 1 << player;
            let u = cache.value(prefix)?;
            sums[player] += u - prev;
            prev = u;
        }
        used += 1;

        let count = used as f64;
        let max_change = sums
            .iter()
            .zip(&prev_means)
            .map(|(s, p)| (s / count - p).abs())
            .fold(0.0, f64::max);
        for (p, s) in prev_means.iter_mut().zip(&sums) {
            *p = s / count;
        }
        if used > 1 && max_change < cfg.tolerance {
            stable += 1;
            if stable >= cfg.convergence_window {
                break;
            }
        } else {
            stable = 0;
        }
    }

    let count = used.max(1) as f64;
    Ok(ShapleyEstimate {
        values: players
            .iter()
            .zip(&sums)
            .map(|(&id, s)| (id, s / count))
            .collect(),
        method: Method::TruncatedMc,
        permutations_used: used,
        truncation_events: truncations,
        utility_calls: cache.memo.len(),
    })
}

fn guided_permutation(n: usize, index: usize, seed: u64) -> Vec<usize> {
    let head = index % n;
    let mut rest: Vec<usize> = (0..n).filter(|&p| p != head).collect();
    rest.shuffle(&mut rng::stream(seed, &[tag::PERMUTATION, index as u64]));
    let mut perm = Vec::with_capacity(n);
    perm.push(head);
    perm.extend(rest);
    perm
}

/// Advances to the next lexicographic permutation; false after the last.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// `zeta * prev + (1 - zeta) * round`.
pub fn exp_average(prev: f64, round: f64, zeta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&zeta) {
        return Err(Error::param(
            "zeta",
            format!("must lie in [0, 1], got {zeta}"),
        ));
    }
    Ok(zeta * prev + (1.0 - zeta) * round)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::learn::{init_model, Arch};

    #[test]
    fn two_player_hand_values() {
        let g = TabularGame::new(vec![0.0, 0.5, 0.3, 1.0]).unwrap();
        let est = exact_shapley(&g).unwrap();
        assert!((est.values[&0] - 0.6).abs() < 1e-12);
        assert!((est.values[&1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn exact_guard() {
        let g = TabularGame::from_fn(13, |m| m.count_ones() as f64).unwrap();
        let err = exact_shapley(&g).unwrap_err();
        assert!(err.to_string().contains("gtg_shapley"));
    }

    #[test]
    fn additive_game_recovers_weights() {
        let a = [0.3, -0.1, 0.25, 0.05, 0.4];
        let g = TabularGame::from_fn(5, |m| {
            (0..5).filter(|i| m & (1 << i) != 0).map(|i| a[i]).sum()
        })
        .unwrap();
        let cfg = GtgConfig {
            max_permutations: 7,
            tolerance: 0.0,
            ..GtgConfig::default()
        };
        let est = gtg_shapley(&g, &cfg).unwrap();
        for (i, ai) in a.iter().enumerate() {
            assert!((est.values[&i] - ai).abs() < 1e-12);
        }
    }

    #[test]
    fn exhaustive_enumeration_visits_all() {
        let mut p = vec![0, 1, 2, 3];
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 24);
        assert_eq!(p, vec![3, 2, 1, 0]);
    }

    #[test]
    fn truncation_counts_and_zero_marginals() {
        // the first player carries all the value
        let g = TabularGame::from_fn(4, |m| if m & 1 != 0 { 1.0 } else { 0.0 }).unwrap();
        let cfg = GtgConfig {
            max_permutations: 24,
            tolerance: 1e-6,
            order: PermutationOrder::Exhaustive,
            ..GtgConfig::default()
        };
        let est = gtg_shapley(&g, &cfg).unwrap();
        assert!(est.truncation_events > 0);
        assert!((est.values[&0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exp_average_values() {
        assert_eq!(exp_average(0.2, 0.6, 0.0).unwrap(), 0.6);
        assert_eq!(exp_average(0.2, 0.6, 1.0).unwrap(), 0.2);
        assert!((exp_average(0.2, 0.6, 0.5).unwrap() - 0.4).abs() < 1e-15);
        assert!(exp_average(0.2, 0.6, 1.5).is_err());
        assert!(exp_average(0.2, 0.6, -0.1).is_err());
    }

    #[test]
    fn tabular_file_format() {
        let g =
            TabularGame::parse("# two players\n0b00,0\n0b01,0.5\n\n0b10,0.3\n0b11,1.0\n").unwrap();
        assert_eq!(g.players(), &[0, 1]);
        assert_eq!(g.value(0b11).unwrap(), 1.0);
        assert_eq!(TabularGame::parse(&g.to_text()).unwrap(), g);
        assert!(TabularGame::parse("0b00,0\n0b11,1\n")
            .unwrap_err()
            .to_string()
            .contains("missing"));
        assert!(TabularGame::parse("0b00,0\n0b00,1\n").is_err());
        assert!(TabularGame::parse("0b0x,0\n")
            .unwrap_err()
            .to_string()
            .contains("line 1"));
        assert!(TabularGame::parse("0,0\n1,0.2\n").is_ok());
    }

    fn model_context() -> UtilityContext {
        let val = generate_synthetic(200, 3, 3, 4.0, 1).unwrap();
        let arch = Arch::logistic(3, 3);
        let base = init_model(&arch, 1).unwrap();
        let mut updates = BTreeMap::new();
        updates.insert(4, (10.0, base.clone()));
        updates.insert(7, (20.0, init_model(&arch, 2).unwrap()));
        updates.insert(9, (5.0, init_model(&arch, 3).unwrap()));
        UtilityContext::new(base, updates, val).unwrap()
    }

    #[test]
    fn model_utility_conventions() {
        let ctx = model_context();
        let empty = ctx.utility(&[]).unwrap();
        assert_eq!(
            empty,
            evaluate(&ctx.base, &ctx.validation).unwrap().accuracy
        );
        assert_eq!(ctx.utility(&[4]).unwrap(), empty);
        assert_eq!(ctx.utility(&[7, 9]).unwrap(), ctx.utility(&[9, 7]).unwrap());
        assert!(matches!(ctx.utility(&[5]), Err(Error::UnknownClient(5))));
        let est = exact_shapley(&ctx).unwrap();
        let total: f64 = est.values.values().sum();
        assert!((total - (ctx.utility(&[4, 7, 9]).unwrap() - empty)).abs() < 1e-9);
    }

    #[test]
    fn model_context_rejects_bad_input() {
        let ctx = model_context();
        assert!(
            UtilityContext::new(ctx.base.clone(), BTreeMap::new(), ctx.validation.clone()).is_err()
        );
        let mut bad = BTreeMap::new();
        bad.insert(1, (1.0, init_model(&Arch::logistic(2, 3), 1).unwrap()));
        assert!(UtilityContext::new(ctx.base.clone(), bad, ctx.validation.clone()).is_err());
    }
}
