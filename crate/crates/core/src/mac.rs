//! Frame structure, framed-ALOHA push contention and time-cost analytics.
//!
//! A frame is one downlink slot followed by `M` uplink slots. The first `Q`
//! uplink slots are pull slots assigned by the parameter server, the remaining
//! `M - Q` are push slots in which ready UEs pick one slot uniformly at random.
//! A push slot delivers iff exactly one UE picked it. All costs are expressed in
//! uplink slots; slot indices are 1-based within their region.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    /// Uplink slots per frame, `M`.
    pub slots: usize,
    /// Pull slots, `Q`.
    pub pull_slots: usize,
    /// Slot length `tau`, seconds.
    pub slot_len: f64,
    /// Frames dedicated to pull-only warmup, `r_th`.
    pub warmup_frames: usize,
}

impl Default for FrameConfig {
    /// `M = 20`, an even pull/push split, 20 warmup frames.
    fn default() -> Self {
        FrameConfig {
            slots: 20,
            pull_slots: 10,
            slot_len: 1.0,
            warmup_frames: 20,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 {
            return Err(Error::param(
                "slots",
                "a frame needs at least one uplink slot",
            ));
        }
        if self.pull_slots > self.slots {
            return Err(Error::param(
                "pull_slots",
                format!("Q = {} exceeds M = {}", self.pull_slots, self.slots),
            ));
        }
        if !(self.slot_len > 0.0 && self.slot_len.is_finite()) {
            return Err(Error::param("slot_len", "must be positive"));
        }
        Ok(())
    }

    pub fn push_slots(&self) -> usize {
        self.slots - self.pull_slots
    }

    /// `T_Q = Q tau`.
    pub fn pull_time(&self) -> f64 {
        self.pull_slots as f64 * self.slot_len
    }

    /// `T_C = (M - Q) tau`.
    pub fn push_time(&self) -> f64 {
        self.push_slots() as f64 * self.slot_len
    }

    /// Uplink frame time `M tau`. The downlink slot is bookkeeping only.
    pub fn frame_time(&self) -> f64 {
        self.slots as f64 * self.slot_len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushOutcome {
    /// Chosen push slot per contender, 1-based.
    pub choices: Vec<usize>,
    pub success: Vec<bool>,
    /// `N'`.
    pub successes: usize,
    /// Slots picked by more than one contender, ascending.
    pub collided_slots: Vec<usize>,
}

impl PushOutcome {
    /// Largest slot index among successful contenders.
    pub fn max_success_slot(&self) -> Option<usize> {
        self.choices
            .iter()
            .zip(&self.success)
            .filter(|(_, &ok)| ok)
            .map(|(&c, _)| c)
            .max()
    }
}

/// Single-UE success probability `(1 - 1/(M-Q))^(N-1)`.
pub fn success_prob(m: usize, q: usize, n: usize) -> Result<f64> {
    if q >= m {
        return Err(Error::param(
            "pull_slots",
            format!("no push slots: M = {m}, Q = {q}"),
        ));
    }
    if n == 0 {
        return Err(Error::param(
            "contenders",
            "need at least one push contender",
        ));
    }
    let slots = (m - q) as f64;
    Ok((1.0 - 1.0 / slots).powi((n - 1) as i32))
}

/// Resolves one frame from explicit slot choices (1-based).
pub fn resolve_push(choices: Vec<usize>, slots: usize) -> PushOutcome {
    let mut load = vec![0usize; slots + 1];
    for &c in &choices {
        load[c] += 1;
    }
    let success: Vec<bool> = choices.iter().map(|&c| load[c] == 1).collect();
    PushOutcome {
        successes: success.iter().filter(|&&s| s).count(),
        collided_slots: (1..=slots).filter(|&s| load[s] > 1).collect(),
        choices,
        success,
    }
}

pub fn simulate_push_frame_with(n: usize, slots: usize, rng: &mut SimRng) -> Result<PushOutcome> {
    if slots == 0 {
        return Err(Error::param(
            "slots",
            "push contention needs at least one slot",
        ));
    }
    let choices = (0..n).map(|_| rng.random_range(1..=slots)).collect();
    Ok(resolve_push(choices, slots))
}

/// `N` contenders each pick one of `slots` push slots uniformly.
pub fn simulate_push_frame(n: usize, slots: usize, seed: u64) -> Result<PushOutcome> {
    simulate_push_frame_with(n, slots, &mut rng::stream(seed, &[tag::PUSH_SLOTS]))
}

/// Approximate mean index of the `iota`-th highest of `N` uniform slot picks:
/// `(M - Q + 1)(N - iota + 1)/(N + 1)`.
pub fn slot_index_mean(m: usize, q: usize, n: usize, iota: usize) -> Result<f64> {
    if q >= m {
        return Err(Error::param(
            "pull_slots",
            format!("no push slots: M = {m}, Q = {q}"),
        ));
    }
    if iota == 0 || iota > n {
        return Err(Error::param(
            "iota",
            format!("order index must lie in [1, {n}], got {iota}"),
        ));
    }
    Ok((m - q + 1) as f64 * (n - iota + 1) as f64 / (n + 1) as f64)
}

/// Expected frame cost in slots:
/// `Q (1-p_s)^N + sum_{i=1..N} (Q + l_i) p_s (1-p_s)^(i-1)`.
pub fn expected_time_cost(m: usize, q: usize, n: usize) -> Result<f64> {
    let ps = success_prob(m, q, n)?;
    let fail = 1.0 - ps;
    let mut total = q as f64 * fail.powi(n as i32);
    for i in 1..=n {
        total += (q as f64 + slot_index_mean(m, q, n, i)?) * ps * fail.powi((i - 1) as i32);
    }
    Ok(total)
}

/// Monte-Carlo estimate of the frame cost that the closed form approximates:
/// `Q` plus the highest successful push slot, or `Q` when every push fails.
/// Returns `(mean, standard error)`.
pub fn monte_carlo_time_cost(
    m: usize,
    q: usize,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if q >= m {
        return Err(Error::param(
            "pull_slots",
            format!("no push slots: M = {m}, Q = {q}"),
        ));
    }
    if trials < 2 {
        return Err(Error::param("trials", "need at least two trials"));
    }
    let slots = m - q;
    let mut r = rng::stream(seed, &[tag::PUSH_SLOTS, m as u64, q as u64, n as u64]);
    let mut load = vec![0u32; slots + 1];
    let mut choices = vec![0usize; n];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..trials {
        load.iter_mut().for_each(|l| *l = 0);
        for c in choices.iter_mut() {
            *c = r.random_range(1..=slots);
            load[*c] += 1;
        }
        let top = (1..=slots).rev().find(|&s| load[s] == 1).unwrap_or(0);
        let cost = (q + top) as f64;
        sum += cost;
        sum_sq += cost * cost;
    }
    let t = trials as f64;
    let mean = sum / t;
    let var = ((sum_sq - t * mean * mean) / (t - 1.0)).max(0.0);
    Ok((mean, (var / t).sqrt()))
}

/// Monte-Carlo per-UE success frequency and its standard error.
pub fn monte_carlo_success_rate(
    m: usize,
    q: usize,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if q >= m {
        return Err(Error::param(
            "pull_slots",
            format!("no push slots: M = {m}, Q = {q}"),
        ));
    }
    if n == 0 || trials == 0 {
        return Err(Error::param("trials", "need contenders and trials"));
    }
    let mut r = rng::stream(seed, &[tag::PUSH_SLOTS, m as u64, q as u64, n as u64, 1]);
    let mut wins = 0usize;
    for _ in 0..trials {
        wins += simulate_push_frame_with(n, m - q, &mut r)?.successes;
    }
    let draws = (trials * n) as f64;
    let rate = wins as f64 / draws;
    // Successes within a frame are dependent; the frame-level variance of
    // N'/N is the honest basis for the error bar.
    let p = success_prob(m, q, n)?;
    let se = frame_success_std(m - q, n, p) / (trials as f64).sqrt();
    Ok((rate, se))
}

/// Standard deviation of `N'/N` for one frame, from exact pairwise success
/// probabilities.
fn frame_success_std(slots: usize, n: usize, p: f64) -> f64 {
    let nf = n as f64;
    if n == 1 {
        return (p * (1.0 - p)).sqrt();
    }
    let s = slots as f64;
    // P(two given contenders both succeed) = (1 - 1/s)(1 - 2/s)^(n-2)
    let p_both = (1.0 - 1.0 / s) * (1.0 - 2.0 / s).max(0.0).powi((n - 2) as i32);
    let var_count = nf * p * (1.0 - p) + nf * (nf - 1.0) * (p_both - p * p);
    (var_count.max(0.0)).sqrt() / nf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UeKind {
    /// Scheduled in the given 1-based pull slot.
    Pull {
        slot: usize,
    },
    Push,
}

/// Per-UE discrete time cost in slots: `zeta + 1` for the `zeta`-th pull slot;
/// for push, `Q + 1` when the computation finishes within `T_Q`, otherwise
/// `ceil(T_comp / tau) + 1`.
pub fn time_cost_ue(kind: UeKind, comp_time: f64, cfg: &FrameConfig) -> Result<usize> {
    if !(comp_time >= 0.0 && comp_time.is_finite()) {
        return Err(Error::param(
            "comp_time",
            format!("must be nonnegative, got {comp_time}"),
        ));
    }
    match kind {
        UeKind::Pull { slot } => {
            if slot == 0 || slot > cfg.pull_slots {
                return Err(Error::param(
                    "slot",
                    format!("pull slot must lie in [1, {}], got {slot}", cfg.pull_slots),
                ));
            }
            Ok(slot + 1)
        }
        UeKind::Push => {
            if comp_time <= cfg.pull_time() {
                Ok(cfg.pull_slots + 1)
            } else {
                let ratio = comp_time / cfg.slot_len;
                let r = ratio.round();
                let slots = if (ratio - r).abs() < 1e-9 {
                    r
                } else {
                    ratio.ceil()
                };
                Ok(slots as usize + 1)
            }
        }
    }
}

/// `T_cost = max_k T_k`.
pub fn frame_time_cost(costs: &[usize]) -> Result<usize> {
    costs
        .iter()
        .copied()
        .max()
        .ok_or(Error::Empty("per-UE time costs"))
}
