//! Runs an experiment: every (policy, seed) pair, the push-population sweep
//! and the MAC analytics grid. Work is spread over rayon; results are kept
//! in canonical (policy, seed) order.

use pushpull_core::mac;
use pushpull_core::orchestrator::{
    run_training, time_to_accuracy, Environment, PolicyKind, RunTrace,
};
use pushpull_core::rng::derive_seed;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct PushPoint {
    pub policy: PolicyKind,
    /// 0 for policies without a push period.
    pub push_n: usize,
    /// Final accuracy per seed, in config seed order.
    pub finals: Vec<f64>,
}

impl PushPoint {
    pub fn mean(&self) -> f64 {
        mean(&self.finals)
    }

    pub fn stderr(&self) -> f64 {
        stderr(&self.finals)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacRow {
    pub m: usize,
    pub q: usize,
    pub n: usize,
    pub p_s: f64,
    pub expected_cost: f64,
    pub mc_cost: f64,
    pub mc_stderr: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    /// Policy-major, seed-minor, matching the config order.
    pub runs: Vec<RunTrace>,
    pub push_sweep: Vec<PushPoint>,
    pub mac: Vec<MacRow>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean; 0 for a single sample.
pub fn stderr(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

impl ScenarioResult {
    pub fn traces(&self, policy: PolicyKind) -> impl Iterator<Item = &RunTrace> {
        self.runs.iter().filter(move |t| t.policy.kind == policy)
    }

    pub fn mean_final_accuracy(&self, policy: PolicyKind) -> Option<f64> {
        let finals: Vec<f64> = self
            .traces(policy)
            .filter_map(RunTrace::final_accuracy)
            .collect();
        (!finals.is_empty()).then(|| mean(&finals))
    }

    /// Mean slots to reach `theta` over seeds; `None` unless every seed
    /// reaches it.
    pub fn mean_time_to_accuracy(&self, policy: PolicyKind, theta: f64) -> Option<f64> {
        let slots: Option<Vec<f64>> = self
            .traces(policy)
            .map(|t| time_to_accuracy(t, theta).map(|s| s as f64))
            .collect();
        slots.filter(|s| !s.is_empty()).map(|s| mean(&s))
    }
}

fn environments(cfg: &ExperimentConfig) -> Result<Vec<Environment>> {
    Ok(cfg
        .seeds
        .par_iter()
        .map(|&seed| Environment::build(&cfg.env, &cfg.sim.frame, seed))
        .collect::<Result<Vec<_>, _>>()?)
}

/// Runs every configured policy on every seed.
pub fn run_policies(cfg: &ExperimentConfig, capture_snapshots: bool) -> Result<Vec<RunTrace>> {
    let envs = environments(cfg)?;
    let sim = pushpull_core::SimConfig {
        capture_snapshots,
        ..cfg.sim_config()
    };
    let jobs: Vec<(PolicyKind, usize)> = cfg
        .policies
        .iter()
        .flat_map(|&p| (0..cfg.seeds.len()).map(move |i| (p, i)))
        .collect();
    Ok(jobs
        .par_iter()
        .map(|&(kind, i)| {
            log::info!("running {kind} seed {}", cfg.seeds[i]);
            run_training(&envs[i], &sim, &cfg.policy(kind), cfg.seeds[i])
        })
        .collect::<Result<Vec<_>, _>>()?)
}

/// Final accuracy against a fixed push population. Policies without a
/// push period contribute one point at `push_n = 0`, taken from `base`.
pub fn run_push_sweep(cfg: &ExperimentConfig, base: &[RunTrace]) -> Result<Vec<PushPoint>> {
    let envs = environments(cfg)?;
    let mut jobs = Vec::new();
    for &kind in &cfg.policies {
        if cfg.policy(kind).push_enabled {
            for &n in &cfg.sweep.push_n {
                jobs.push((kind, n));
            }
        }
    }
    let swept: Vec<PushPoint> = jobs
        .par_iter()
        .map(|&(kind, n)| {
            let sim = pushpull_core::SimConfig {
                fixed_push_n: Some(n),
                ..cfg.sim_config()
            };
            let finals = cfg
                .seeds
                .par_iter()
                .zip(&envs)
                .map(|(&seed, env)| {
                    log::info!("running {kind} push_n {n} seed {seed}");
                    run_training(env, &sim, &cfg.policy(kind), seed)
                        .map(|t| t.final_accuracy().unwrap_or(f64::NAN))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(PushPoint {
                policy: kind,
                push_n: n,
                finals,
            })
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for &kind in &cfg.policies {
        if cfg.policy(kind).push_enabled {
            out.extend(swept.iter().filter(|p| p.policy == kind).cloned());
        } else {
            let finals = base
                .iter()
                .filter(|t| t.policy.kind == kind)
                .map(|t| t.final_accuracy().unwrap_or(f64::NAN))
                .collect();
            out.push(PushPoint {
                policy: kind,
                push_n: 0,
                finals,
            });
        }
    }
    Ok(out)
}

pub fn run_mac(cfg: &ExperimentConfig) -> Result<Vec<MacRow>> {
    Ok(cfg
        .mac
        .points()
        .par_iter()
        .map(|&(m, q, n)| {
            let seed = derive_seed(cfg.mac.seed, &[m as u64, q as u64, n as u64]);
            let (mc_cost, mc_stderr) = mac::monte_carlo_time_cost(m, q, n, cfg.mac.trials, seed)?;
            Ok(MacRow {
                m,
                q,
                n,
                p_s: mac::success_prob(m, q, n)?,
                expected_cost: mac::expected_time_cost(m, q, n)?,
                mc_cost,
                mc_stderr,
            })
        })
        .collect::<Result<Vec<_>, pushpull_core::Error>>()?)
}

/// Everything `simulate` reports.
pub fn run_scenario(cfg: &ExperimentConfig) -> Result<ScenarioResult> {
    cfg.validate()?;
    let runs = run_policies(cfg, false)?;
    let push_sweep = run_push_sweep(cfg, &runs)?;
    let mac = run_mac(cfg)?;
    Ok(ScenarioResult {
        runs,
        push_sweep,
        mac,
    })
}
