//! Experiment configuration: a TOML file, dotted-path overrides and
//! validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pushpull_core::data::PartitionSpec;
use pushpull_core::orchestrator::{DatasetSource, EnvSpec, Policy, PolicyKind, SimConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// The desk-scale scenario shipped with the tool.
pub const DESK_TOML: &str = include_str!("../configs/desk.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// Fixed push-contender counts for `accuracy_vs_push_n.csv`.
    pub push_n: Vec<usize>,
    /// Target accuracies for `time_to_accuracy.csv`.
    pub theta: Vec<f64>,
    /// Dotted config keys and their values, crossed by the `sweep` command.
    pub axes: BTreeMap<String, Vec<toml::Value>>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            push_n: vec![5, 10, 20, 40],
            theta: vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.91, 0.92, 0.93],
            axes: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacSpec {
    pub slots: Vec<usize>,
    pub pull_slots: Vec<usize>,
    pub contenders: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for MacSpec {
    fn default() -> Self {
        MacSpec {
            slots: vec![20],
            pull_slots: vec![10],
            contenders: vec![1, 2, 5, 10, 40],
            trials: 100_000,
            seed: 0,
        }
    }
}

impl MacSpec {
    /// Valid `(M, Q, N)` points in grid order.
    pub fn points(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for &m in &self.slots {
            for &q in &self.pull_slots {
                if q >= m {
                    continue;
                }
                for &n in &self.contenders {
                    out.push((m, q, n));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub policies: Vec<PolicyKind>,
    /// Frames to run; overrides `sim.time_budget` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    /// Output directory; excluded from the fingerprint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub env: EnvSpec,
    pub sim: SimConfig,
    pub sweep: SweepSpec,
    pub mac: MacSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: "default".into(),
            seeds: vec![1],
            policies: PolicyKind::ALL.to_vec(),
            rounds: None,
            out: None,
            env: EnvSpec::default(),
            sim: SimConfig::default(),
            sweep: SweepSpec::default(),
            mac: MacSpec::default(),
        }
    }
}

fn parse_text(text: &str, origin: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_literal(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Sets `key` (dotted path) in `table`, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!(
            "override key `{key}` has an empty segment"
        )));
    }
    let (last, prefix) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for (i, p) in prefix.iter().enumerate() {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(CliError::Config(format!(
                    "override `{key}`: `{}` is not a table",
                    parts[..=i].join(".")
                )))
            }
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (k, v) = raw.split_once('=').ok_or_else(|| {
        CliError::Config(format!("override `{raw}` is not of the form key=value"))
    })?;
    Ok((k.trim().to_string(), parse_literal(v.trim())))
}

impl ExperimentConfig {
    /// The shipped desk-scale scenario.
    pub fn desk() -> ExperimentConfig {
        parse_text(DESK_TOML, "desk.toml").expect("shipped desk config parses")
    }

    /// Reads `path` (or the desk scenario when `None`) and applies overrides
    /// in order. Does not validate.
    pub fn load(
        path: Option<&Path>,
        overrides: &[(String, toml::Value)],
    ) -> Result<ExperimentConfig> {
        let (text, origin) = match path {
            Some(p) => (
                std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
                p.display().to_string(),
            ),
            None => (DESK_TOML.to_string(), "desk.toml".to_string()),
        };
        if overrides.is_empty() {
            return parse_text(&text, &origin);
        }
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        for (k, v) in overrides {
            set_path(&mut table, k, v.clone())?;
        }
        let merged = toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?;
        parse_text(&merged, &format!("{origin} with overrides"))
    }

    /// Simulation settings with `rounds` folded into the time budget.
    pub fn sim_config(&self) -> SimConfig {
        match self.rounds {
            Some(r) => self.sim.clone().with_rounds(r),
            None => self.sim.clone(),
        }
    }

    pub fn policy(&self, kind: PolicyKind) -> Policy {
        Policy::standard(kind, &self.sim.frame, self.env.clients)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.seeds.is_empty() {
            return bad("seeds: at least one seed is required".into());
        }
        if self.policies.is_empty() {
            return bad("policies: at least one policy is required".into());
        }
        let mut seen = self.policies.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.policies.len() {
            return bad("policies: duplicate entries".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds: duplicate entries".into());
        }
        let sim = self.sim_config();
        sim.validate()
            .map_err(|e| CliError::Config(format!("sim: {e}")))?;
        for &k in &self.policies {
            self.policy(k)
                .validate(&sim.frame)
                .map_err(|e| CliError::Config(format!("policies: {e}")))?;
        }
        let env = &self.env;
        PartitionSpec {
            clients: env.clients,
            alpha: env.alpha,
            straggler_fraction: env.straggler_fraction,
            sigma: env.sigma,
            seed: 0,
        }
        .validate()
        .map_err(|e| CliError::Config(format!("env: {e}")))?;
        for (name, f) in [
            ("env.test_fraction", env.test_fraction),
            ("env.val_fraction", env.val_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {f}"));
            }
        }
        if env.test_fraction + env.val_fraction >= 1.0 {
            return bad("env: test and validation fractions leave no training data".into());
        }
        let c = env.compute;
        for (name, v) in [
            ("env.compute.shape", c.shape),
            ("env.compute.scale", c.scale),
            ("env.compute.p_scale", c.p_scale),
            ("env.compute.bits_per_sample", c.bits_per_sample),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(c.eps > 0.0 && c.eps < 1.0) {
            return bad(format!("env.compute.eps must lie in (0, 1), got {}", c.eps));
        }
        if let DatasetSource::Synthetic {
            samples,
            dim,
            classes,
            separation,
        } = env.dataset
        {
            if samples == 0 || dim == 0 || classes < 2 || separation.is_nan() || separation < 0.0 {
                return bad(
                    "env.dataset: synthetic data needs samples > 0, dim > 0, classes >= 2".into(),
                );
            }
        }
        if let Some(r) = self.rounds {
            if r == 0 {
                return bad("rounds must be positive".into());
            }
        }
        if self.sweep.push_n.contains(&0) {
            return bad("sweep.push_n entries must be positive".into());
        }
        if let Some(t) = self.sweep.theta.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return bad(format!("sweep.theta entries must lie in (0, 1), got {t}"));
        }
        if self.mac.trials == 0 {
            return bad("mac.trials must be positive".into());
        }
        if self.mac.contenders.contains(&0) {
            return bad("mac.contenders entries must be positive".into());
        }
        Ok(())
    }

    /// Canonical TOML rendering without the output directory.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        toml::to_string(&c).expect("config serializes")
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}
