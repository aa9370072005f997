//! CSV emission. Every file starts with a fingerprint comment line and a
//! header; records are comma separated with LF line endings.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};
use crate::scenario::{MacRow, ScenarioResult};

pub const ACCURACY_VS_ROUND: &str = "accuracy_vs_round.csv";
pub const ACCURACY_VS_PUSH_N: &str = "accuracy_vs_push_n.csv";
pub const TIME_TO_ACCURACY: &str = "time_to_accuracy.csv";
pub const MAC_ANALYTICS: &str = "mac_analytics.csv";

pub const FINGERPRINT_PREFIX: &str = "# config-fingerprint: ";

/// Renders one CSV document.
pub fn render(fingerprint: &str, header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields");
    Ok(format!("{FINGERPRINT_PREFIX}{fingerprint}\n{body}"))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn accuracy_vs_round(res: &ScenarioResult) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for t in &res.runs {
        let mut cum = 0;
        for r in &t.records {
            cum += r.time_cost;
            rows.push(vec![
                t.policy.kind.to_string(),
                t.seed.to_string(),
                r.round.to_string(),
                cum.to_string(),
                r.eval.accuracy.to_string(),
            ]);
        }
    }
    rows
}

pub fn accuracy_vs_push_n(res: &ScenarioResult) -> Vec<Vec<String>> {
    res.push_sweep
        .iter()
        .map(|p| {
            vec![
                p.policy.to_string(),
                p.push_n.to_string(),
                p.mean().to_string(),
                p.stderr().to_string(),
            ]
        })
        .collect()
}

pub fn time_to_accuracy_rows(
    res: &ScenarioResult,
    policies: &[pushpull_core::PolicyKind],
    theta: &[f64],
) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for &p in policies {
        for &th in theta {
            rows.push(vec![
                p.to_string(),
                th.to_string(),
                opt(res.mean_time_to_accuracy(p, th)),
            ]);
        }
    }
    rows
}

pub fn mac_rows(rows: &[MacRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.m.to_string(),
                r.q.to_string(),
                r.n.to_string(),
                r.p_s.to_string(),
                r.expected_cost.to_string(),
                r.mc_cost.to_string(),
                r.mc_stderr.to_string(),
            ]
        })
        .collect()
}

/// Files rendered in memory, written together; a failed write removes the
/// ones already written.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, String)>,
}

impl Outputs {
    pub fn add(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    pub fn into_files(self) -> Vec<(String, String)> {
        self.files
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut written = Vec::new();
        for (name, contents) in &self.files {
            let path = dir.join(name);
            let res = match path.parent() {
                Some(parent) if parent != dir => {
                    fs::create_dir_all(parent).and_then(|_| fs::write(&path, contents))
                }
                _ => fs::write(&path, contents),
            };
            if let Err(e) = res {
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                let _ = fs::remove_file(&path);
                if created_dir {
                    let _ = fs::remove_dir(dir);
                }
                return Err(CliError::io(path, e));
            }
            written.push(path);
        }
        Ok(written)
    }
}

pub fn scenario_outputs(
    res: &ScenarioResult,
    cfg: &crate::config::ExperimentConfig,
) -> Result<Outputs> {
    let fp = cfg.fingerprint();
    let mut out = Outputs::default();
    out.add(
        ACCURACY_VS_ROUND,
        render(
            &fp,
            &["policy", "seed", "round", "cum_slots", "accuracy"],
            &accuracy_vs_round(res),
        )?,
    );
    out.add(
        ACCURACY_VS_PUSH_N,
        render(
            &fp,
            &["policy", "push_n", "mean_accuracy", "stderr"],
            &accuracy_vs_push_n(res),
        )?,
    );
    out.add(
        TIME_TO_ACCURACY,
        render(
            &fp,
            &["policy", "theta_th", "slots"],
            &time_to_accuracy_rows(res, &cfg.policies, &cfg.sweep.theta),
        )?,
    );
    out.add(MAC_ANALYTICS, mac_csv(&fp, &res.mac)?);
    Ok(out)
}

pub fn mac_csv(fingerprint: &str, rows: &[MacRow]) -> Result<String> {
    render(
        fingerprint,
        &[
            "M",
            "Q",
            "N",
            "p_s",
            "expected_cost",
            "mc_cost",
            "mc_stderr",
        ],
        &mac_rows(rows),
    )
}
