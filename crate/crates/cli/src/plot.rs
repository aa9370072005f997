//! gnuplot data files and scripts for the CSVs written by `simulate`.
//! Nothing is rendered here.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    AccuracyVsRound,
    AccuracyVsPushN,
    TimeToAccuracy,
    MacAnalytics,
}

impl PlotKind {
    pub fn header(self) -> &'static [&'static str] {
        match self {
            PlotKind::AccuracyVsRound => &["policy", "seed", "round", "cum_slots", "accuracy"],
            PlotKind::AccuracyVsPushN => &["policy", "push_n", "mean_accuracy", "stderr"],
            PlotKind::TimeToAccuracy => &["policy", "theta_th", "slots"],
            PlotKind::MacAnalytics => &[
                "M",
                "Q",
                "N",
                "p_s",
                "expected_cost",
                "mc_cost",
                "mc_stderr",
            ],
        }
    }

    const ALL: [PlotKind; 4] = [
        PlotKind::AccuracyVsRound,
        PlotKind::AccuracyVsPushN,
        PlotKind::TimeToAccuracy,
        PlotKind::MacAnalytics,
    ];
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut r = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let input_err = |reason: String| CliError::Input {
        path: path.to_path_buf(),
        reason,
    };
    let header = r
        .headers()
        .map_err(|e| input_err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| input_err(e.to_string()))?;
    Ok(Table { header, rows })
}

/// Groups rows by their first column, keeping first-seen order.
fn blocks(rows: &[Vec<String>]) -> Vec<(String, Vec<&Vec<String>>)> {
    let mut order: Vec<String> = Vec::new();
    let mut map: BTreeMap<String, Vec<&Vec<String>>> = BTreeMap::new();
    for r in rows {
        if !map.contains_key(&r[0]) {
            order.push(r[0].clone());
        }
        map.entry(r[0].clone()).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let v = map.remove(&k).unwrap_or_default();
            (k, v)
        })
        .collect()
}

fn write_blocks(data: &mut String, groups: &[(String, Vec<Vec<String>>)]) {
    for (i, (name, lines)) in groups.iter().enumerate() {
        if i > 0 {
            data.push_str("\n\n");
        }
        let _ = writeln!(data, "# {name}");
        for l in lines {
            let _ = writeln!(data, "{}", l.join(" "));
        }
    }
}

/// Writes `<stem>.dat` and `<stem>.gp` next to `out_dir` (or the CSV) and
/// returns their paths. `kind` is inferred from the header when absent.
pub fn emit_plot_data(
    csv_path: &Path,
    kind: Option<PlotKind>,
    out_dir: Option<&Path>,
) -> Result<(PathBuf, PathBuf)> {
    let table = read_table(csv_path)?;
    let kind = match kind {
        Some(k) => k,
        None => PlotKind::ALL
            .into_iter()
            .find(|k| table.header == k.header())
            .ok_or_else(|| CliError::Input {
                path: csv_path.to_path_buf(),
                reason: format!("unrecognised header `{}`", table.header.join(",")),
            })?,
    };
    if table.header != kind.header() {
        return Err(CliError::Input {
            path: csv_path.to_path_buf(),
            reason: format!(
                "header `{}` does not match `{}`",
                table.header.join(","),
                kind.header().join(",")
            ),
        });
    }
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "plot".into());
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| csv_path.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let dat_path = dir.join(format!("{stem}.dat"));
    let gp_path = dir.join(format!("{stem}.gp"));
    let dat_name = dat_path
        .file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();

    let mut data = String::new();
    let mut script = String::new();
    let _ = writeln!(script, "set datafile commentschars '#'");
    let _ = writeln!(script, "set key outside right");
    match kind {
        PlotKind::AccuracyVsRound => {
            // mean accuracy per (policy, round) over seeds
            let groups: Vec<(String, Vec<Vec<String>>)> = blocks(&table.rows)
                .into_iter()
                .map(|(name, rows)| {
                    let mut per_round: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
                    for r in rows {
                        let round: u64 = r[2].parse().unwrap_or(0);
                        let e = per_round.entry(round).or_insert((0.0, 0.0, 0));
                        e.0 += r[3].parse::<f64>().unwrap_or(f64::NAN);
                        e.1 += r[4].parse::<f64>().unwrap_or(f64::NAN);
                        e.2 += 1;
                    }
                    let lines = per_round
                        .into_iter()
                        .map(|(round, (slots, acc, n))| {
                            vec![
                                round.to_string(),
                                (slots / n as f64).to_string(),
                                (acc / n as f64).to_string(),
                            ]
                        })
                        .collect();
                    (name, lines)
                })
                .collect();
            write_blocks(&mut data, &groups);
            let _ = writeln!(script, "set xlabel 'round'\nset ylabel 'test accuracy'");
            plot_lines(&mut script, &dat_name, &groups, "1:3", "linespoints");
        }
        PlotKind::AccuracyVsPushN => {
            let groups: Vec<(String, Vec<Vec<String>>)> = blocks(&table.rows)
                .into_iter()
                .map(|(name, rows)| (name, rows.into_iter().map(|r| r[1..].to_vec()).collect()))
                .collect();
            write_blocks(&mut data, &groups);
            let _ = writeln!(
                script,
                "set xlabel 'push contenders N'\nset ylabel 'test accuracy'"
            );
            plot_lines(&mut script, &dat_name, &groups, "1:2:3", "yerrorlines");
        }
        PlotKind::TimeToAccuracy => {
            let mut unreached = Vec::new();
            let groups: Vec<(String, Vec<Vec<String>>)> = blocks(&table.rows)
                .into_iter()
                .map(|(name, rows)| {
                    let lines = rows
                        .into_iter()
                        .filter(|r| {
                            let reached = !r[2].is_empty();
                            if !reached {
                                unreached.push(format!("{name} at theta {}", r[1]));
                            }
                            reached
                        })
                        .map(|r| vec![r[1].clone(), r[2].clone()])
                        .collect();
                    (name, lines)
                })
                .collect();
            for u in &unreached {
                let _ = writeln!(script, "# unreached (bar omitted): {u}");
            }
            write_blocks(&mut data, &groups);
            let _ = writeln!(
                script,
                "set style data histogram\nset style fill solid\nset xlabel 'target accuracy'\nset ylabel 'time cost [slots]'"
            );
            plot_lines(&mut script, &dat_name, &groups, "1:2", "boxes");
        }
        PlotKind::MacAnalytics => {
            let mut keyed: Vec<(String, Vec<Vec<String>>)> = Vec::new();
            for r in &table.rows {
                let key = format!("M={} Q={}", r[0], r[1]);
                let line = vec![r[2].clone(), r[4].clone(), r[5].clone(), r[6].clone()];
                match keyed.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, v)) => v.push(line),
                    None => keyed.push((key, vec![line])),
                }
            }
            write_blocks(&mut data, &keyed);
            let _ = writeln!(
                script,
                "set xlabel 'push contenders N'\nset ylabel 'expected time cost [slots]'"
            );
            let mut parts = Vec::new();
            for (i, (name, _)) in keyed.iter().enumerate() {
                parts.push(format!(
                    "'{dat_name}' index {i} using 1:2 with lines title '{name} closed form'"
                ));
                parts.push(format!(
                    "'{dat_name}' index {i} using 1:3:4 with yerrorbars title '{name} Monte Carlo'"
                ));
            }
            let _ = writeln!(script, "plot {}", parts.join(", \\\n     "));
        }
    }
    fs::write(&dat_path, data).map_err(|e| CliError::io(&dat_path, e))?;
    fs::write(&gp_path, script).map_err(|e| CliError::io(&gp_path, e))?;
    Ok((dat_path, gp_path))
}

fn plot_lines(
    script: &mut String,
    dat: &str,
    groups: &[(String, Vec<Vec<String>>)],
    using: &str,
    style: &str,
) {
    let parts: Vec<String> = groups
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            format!("'{dat}' index {i} using {using} with {style} title '{name}'")
        })
        .collect();
    let _ = writeln!(script, "plot {}", parts.join(", \\\n     "));
}
