//! Experiment runner for the push-pull simulator: TOML configs, parallel
//! replications and CSV artifacts.

pub mod config;
pub mod error;
pub mod output;
pub mod plot;
pub mod scenario;
pub mod valuate;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pushpull_core::orchestrator::PolicyKind;
use pushpull_core::valuation::{GtgConfig, PermutationOrder};

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use scenario::{run_scenario, ScenarioResult};

#[derive(Debug, Parser)]
#[command(
    name = "pushpull",
    version,
    about = "Push-pull federated learning simulator"
)]
pub struct Cli {
    /// Log progress (repeat for more detail); RUST_LOG also works.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML experiment file; the built-in desk scenario when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated policies, e.g. `proposed,fedavg_random`.
    #[arg(long, value_delimiter = ',')]
    pub policies: Option<Vec<String>>,
    /// Comma-separated seeds; `a-b` denotes an inclusive range.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Dotted-path override, e.g. `sim.frame.pull_slots=5`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write all four CSVs.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also save the last valued frame of the first valuation run as JSON.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Run the scenario at every point of the `sweep.axes` product.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Closed-form versus Monte-Carlo time cost over the `mac` grid.
    MacAnalyze {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Shapley values for a saved frame (`.json`) or a tabular game file.
    Valuate {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        method: valuate::ValuationMethod,
        #[arg(long, default_value_t = 500)]
        permutations: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the values here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// gnuplot data and script for one of the CSVs.
    Plot {
        csv: PathBuf,
        #[arg(long, value_enum)]
        kind: Option<plot::PlotKind>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

pub fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    let bad = |p: &str| CliError::Config(format!("--seeds: cannot parse `{p}`"));
    let mut out = Vec::new();
    for part in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| bad(part))?;
                let b: u64 = b.trim().parse().map_err(|_| bad(part))?;
                if a > b {
                    return Err(bad(part));
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad(part))?),
        }
    }
    Ok(out)
}

/// Loads, overrides and validates the experiment described by `args`.
pub fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let overrides = args
        .overrides
        .iter()
        .map(|o| config::parse_override(o))
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = ExperimentConfig::load(args.config.as_deref(), &overrides)?;
    if let Some(p) = &args.policies {
        cfg.policies = p
            .iter()
            .map(|s| {
                s.parse::<PolicyKind>()
                    .map_err(|e| CliError::Config(format!("--policies: {e}")))
            })
            .collect::<Result<_>>()?;
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

/// `simulate`: runs the scenario and writes the CSVs into `dir`.
pub fn simulate(
    cfg: &ExperimentConfig,
    dir: &Path,
    snapshot: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let res = run_scenario(cfg)?;
    let written = output::scenario_outputs(&res, cfg)?.write(dir)?;
    if let Some(path) = snapshot {
        save_snapshot(cfg, path)?;
    }
    Ok(written)
}

fn save_snapshot(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let Some(&kind) = cfg.policies.iter().find(|k| k.uses_valuation()) else {
        return Err(CliError::Config(
            "--snapshot needs a policy that values clients".into(),
        ));
    };
    let one = ExperimentConfig {
        policies: vec![kind],
        seeds: vec![cfg.seeds[0]],
        ..cfg.clone()
    };
    let traces = scenario::run_policies(&one, true)?;
    let snap = traces
        .iter()
        .flat_map(|t| t.records.iter().rev())
        .find_map(|r| r.snapshot.clone())
        .ok_or_else(|| CliError::Config("no frame was valued; nothing to snapshot".into()))?;
    let json = serde_json::to_string(&snap).expect("snapshot serializes");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, json).map_err(|e| CliError::io(path, e))
}

/// `sweep`: one scenario per point of the axes product, each in its own
/// subdirectory named after the point (`key=value` pairs joined by `+`).
pub fn sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    use rayon::prelude::*;
    let axes: Vec<(&String, &Vec<toml::Value>)> = cfg.sweep.axes.iter().collect();
    if axes.is_empty() || axes.iter().any(|(_, v)| v.is_empty()) {
        return Err(CliError::Config(
            "sweep.axes must name at least one key with values".into(),
        ));
    }
    let mut points: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for (k, vals) in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                vals.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(((*k).clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    let base = toml::Table::try_from(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let point_cfgs: Vec<(String, ExperimentConfig)> = points
        .iter()
        .map(|p| {
            let mut t = base.clone();
            for (k, v) in p {
                config::set_path(&mut t, k, v.clone())?;
            }
            t.remove("sweep").and_then(|s| match s {
                toml::Value::Table(mut s) => {
                    s.remove("axes");
                    t.insert("sweep".into(), toml::Value::Table(s));
                    Some(())
                }
                _ => None,
            });
            let text = toml::to_string(&t).map_err(|e| CliError::Config(e.to_string()))?;
            let c: ExperimentConfig =
                toml::from_str(&text).map_err(|e| CliError::Config(format!("sweep point: {e}")))?;
            c.validate()?;
            let name = p
                .iter()
                .map(|(k, v)| format!("{k}={}", v.to_string().trim_matches('"')))
                .collect::<Vec<_>>()
                .join("+")
                .replace(['/', '\\', ' ', ','], "_");
            Ok((name, c))
        })
        .collect::<Result<_>>()?;
    let results = point_cfgs
        .par_iter()
        .map(|(name, c)| run_scenario(c).map(|r| (name, c, r)))
        .collect::<Result<Vec<_>>>()?;
    let mut outs = output::Outputs::default();
    let fp = cfg.fingerprint();
    let mut index = Vec::new();
    for (name, c, r) in &results {
        for (file, body) in output::scenario_outputs(r, c)?.into_files() {
            outs.add(&format!("{name}/{file}"), body);
        }
        index.push(vec![name.to_string(), c.fingerprint()]);
    }
    outs.add(
        "sweep_points.csv",
        output::render(&fp, &["point", "fingerprint"], &index)?,
    );
    outs.write(dir)
}

pub fn mac_analyze(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = scenario::run_mac(cfg)?;
    let mut outs = output::Outputs::default();
    outs.add(
        output::MAC_ANALYTICS,
        output::mac_csv(&cfg.fingerprint(), &rows)?,
    );
    outs.write(dir)
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { cfg, snapshot } => {
            let c = resolve_config(&cfg)?;
            for p in simulate(&c, &out_dir(&c), snapshot.as_deref())? {
                println!("{}", p.display());
            }
        }
        Command::Sweep { cfg } => {
            let c = resolve_config(&cfg)?;
            for p in sweep(&c, &out_dir(&c))? {
                println!("{}", p.display());
            }
        }
        Command::MacAnalyze { cfg } => {
            let c = resolve_config(&cfg)?;
            for p in mac_analyze(&c, &out_dir(&c))? {
                println!("{}", p.display());
            }
        }
        Command::Valuate {
            input,
            method,
            permutations,
            tolerance,
            seed,
            out,
        } => {
            let game = valuate::load_game(&input)?;
            let gtg = GtgConfig {
                max_permutations: permutations,
                tolerance,
                seed,
                order: PermutationOrder::Guided,
                ..GtgConfig::default()
            };
            let est = valuate::valuate(game.as_ref(), method, &gtg)?;
            let text = valuate::estimate_csv(&est);
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| CliError::io(p, e))?,
                None => print!("{text}"),
            }
        }
        Command::Plot { csv, kind, out_dir } => {
            let (dat, gp) = plot::emit_plot_data(&csv, kind, out_dir.as_deref())?;
            println!("{}\n{}", dat.display(), gp.display());
        }
    }
    Ok(())
}
