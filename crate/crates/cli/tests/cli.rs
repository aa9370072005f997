use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_pushpull");

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Data rows of a written CSV: comment line and header stripped.
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config-fingerprint: "));
    lines.next().unwrap();
    lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn simulate(dir: &Path, extra: &[&str]) -> Output {
    let cfg = tiny();
    let mut args = vec![
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn simulate_writes_four_csvs_with_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let round = rows(&dir.path().join("accuracy_vs_round.csv"));
    // 2 seeds x 6 rounds x 5 policies
    assert_eq!(round.len(), 60);
    for r in &round {
        let acc: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    let tta = rows(&dir.path().join("time_to_accuracy.csv"));
    assert_eq!(tta.len(), 10);
    let push = rows(&dir.path().join("accuracy_vs_push_n.csv"));
    // proposed sweeps two populations, the other four report push_n = 0
    assert_eq!(push.len(), 6);
    let mac = rows(&dir.path().join("mac_analytics.csv"));
    assert_eq!(mac.len(), 2);
    assert_eq!(mac[0][4], "6.5");
}

#[test]
fn only_pull_has_no_push_population() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(dir.path(), &["--policies", "only_pull", "--seeds", "3-4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let push = rows(&dir.path().join("accuracy_vs_push_n.csv"));
    assert!(!push.is_empty());
    assert!(push.iter().all(|r| r[0] == "only_pull" && r[1] == "0"));
    let round = rows(&dir.path().join("accuracy_vs_round.csv"));
    assert_eq!(round.len(), 2 * 6);
    let seeds: std::collections::BTreeSet<_> = round.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(seeds.into_iter().collect::<Vec<_>>(), vec!["3", "4"]);
}

#[test]
fn overrides_change_rows_and_fingerprint() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(simulate(a.path(), &["--policies", "fedavg_random"])
        .status
        .success());
    let o = simulate(
        b.path(),
        &["--policies", "fedavg_random", "--override", "rounds=3"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(rows(&b.path().join("accuracy_vs_round.csv")).len(), 2 * 3);
    let head = |d: &Path| {
        std::fs::read_to_string(d.join("accuracy_vs_round.csv"))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_ne!(head(a.path()), head(b.path()));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(dir.path(), &["--override", "sim.frame.pull_slots=99"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("pull_slots"), "{}", stderr(&o));

    let o = simulate(dir.path(), &["--override", "env.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));

    let o = simulate(dir.path(), &["--policies", "bogus"]);
    assert_eq!(o.status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seeds = [1]\n[sim]\nzeta = \"x\"\n").unwrap();
    let o = run(&["simulate", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    assert!(!dir.path().join("accuracy_vs_round.csv").exists());
}

#[test]
fn missing_inputs_exit_two_and_name_the_path() {
    let o = run(&["plot", "/nonexistent/accuracy_vs_round.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("/nonexistent/accuracy_vs_round.csv"),
        "{}",
        stderr(&o)
    );

    let o = run(&["valuate", "/nonexistent/game.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/game.txt"));

    let o = run(&["simulate", "--config", "/nonexistent/c.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/c.toml"));
}

#[test]
fn plot_marks_unreached_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    assert!(
        simulate(dir.path(), &["--policies", "proposed,fedavg_random"])
            .status
            .success()
    );
    let csv = dir.path().join("time_to_accuracy.csv");
    let o = run(&["plot", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let gp = std::fs::read_to_string(dir.path().join("time_to_accuracy.gp")).unwrap();
    assert!(
        gp.contains("# unreached (bar omitted): proposed at theta 0.999"),
        "{gp}"
    );
    assert!(gp.contains("# unreached (bar omitted): fedavg_random at theta 0.999"));
    let dat = std::fs::read_to_string(dir.path().join("time_to_accuracy.dat")).unwrap();
    assert!(!dat.contains("0.999"));

    let round = dir.path().join("accuracy_vs_round.csv");
    let o = run(&["plot", round.to_str().unwrap(), "--kind", "mac-analytics"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does not match"));

    let out = dir.path().join("plots");
    let o = run(&[
        "plot",
        round.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let dat = std::fs::read_to_string(out.join("accuracy_vs_round.dat")).unwrap();
    // one block per policy, six rounds each
    assert_eq!(dat.matches("# ").count(), 2);
    assert_eq!(
        dat.lines()
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .count(),
        12
    );
}

#[test]
fn valuate_tabular_game_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let game = dir.path().join("game.txt");
    std::fs::write(&game, "0b00,0\n0b01,0.5\n0b10,0.3\n0b11,1.0\n").unwrap();
    let o = run(&["valuate", game.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let vals: Vec<f64> = out
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("client"))
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(
        (vals[0] - 0.6).abs() < 1e-12 && (vals[1] - 0.4).abs() < 1e-12,
        "{out}"
    );

    let est = dir.path().join("est.csv");
    let o = run(&[
        "valuate",
        game.to_str().unwrap(),
        "--method",
        "gtg",
        "--permutations",
        "200",
        "--out",
        est.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(std::fs::read_to_string(est)
        .unwrap()
        .contains("TruncatedMc"));

    std::fs::write(&game, "0b00,0\n0b11,1\n").unwrap();
    let o = run(&["valuate", game.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing"));
}

#[test]
fn valuate_saved_snapshot_is_efficient() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("snap/frame.json");
    let o = simulate(
        dir.path(),
        &[
            "--policies",
            "proposed",
            "--snapshot",
            snap.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&snap).unwrap()).unwrap();
    assert!(json["updates"].as_array().is_some_and(|u| !u.is_empty()));
    let o = run(&["valuate", snap.to_str().unwrap(), "--method", "exact"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("Exact"));
    let n = out
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("client"))
        .count();
    assert_eq!(n, json["updates"].as_array().unwrap().len());

    let o = simulate(
        dir.path(),
        &[
            "--policies",
            "fedavg_random",
            "--snapshot",
            snap.to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn mac_analyze_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let o = run(&[
        "mac-analyze",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "mac.slots=[20]",
        "--override",
        "mac.pull_slots=[10]",
        "--override",
        "mac.contenders=[1,2,5]",
        "--override",
        "mac.trials=20000",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mac = rows(&dir.path().join("mac_analytics.csv"));
    assert_eq!(mac.len(), 3);
    assert_eq!(mac[0][..5], ["20", "10", "1", "1", "15.5"]);
    assert_eq!(mac[1][3], "0.9");
    for r in &mac {
        let (e, m, se): (f64, f64, f64) = (
            r[4].parse().unwrap(),
            r[5].parse().unwrap(),
            r[6].parse().unwrap(),
        );
        assert!(se > 0.0);
        assert!((e - m).abs() / m < 0.1, "{r:?}");
    }
    assert!(!dir.path().join("accuracy_vs_round.csv").exists());
}

#[test]
fn sweep_writes_one_directory_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let o = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--policies",
        "fedavg_random",
        "--seeds",
        "1",
        "--override",
        "sweep.axes={\"sim.zeta\" = [0.2, 0.8], \"rounds\" = [2]}",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let index = rows(&dir.path().join("sweep_points.csv"));
    assert_eq!(index.len(), 2);
    for r in &index {
        let sub = dir.path().join(&r[0]);
        assert_eq!(
            rows(&sub.join("accuracy_vs_round.csv")).len(),
            2,
            "{}",
            r[0]
        );
    }
    assert_ne!(index[0][1], index[1][1]);

    let o = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
