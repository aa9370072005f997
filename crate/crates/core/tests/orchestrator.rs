use pushpull_core::learn::{evaluate, fed_average, init_model, local_train};
use pushpull_core::mac::success_prob;
use pushpull_core::orchestrator::{
    client_train_seed, round_robin_block, run_training, time_to_accuracy, DatasetSource, EnvSpec,
    Environment, Policy, PolicyKind, SimConfig,
};
use pushpull_core::rng::{derive_seed, tag};
use pushpull_core::FrameConfig;

fn spec(sigma: f64, stragglers: f64) -> EnvSpec {
    EnvSpec {
        dataset: DatasetSource::Synthetic {
            samples: 1200,
            dim: 10,
            classes: 3,
            separation: 3.0,
        },
        clients: 16,
        sigma,
        straggler_fraction: stragglers,
        ..EnvSpec::default()
    }
}

fn config(rounds: usize) -> SimConfig {
    SimConfig {
        frame: FrameConfig {
            slots: 8,
            pull_slots: 4,
            slot_len: 1.0,
            warmup_frames: 3,
        },
        ..SimConfig::default()
    }
    .with_rounds(rounds)
}

#[test]
fn frame_invariants_hold_for_every_policy() {
    let cfg = config(10);
    let env = Environment::build(&spec(0.2, 0.5), &cfg.frame, 3).unwrap();
    let m = cfg.frame.slots;
    for kind in PolicyKind::ALL {
        let policy = Policy::standard(kind, &cfg.frame, env.num_clients());
        let trace = run_training(&env, &cfg, &policy, 3).unwrap();
        assert_eq!(trace.records.len(), 10);
        let mut total = 0;
        for r in &trace.records {
            assert!(
                r.received.len() <= m,
                "{kind} round {}: |Y| = {}",
                r.round,
                r.received.len()
            );
            assert!(
                (1..=m + 1).contains(&r.time_cost),
                "{kind} T_cost {}",
                r.time_cost
            );
            assert!(r.received.windows(2).all(|w| w[0] < w[1]));
            assert!(r.pull_set.len() <= policy.pull_slots_at(r.round, &cfg.frame));
            if policy.in_warmup(r.round) {
                assert!(r.push_outcome.is_none());
            }
            if let Some(v) = &r.valuation {
                assert!(v.valued.iter().all(|k| r.received.contains(k)));
            }
            total += r.time_cost;
        }
        assert_eq!(total, trace.cumulative_slots);
    }
}

#[test]
fn runs_are_reproducible_from_config_and_seed() {
    let cfg = config(8);
    let env = Environment::build(&spec(0.2, 0.5), &cfg.frame, 11).unwrap();
    let policy = Policy::standard(PolicyKind::Proposed, &cfg.frame, env.num_clients());
    let a = run_training(&env, &cfg, &policy, 11).unwrap();
    let env_again = Environment::build(&spec(0.2, 0.5), &cfg.frame, 11).unwrap();
    let b = run_training(&env_again, &cfg, &policy, 11).unwrap();
    assert_eq!(a, b);
    let c = run_training(&env, &cfg, &policy, 12).unwrap();
    assert_ne!(a.fingerprint, c.fingerprint);
    assert_ne!(a.final_model, c.final_model);
}

#[test]
fn warmup_matches_reference_fedavg() {
    let cfg = config(3);
    let env = Environment::build(&spec(0.0, 0.0), &cfg.frame, 5).unwrap();
    let policy = Policy {
        push_enabled: false,
        ..Policy::standard(PolicyKind::Proposed, &cfg.frame, env.num_clients())
    };
    let trace = run_training(&env, &cfg, &policy, 5).unwrap();

    // independent FedAvg over the same round-robin cohorts
    let mut global = init_model(&env.arch, derive_seed(5, &[tag::INIT])).unwrap();
    for t in 0..3 {
        let cohort = round_robin_block(t, cfg.frame.slots, env.num_clients());
        let mut ids = cohort.clone();
        ids.sort_unstable();
        let locals: Vec<_> = ids
            .iter()
            .map(|&k| {
                let c = env.client(k).unwrap();
                let m = local_train(
                    &global,
                    &c.dataset,
                    &cfg.train,
                    cfg.train.epochs,
                    client_train_seed(5, t, k),
                )
                .unwrap();
                (c.num_samples as f64, m)
            })
            .collect();
        let entries: Vec<_> = locals.iter().map(|(w, m)| (*w, m)).collect();
        global = fed_average(&entries).unwrap();
        let r = &trace.records[t];
        assert_eq!(r.received, ids);
        assert_eq!(r.pull_set, cohort);
        assert_eq!(r.eval, evaluate(&global, &env.test).unwrap());
    }
    assert_eq!(trace.final_model, global);
}

#[test]
fn push_successes_follow_success_probability() {
    let n = 6;
    let mut cfg = config(200);
    cfg.fixed_push_n = Some(n);
    cfg.gtg.max_permutations = 3;
    let env = Environment::build(&spec(0.1, 0.5), &cfg.frame, 2).unwrap();
    let policy = Policy::standard(PolicyKind::Proposed, &cfg.frame, env.num_clients());
    let trace = run_training(&env, &cfg, &policy, 2).unwrap();
    let counts: Vec<f64> = trace
        .records
        .iter()
        .filter(|r| r.push_outcome.is_some())
        .map(|r| {
            assert_eq!(r.push_contenders.len(), n);
            r.push_successes() as f64
        })
        .collect();
    assert_eq!(counts.len(), 200 - cfg.frame.warmup_frames);
    let len = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / len;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (len - 1.0);
    let expected = n as f64 * success_prob(cfg.frame.slots, cfg.frame.pull_slots, n).unwrap();
    let se = (var / len).sqrt();
    assert!(
        (mean - expected).abs() <= 3.0 * se,
        "mean {mean}, expected {expected}, se {se}"
    );
}

#[test]
fn time_to_accuracy_is_monotone_in_threshold() {
    let cfg = config(12);
    let env = Environment::build(&spec(0.1, 0.5), &cfg.frame, 8).unwrap();
    let policy = Policy::standard(PolicyKind::FedAvgRandom, &cfg.frame, env.num_clients());
    let trace = run_training(&env, &cfg, &policy, 8).unwrap();
    let mut prev = 0;
    for th in [0.0, 0.3, 0.5, 0.7, 0.8, 0.9, 1.0] {
        match time_to_accuracy(&trace, th) {
            Some(s) => {
                assert!(s >= prev);
                prev = s;
            }
            None => prev = usize::MAX,
        }
    }
    assert_eq!(
        time_to_accuracy(&trace, 0.0),
        Some(trace.records[0].time_cost)
    );
    assert_eq!(time_to_accuracy(&trace, 1.01), None);
}

#[test]
fn target_accuracy_stops_early() {
    let mut cfg = config(30);
    cfg.target_accuracy = Some(0.5);
    let env = Environment::build(&spec(0.0, 0.0), &cfg.frame, 4).unwrap();
    let policy = Policy::standard(PolicyKind::OnlyPull, &cfg.frame, env.num_clients());
    let trace = run_training(&env, &cfg, &policy, 4).unwrap();
    assert!(trace.records.len() < 30);
    assert!(trace.final_accuracy().unwrap() >= 0.5);
    assert!(trace.records[..trace.records.len() - 1]
        .iter()
        .all(|r| r.eval.accuracy < 0.5));
}
