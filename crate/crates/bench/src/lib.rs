//! Fixtures shared by the criterion benches.

use pushpull_core::data::generate_synthetic;
use pushpull_core::learn::{init_model, Arch};
use pushpull_core::valuation::TabularGame;
use pushpull_core::{LabeledDataset, ModelParams};

/// A client-sized shard of the desk data: 100 samples, 200 features, 4 classes.
pub fn client_shard() -> (ModelParams, LabeledDataset) {
    let data = generate_synthetic(100, 200, 4, 6.0, 1).expect("valid synthetic spec");
    let model = init_model(&Arch::logistic(200, 4), 1).expect("valid arch");
    (model, data)
}

/// Supermodular-ish game on `players` players with a smooth value surface.
pub fn smooth_game(players: usize) -> TabularGame {
    TabularGame::from_fn(players, |m| {
        let size = m.count_ones() as f64;
        let weight: f64 = (0..players)
            .filter(|i| m & (1 << i) != 0)
            .map(|i| 1.0 / (1.0 + i as f64))
            .sum();
        (weight + 0.1 * size * size).sqrt()
    })
    .expect("table fits")
}
