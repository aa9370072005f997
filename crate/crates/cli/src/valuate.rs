//! Offline valuation of a saved frame or a tabular game.

use std::path::Path;

use pushpull_core::orchestrator::UtilitySnapshot;
use pushpull_core::valuation::{
    exact_shapley, gtg_shapley, CoalitionGame, GtgConfig, ShapleyEstimate, TabularGame,
    EXACT_PLAYER_LIMIT,
};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ValuationMethod {
    /// Exact up to the player limit, truncated Monte Carlo beyond.
    Auto,
    Exact,
    Gtg,
}

/// Reads a JSON snapshot (`.json`) or a tabular game file (anything else).
pub fn load_game(path: &Path) -> Result<Box<dyn CoalitionGame>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let snap: UtilitySnapshot = serde_json::from_str(&text).map_err(|e| CliError::Input {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Box::new(snap.context()?))
    } else {
        Ok(Box::new(TabularGame::parse(&text)?))
    }
}

pub fn valuate(
    game: &dyn CoalitionGame,
    method: ValuationMethod,
    gtg: &GtgConfig,
) -> Result<ShapleyEstimate> {
    let exact = match method {
        ValuationMethod::Exact => true,
        ValuationMethod::Gtg => false,
        ValuationMethod::Auto => game.players().len() <= EXACT_PLAYER_LIMIT,
    };
    Ok(if exact {
        exact_shapley(game)?
    } else {
        gtg_shapley(game, gtg)?
    })
}

pub fn estimate_csv(est: &ShapleyEstimate) -> String {
    let mut s = format!(
        "# method: {:?}, permutations: {}, truncations: {}, utility calls: {}\nclient,value\n",
        est.method, est.permutations_used, est.truncation_events, est.utility_calls
    );
    for (k, v) in &est.values {
        s.push_str(&format!("{k},{v}\n"));
    }
    s
}
