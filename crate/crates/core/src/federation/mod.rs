//! Clients, server, and the search-then-federate loop.

mod client;
mod config;
mod server;
mod simulation;

pub use client::{
    epoch_order, local_finetune, window_gradient, BudgetLevel, ClientState, LossTrace,
    TrainSettings,
};
pub use config::{AggregationMode, DataSource, OptimizerKind, RunConfig};
pub use server::{
    aggregate, size_weights, Dispatch, MaskRegistry, PairUpload, ServerState, SiteMasks, Upload,
};
pub use simulation::{ClientSearch, RoundReport, RunOutcome, Simulation};

use crate::error::{Error, Result};

/// Budget of one client in a heterogeneous group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupAssignment {
    pub level: BudgetLevel,
    pub rank: usize,
    /// `1 - rank / R_max`
    pub sparsity: f64,
}

/// Level of client `i` is `[Small, Medium, Large][i % 3]`, so level sizes are
/// `⌈m/3⌉` or `⌊m/3⌋`.
pub fn build_heterogeneous_group(
    level_ranks: [usize; 3],
    r_max: usize,
    clients: usize,
) -> Result<Vec<GroupAssignment>> {
    for (level, &r) in BudgetLevel::ALL.iter().zip(&level_ranks) {
        if r == 0 || r > r_max {
            return Err(Error::config(format!(
                "{} level rank {r} outside 1..={r_max}",
                level.as_str()
            )));
        }
    }
    Ok((0..clients)
        .map(|i| {
            let l = i % 3;
            GroupAssignment {
                level: BudgetLevel::ALL[l],
                rank: level_ranks[l],
                sparsity: 1.0 - level_ranks[l] as f64 / r_max as f64,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_sparsities() {
        let g = build_heterogeneous_group([8, 12, 16], 16, 3).unwrap();
        let s: Vec<f64> = g.iter().map(|a| a.sparsity).collect();
        assert_eq!(s, vec![0.5, 0.25, 0.0]);
        let same = build_heterogeneous_group([16, 16, 16], 16, 6).unwrap();
        assert!(same.iter().all(|a| a.sparsity == 0.0));
        assert!(build_heterogeneous_group([8, 12, 20], 16, 3).is_err());
    }

    #[test]
    fn level_sizes() {
        let g = build_heterogeneous_group([8, 12, 16], 16, 100).unwrap();
        let count = |l| g.iter().filter(|a| a.level == l).count();
        assert_eq!(
            [count(BudgetLevel::Small), count(BudgetLevel::Medium), count(BudgetLevel::Large)],
            [34, 33, 33]
        );
    }
}
