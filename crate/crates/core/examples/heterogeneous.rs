//! Clients with different parameter budgets sharing one dense rank.
//!
//!     cargo run --release --example heterogeneous

use fedprune::federation::{build_heterogeneous_group, RunConfig, Simulation};

fn main() -> fedprune::Result<()> {
    for g in build_heterogeneous_group([8, 12, 16], 16, 6)? {
        println!("{:?}: rank {} sparsity {:.2}", g.level, g.rank, g.sparsity);
    }

    let mut config = RunConfig::default();
    config.apply_text(
        "clients = 6\n\
         participation = 0.5\n\
         rounds = 4\n\
         hetero_ranks = 8,12,16\n\
         finetune_init = keep\n\
         aggregation = overlap\n",
    )?;
    let mut sim = Simulation::new(config, 1)?;
    sim.search()?;
    for c in sim.clients() {
        let trainable: usize = c.adapters.values().map(|p| p.trainable()).sum();
        println!("client {} {:?}: {trainable} trainable entries", c.id, c.level);
    }
    for t in 0..4 {
        let r = sim.run_round(t)?;
        println!("round {t}: train loss {:.4}", r.summary.mean_train_loss.unwrap_or(f64::NAN));
    }
    Ok(())
}
