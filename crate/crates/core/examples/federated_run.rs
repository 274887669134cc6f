//! A short homogeneous run: search, a few rounds, per-round loss and perplexity.
//!
//!     cargo run --release --example federated_run

use fedprune::federation::{RunConfig, Simulation};

fn main() -> fedprune::Result<()> {
    env_logger::init();
    let mut config = RunConfig::default();
    config.apply_text(
        "clients = 8\n\
         participation = 0.5\n\
         rounds = 6\n\
         finetune_init = keep\n\
         aggregation = overlap\n",
    )?;
    let mut sim = Simulation::new(config, 1)?;
    let out = sim.run()?;
    for r in &out.rounds {
        println!(
            "round {:>2} participants {:?} train loss {:.4} eval ppl {:.2}",
            r.round,
            r.participants,
            r.summary.mean_train_loss.unwrap_or(f64::NAN),
            r.summary.mean_eval_ppl.unwrap_or(f64::NAN),
        );
    }
    println!("final mean perplexity {:.2}", out.final_mean_perplexity().unwrap_or(f64::NAN));
    Ok(())
}
