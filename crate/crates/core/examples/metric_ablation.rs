//! Same run under each saliency metric.
//!
//!     cargo run --release --example metric_ablation

use fedprune::federation::{RunConfig, Simulation};
use fedprune::saliency::Metric;

fn main() -> fedprune::Result<()> {
    for metric in Metric::ALL {
        let mut config = RunConfig::default();
        config.apply_text(
            "clients = 8\n\
             participation = 0.25\n\
             rounds = 10\n\
             finetune_init = keep\n\
             aggregation = overlap\n",
        )?;
        config.metric = metric;
        let mut sim = Simulation::new(config, 1)?;
        let out = sim.run()?;
        println!(
            "{:<6} final mean perplexity {:.2}",
            metric.as_str(),
            out.final_mean_perplexity().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
