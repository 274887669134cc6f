//! Saliency-driven mask search on one adapter set, epoch by epoch.
//!
//!     cargo run --release --example mask_search -- [first|second|mixed]

use fedprune::backbone::{Backbone, BackboneConfig};
use fedprune::data::{synth_corpus, tokenize, LossScope, TokenSeq};
use fedprune::numerics::RngStream;
use fedprune::saliency::{search_architecture, Metric, PruneSchedule, SearchSettings};

fn main() -> fedprune::Result<()> {
    let metric = Metric::parse(&std::env::args().nth(1).unwrap_or_else(|| "first".into()))?;
    let cfg = BackboneConfig::default();
    let backbone = Backbone::random(cfg.clone())?;
    let train: Vec<TokenSeq> = synth_corpus(8, 1)
        .iter()
        .map(|ex| tokenize(ex, cfg.max_seq))
        .collect();

    // r = 8 at 50% sparsity searches over a dense rank of 16
    let mut adapters = backbone.empty_adapters(8, 0.5, 16);
    let mut rng = RngStream::new(0, 1);
    for pair in adapters.values_mut() {
        pair.init_symmetric(&mut rng);
    }
    let schedule = PruneSchedule::new(10, 0.5)?;
    let out = search_architecture(
        &backbone,
        &mut adapters,
        &train,
        schedule,
        metric,
        SearchSettings::default(),
        LossScope::Full,
        &mut rng,
    )?;

    let first = *adapters.keys().next().unwrap();
    println!("metric {}, site {first}, {} entries per matrix", metric.as_str(), cfg.d_model * 16);
    for (t, (counts, loss)) in out.kept.iter().zip(&out.losses).enumerate() {
        let (a, b) = counts[&first];
        println!("epoch {:>2}: kept A {a:>4} B {b:>4}  batch loss {loss:.4}", t + 1);
    }
    let total: usize = adapters.values().map(|p| p.trainable()).sum();
    println!("trainable after search: {total}");
    Ok(())
}
