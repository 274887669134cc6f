//! Adapter gradients against central finite differences.

use fedprune::adapters::AdapterSet;
use fedprune::backbone::{Backbone, BackboneConfig};
use fedprune::numerics::RngStream;

const STEP: f64 = 1e-5;

fn setup(seed: u64) -> (Backbone, AdapterSet, Vec<u32>) {
    let bb = Backbone::random(BackboneConfig {
        vocab_size: 40,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 48,
        max_seq: 24,
        init_seed: seed,
    })
    .unwrap();
    let mut adapters = bb.empty_adapters(4, 0.5, 8);
    let mut rng = RngStream::new(seed, 77);
    for pair in adapters.values_mut() {
        pair.init_symmetric(&mut rng);
    }
    let tokens: Vec<u32> = (0..12).map(|_| rng.below(40) as u32).collect();
    (bb, adapters, tokens)
}

fn central_difference(
    bb: &Backbone,
    adapters: &AdapterSet,
    tokens: &[u32],
    site_idx: usize,
    in_a: bool,
    flat: usize,
) -> f64 {
    let eval = |delta: f64| {
        let mut ad = adapters.clone();
        let pair = ad.values_mut().nth(site_idx).unwrap();
        let m = if in_a { &mut pair.a } else { &mut pair.b };
        m.data_mut()[flat] += delta;
        bb.loss(&ad, tokens).unwrap()
    };
    (eval(STEP) - eval(-STEP)) / (2.0 * STEP)
}

#[test]
fn hundred_random_coordinates_match_finite_differences() {
    let (bb, adapters, tokens) = setup(5);
    let (_, tape) = bb.forward(&adapters, &tokens).unwrap();
    let grads = bb.backward_adapters(tape, &adapters).unwrap();
    let grads: Vec<_> = grads.values().cloned().collect();
    let mut rng = RngStream::new(123, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let site = rng.below(grads.len());
        let in_a = rng.below(2) == 0;
        let g = if in_a { &grads[site].a } else { &grads[site].b };
        let flat = rng.below(g.len());
        let analytic = g.data()[flat];
        let fd = central_difference(&bb, &adapters, &tokens, site, in_a, flat);
        let rel = (analytic - fd).abs() / fd.abs().max(1e-12);
        worst = worst.max(rel);
        assert!(rel < 1e-5, "site {site} a={in_a} idx {flat}: analytic {analytic} fd {fd} rel {rel}");
    }
    eprintln!("worst relative error {worst:e}");
}
