//! Masked personalized aggregation on a hand-sized example.
//!
//!     cargo run --example aggregation

use std::collections::BTreeMap;

use fedprune::backbone::{Projection, Site};
use fedprune::federation::{aggregate, size_weights, AggregationMode, MaskRegistry, PairUpload, Upload};
use fedprune::numerics::{BitMask, Mat};

fn mask(rows: &[&[bool]]) -> BitMask {
    let flat: Vec<bool> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    BitMask::from_bools(rows.len(), rows[0].len(), &flat).unwrap()
}

fn main() -> fedprune::Result<()> {
    let site = Site {
        layer: 0,
        proj: Projection::Query,
    };
    // client 0 keeps the diagonal, client 1 keeps the top row
    let masks = [
        mask(&[&[true, false], &[false, true]]),
        mask(&[&[true, true], &[false, false]]),
    ];
    let values = [
        Mat::from_rows(&[&[2.0, 0.0], &[0.0, 4.0]]),
        Mat::from_rows(&[&[4.0, 6.0], &[0.0, 0.0]]),
    ];
    let full = mask(&[&[true, true], &[true, true]]);
    let mut registry = MaskRegistry::new();
    let mut uploads = Vec::new();
    for c in 0..2 {
        let mut m = BTreeMap::new();
        m.insert(site, (masks[c].clone(), full.clone()));
        registry.insert(c, m);
        uploads.push(Upload {
            client: c,
            modules: [(site, PairUpload { a: values[c].clone(), b: Mat::zeros(2, 2) })].into_iter().collect(),
        });
    }
    let gamma = size_weights(&[10, 10])?;
    for mode in [AggregationMode::Literal, AggregationMode::OverlapNormalized] {
        let out = aggregate(&uploads, &gamma, &registry, mode)?;
        println!("{}", mode.as_str());
        for (c, mods) in &out {
            let a = &mods[&site].a;
            println!("  client {c} receives A = [[{}, {}], [{}, {}]]", a.get(0, 0), a.get(0, 1), a.get(1, 0), a.get(1, 1));
        }
    }
    Ok(())
}
