//! Pairwise Hamming similarity of searched masks across clients.
//!
//!     cargo run --release --example mask_similarity -- [all|l0q|...]

use fedprune::federation::{RunConfig, Simulation};
use fedprune::metrics::{similarity_matrix, SiteSelector};

fn main() -> fedprune::Result<()> {
    let selector = SiteSelector::parse(&std::env::args().nth(1).unwrap_or_else(|| "all".into()))?;
    let mut config = RunConfig::default();
    config.apply_text("clients = 10\n")?;
    let mut sim = Simulation::new(config, 1)?;
    sim.search()?;
    let ids: Vec<usize> = sim.clients().iter().map(|c| c.id).collect();
    let m = similarity_matrix(sim.server().registry(), &ids, selector)?;
    for i in 0..ids.len() {
        let row: Vec<String> = (0..ids.len()).map(|j| format!("{:.3}", m.values.get(i, j))).collect();
        println!("{}", row.join(" "));
    }
    println!("off-diagonal std {:.4}", m.off_diagonal_std());
    Ok(())
}
