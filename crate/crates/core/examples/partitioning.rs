//! Category histograms per client under the two non-IID schemes.
//!
//!     cargo run --example partitioning

use fedprune::data::{partition, synth_corpus, Category, PartitionKind, PartitionSpec};

fn main() -> fedprune::Result<()> {
    let corpus = synth_corpus(50, 0);
    for kind in [
        PartitionKind::Pathological { classes_per_client: 2 },
        PartitionKind::Dirichlet { beta: 0.5 },
    ] {
        let shards = partition(
            &corpus,
            &PartitionSpec {
                kind,
                clients: 8,
                seed: 0,
            },
        )?;
        println!("{kind:?}");
        for (client, shard) in shards.iter().enumerate() {
            let mut counts = [0usize; 8];
            for &id in shard {
                counts[corpus[id].category.index()] += 1;
            }
            let row: Vec<String> = counts.iter().map(|c| format!("{c:>3}")).collect();
            println!("  client {client}: {} (n={})", row.join(""), shard.len());
        }
    }
    let names: Vec<&str> = Category::ALL.iter().map(|c| c.as_str()).collect();
    println!("columns: {}", names.join(", "));
    Ok(())
}
