//! One client, full participation, no pruning: the federated loop must be
//! plain dense LoRA SGD.

use fedprune::adapters::AdapterSet;
use fedprune::backbone::{Backbone, BackboneConfig};
use fedprune::data::{LossScope, PartitionKind, TokenSeq};
use fedprune::federation::{epoch_order, DataSource, RunConfig, Simulation};
use fedprune::numerics::Mat;

fn small_config() -> RunConfig {
    RunConfig {
        clients: 1,
        participation: 1.0,
        rounds: 5,
        rank: 4,
        sparsity: 0.0,
        partition: PartitionKind::Dirichlet { beta: 1.0 },
        learning_rate: 0.5,
        data: DataSource::Synthetic {
            per_category: 12,
            seed: 3,
        },
        backbone: BackboneConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq: 64,
            ..BackboneConfig::default()
        },
        seed: 11,
        ..RunConfig::default()
    }
}

/// Dense SGD written against the per-example forward/backward only.
fn oracle_epoch(
    backbone: &Backbone,
    adapters: &mut AdapterSet,
    seqs: &[TokenSeq],
    order: &[usize],
    batch: usize,
    lr: f64,
) {
    for window in order.chunks(batch) {
        let mut sum: Vec<(Mat, Mat)> = adapters
            .values()
            .map(|p| (Mat::zeros(p.a.rows(), p.a.cols()), Mat::zeros(p.b.rows(), p.b.cols())))
            .collect();
        for &i in window {
            let (_, tape) = backbone.forward(adapters, &seqs[i].ids).unwrap();
            let g = backbone.backward_adapters(tape, adapters).unwrap();
            for (acc, pg) in sum.iter_mut().zip(g.values()) {
                acc.0.add_scaled(&pg.a, 1.0);
                acc.1.add_scaled(&pg.b, 1.0);
            }
        }
        let n = window.len() as f64;
        for (pair, (ga, gb)) in adapters.values_mut().zip(&sum) {
            pair.a.add_scaled(ga, -lr / n);
            pair.b.add_scaled(gb, -lr / n);
        }
    }
}

#[test]
fn five_rounds_equal_five_dense_epochs() {
    let config = small_config();
    let mut sim = Simulation::new(config.clone(), 1).unwrap();
    sim.search().unwrap();
    let client = &sim.clients()[0];
    assert!(client.train.len() > config.batch_size, "want more than one window per epoch");
    let train = client.train.clone();
    let mut oracle = client.adapters.clone();
    let backbone = sim.backbone().clone();
    let seqs = sim.sequences().to_vec();
    assert_eq!(config.loss_scope, LossScope::Full);

    for t in 0..config.rounds {
        sim.run_round(t).unwrap();
        let order = epoch_order(config.seed, 0, t, 0, &train);
        oracle_epoch(&backbone, &mut oracle, &seqs, &order, config.batch_size, config.learning_rate);
    }

    let got = &sim.clients()[0].adapters;
    let mut worst: f64 = 0.0;
    for (site, pair) in got {
        worst = worst.max(pair.a.max_abs_diff(&oracle[site].a));
        worst = worst.max(pair.b.max_abs_diff(&oracle[site].b));
    }
    assert!(worst < 1e-9, "max deviation {worst:e}");
    assert!(oracle.values().any(|p| p.b.max_abs() > 0.0), "training moved B");
}

#[test]
fn zero_learning_rate_leaves_adapters_unchanged() {
    let config = RunConfig {
        learning_rate: 0.0,
        rounds: 2,
        ..small_config()
    };
    let mut sim = Simulation::new(config, 1).unwrap();
    sim.search().unwrap();
    let before = sim.clients()[0].adapters.clone();
    for t in 0..2 {
        let r = sim.run_round(t).unwrap();
        assert!(r.summary.mean_train_loss.unwrap().is_finite());
    }
    assert_eq!(sim.clients()[0].adapters, before);
}
