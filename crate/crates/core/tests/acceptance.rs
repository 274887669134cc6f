//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! `cargo test --test acceptance` (7 to 9 minutes on one core).

use std::fs;
use std::path::Path;
use std::time::Instant;

use fedprune::adapters::AdapterSet;
use fedprune::backbone::{Backbone, BackboneConfig};
use fedprune::data::{synth_corpus, tokenize, LossScope, PartitionKind, TokenSeq};
use fedprune::federation::{
    aggregate, epoch_order, size_weights, AggregationMode, DataSource, MaskRegistry, PairUpload,
    RunConfig, Simulation, SiteMasks, Upload,
};
use fedprune::metrics::{similarity_matrix, SiteSelector};
use fedprune::numerics::{sample_gaussian, BitMask, Mat, RngStream};
use fedprune::saliency::{compute_scores, search_architecture, Metric, PruneSchedule, SearchSettings};

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        ok,
        detail: detail.into(),
    }
}

fn small_backbone(seed: u64) -> Backbone {
    Backbone::random(BackboneConfig {
        vocab_size: fedprune::data::VOCAB_SIZE,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        max_seq: 96,
        init_seed: seed,
    })
    .unwrap()
}

fn synth_batch(n: usize, max_seq: usize) -> Vec<TokenSeq> {
    synth_corpus(n.div_ceil(8), 4)
        .iter()
        .take(n)
        .map(|ex| tokenize(ex, max_seq))
        .collect()
}

fn gradient_check() -> Verdict {
    let t = Instant::now();
    let bb = small_backbone(5);
    let mut adapters = bb.empty_adapters(4, 0.5, 8);
    let mut rng = RngStream::new(5, 77);
    for pair in adapters.values_mut() {
        pair.init_symmetric(&mut rng);
    }
    let tokens = synth_batch(1, 48).remove(0).ids;
    let (_, tape) = bb.forward(&adapters, &tokens).unwrap();
    let grads: Vec<_> = bb.backward_adapters(tape, &adapters).unwrap().into_values().collect();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let site = rng.below(grads.len());
        let in_a = rng.below(2) == 0;
        let g = if in_a { &grads[site].a } else { &grads[site].b };
        let flat = rng.below(g.len());
        let eval = |delta: f64| {
            let mut ad = adapters.clone();
            let pair = ad.values_mut().nth(site).unwrap();
            let m = if in_a { &mut pair.a } else { &mut pair.b };
            m.data_mut()[flat] += delta;
            bb.loss(&ad, &tokens).unwrap()
        };
        let fd = (eval(step) - eval(-step)) / (2.0 * step);
        worst = worst.max((g.data()[flat] - fd).abs() / fd.abs().max(1e-12));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst < 1e-5 && secs < 30.0,
        format!("worst relative error {worst:.2e} (< 1e-5), {secs:.1}s (< 30s)"),
    )
}

fn measurement_vanishing() -> Verdict {
    let bb = small_backbone(9);
    let batch = synth_batch(16, 96);
    let refs: Vec<&TokenSeq> = batch.iter().collect();
    let mut lines = Vec::new();
    let mut ok = true;
    for metric in [Metric::First, Metric::Second, Metric::Mixed] {
        let mut zero_b = bb.empty_adapters(4, 0.5, 8);
        let mut sym = zero_b.clone();
        let mut rng = RngStream::new(9, 1);
        for pair in zero_b.values_mut() {
            pair.init_finetune(&mut rng);
        }
        for pair in sym.values_mut() {
            pair.init_symmetric(&mut rng);
        }
        let s0 = compute_scores(&bb, &zero_b, &refs, 2, metric, LossScope::Full).unwrap();
        let max_zero = s0.per_site.values().map(|p| p.a.max_abs()).fold(0.0, f64::max);
        let s1 = compute_scores(&bb, &sym, &refs, 2, metric, LossScope::Full).unwrap();
        let (nz, total) = s1.per_site.values().fold((0, 0), |(n, t), p| {
            (n + p.a.data().iter().filter(|v| **v != 0.0).count(), t + p.a.len())
        });
        let frac = nz as f64 / total as f64;
        ok &= max_zero == 0.0 && frac > 0.99;
        lines.push(format!("{}: B=0 max|score| {max_zero:e}, symmetric nonzero {:.2}%", metric.as_str(), 100.0 * frac));
    }
    verdict(ok, lines.join("; "))
}

fn schedule_exactness() -> Verdict {
    let bb = small_backbone(3);
    let train = synth_batch(32, 96);
    let mut ok = true;
    let mut worst_dev = 0i64;
    for s in [0.33, 0.5, 0.66] {
        for tp in [5, 10] {
            let schedule = PruneSchedule::new(tp, s).unwrap();
            let mut adapters: AdapterSet = bb.empty_adapters(4, s, 12);
            let mut rng = RngStream::new(3, tp as u64);
            for pair in adapters.values_mut() {
                pair.init_symmetric(&mut rng);
            }
            let out = search_architecture(
                &bb,
                &mut adapters,
                &train,
                schedule,
                Metric::First,
                SearchSettings::default(),
                LossScope::Full,
                &mut rng,
            )
            .unwrap();
            let n = 32 * 12;
            for (t, epoch) in out.trail.iter().enumerate() {
                let want = ((1.0 - s).powf((t + 1) as f64 / tp as f64) * n as f64).round() as i64;
                for (site, (ma, mb)) in epoch {
                    for m in [ma, mb] {
                        let dev = (m.count_ones() as i64 - want).abs();
                        worst_dev = worst_dev.max(dev);
                        ok &= dev <= 1;
                    }
                    if t > 0 {
                        let (pa, pb) = &out.trail[t - 1][site];
                        ok &= ma.is_subset_of(pa) && mb.is_subset_of(pb);
                    }
                }
            }
            let fin = ((1.0 - s) * n as f64).round() as i64;
            for (ma, mb) in out.masks.values() {
                ok &= (ma.count_ones() as i64 - fin).abs() <= 1 && (mb.count_ones() as i64 - fin).abs() <= 1;
            }
        }
    }
    verdict(ok, format!("6 schedules, worst count deviation {worst_dev} (<= 1), nested masks"))
}

fn oracle_config() -> RunConfig {
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

fn oracle_equivalence() -> Verdict {
    let config = oracle_config();
    let mut sim = Simulation::new(config.clone(), 1).unwrap();
    sim.search().unwrap();
    let train = sim.clients()[0].train.clone();
    let mut oracle = sim.clients()[0].adapters.clone();
    let bb = sim.backbone().clone();
    let seqs = sim.sequences().to_vec();
    for t in 0..config.rounds {
        sim.run_round(t).unwrap();
        for window in epoch_order(config.seed, 0, t, 0, &train).chunks(config.batch_size) {
            let mut sum: Vec<(Mat, Mat)> = oracle
                .values()
                .map(|p| (Mat::zeros(p.a.rows(), p.a.cols()), Mat::zeros(p.b.rows(), p.b.cols())))
                .collect();
            for &i in window {
                let (_, tape) = bb.forward(&oracle, &seqs[i].ids).unwrap();
                let g = bb.backward_adapters(tape, &oracle).unwrap();
                for (acc, pg) in sum.iter_mut().zip(g.values()) {
                    acc.0.add_scaled(&pg.a, 1.0);
                    acc.1.add_scaled(&pg.b, 1.0);
                }
            }
            let step = -config.learning_rate / window.len() as f64;
            for (pair, (ga, gb)) in oracle.values_mut().zip(&sum) {
                pair.a.add_scaled(ga, step);
                pair.b.add_scaled(gb, step);
            }
        }
    }
    let mut worst: f64 = 0.0;
    for (site, pair) in &sim.clients()[0].adapters {
        worst = worst.max(pair.a.max_abs_diff(&oracle[site].a));
        worst = worst.max(pair.b.max_abs_diff(&oracle[site].b));
    }
    verdict(worst < 1e-9, format!("max deviation {worst:.2e} (< 1e-9)"))
}

fn fedavg_reduction() -> Verdict {
    let (d, r) = (16, 8);
    let mut rng = RngStream::new(21, 0);
    let bits = |rng: &mut RngStream, rows, cols| {
        let v: Vec<bool> = (0..rows * cols).map(|_| rng.uniform() < 0.5).collect();
        BitMask::from_bools(rows, cols, &v).unwrap()
    };
    let sites = BackboneConfig {
        n_layers: 2,
        ..BackboneConfig::default()
    }
    .sites();
    let shared: SiteMasks = sites
        .iter()
        .map(|s| (*s, (bits(&mut rng, d, r), bits(&mut rng, r, d))))
        .collect();
    let registry: MaskRegistry = (0..4).map(|c| (c, shared.clone())).collect();
    let gamma = size_weights(&[25; 4]).unwrap();
    let uploads: Vec<Upload> = (0..4)
        .map(|c| Upload {
            client: c,
            modules: shared
                .iter()
                .map(|(s, (ma, mb))| {
                    let mut a = sample_gaussian(&mut rng, d, r, 1.0);
                    let mut b = sample_gaussian(&mut rng, r, d, 1.0);
                    zero_outside(&mut a, ma);
                    zero_outside(&mut b, mb);
                    (*s, PairUpload { a, b })
                })
                .collect(),
        })
        .collect();
    let mut worst: f64 = 0.0;
    for mode in [AggregationMode::Literal, AggregationMode::OverlapNormalized] {
        let out = aggregate(&uploads, &gamma, &registry, mode).unwrap();
        for (s, (ma, mb)) in &shared {
            for (pick, mask) in [(true, ma), (false, mb)] {
                let (rows, cols) = mask.shape();
                for i in 0..rows {
                    for j in 0..cols {
                        let mean = uploads
                            .iter()
                            .map(|u| if pick { u.modules[s].a.get(i, j) } else { u.modules[s].b.get(i, j) })
                            .sum::<f64>()
                            / 4.0;
                        let want = if mask.get(i, j) { mean } else { 0.0 };
                        for c in 0..4 {
                            let p = &out[&c][s];
                            let got = if pick { p.a.get(i, j) } else { p.b.get(i, j) };
                            worst = worst.max((got - want).abs());
                        }
                    }
                }
            }
        }
    }
    verdict(worst < 1e-12, format!("literal and overlap, max deviation {worst:.2e} (< 1e-12)"))
}

fn zero_outside(m: &mut Mat, mask: &BitMask) {
    for (i, v) in m.data_mut().iter_mut().enumerate() {
        if !mask.get_flat(i) {
            *v = 0.0;
        }
    }
}

fn desk_config(seed: u64, pairs: &[(&str, &str)]) -> RunConfig {
    let mut c = RunConfig {
        seed,
        ..RunConfig::default()
    };
    for (k, v) in pairs {
        c.set(k, v).unwrap();
    }
    c
}

fn final_ppl(config: RunConfig) -> f64 {
    let mut sim = Simulation::new(config, 1).unwrap();
    sim.run().unwrap().final_mean_perplexity().unwrap()
}

const SPARSE: [(&str, &str); 5] = [
    ("rank", "8"),
    ("sparsity", "0.5"),
    ("finetune_init", "keep"),
    ("aggregation", "overlap"),
    ("learning_rate", "2.0"),
];
const DENSE: [(&str, &str); 3] = [("rank", "8"), ("sparsity", "0"), ("learning_rate", "2.0")];
const SPARSE_DEFAULTS: [(&str, &str); 2] = [("rank", "8"), ("sparsity", "0.5")];

fn directional(seed0_sparse: &mut Option<f64>) -> Verdict {
    let t = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..4 {
        let p = final_ppl(desk_config(seed, &SPARSE));
        let f = final_ppl(desk_config(seed, &DENSE));
        if seed == 0 {
            *seed0_sparse = Some(p);
        }
        wins += usize::from(p <= f);
        rows.push(format!("seed {seed} {p:.1} vs {f:.1}"));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        wins >= 3 && secs < 600.0,
        format!("sparse <= dense on {wins}/4 seeds (>= 3): {}; {secs:.0}s (< 600s)", rows.join(", ")),
    )
}

fn default_variant() -> String {
    let rows: Vec<String> = (0..4)
        .map(|seed| {
            let p = final_ppl(desk_config(seed, &SPARSE_DEFAULTS));
            let f = final_ppl(desk_config(seed, &DENSE));
            format!("seed {seed} {p:.1} vs {f:.1}")
        })
        .collect();
    rows.join(", ")
}

fn hetero_group() -> Verdict {
    let mut seeds_ok = 0;
    let mut invariants = true;
    let mut rows = Vec::new();
    for seed in 0..4 {
        let config = desk_config(
            seed,
            &[
                ("hetero_ranks", "8,12,16"),
                ("rounds", "20"),
                ("finetune_init", "keep"),
                ("aggregation", "overlap"),
                ("learning_rate", "2.0"),
            ],
        );
        let mut sim = Simulation::new(config, 1).unwrap();
        sim.search().unwrap();
        let mut losses = Vec::new();
        for t in 0..20 {
            let report = sim.run_round(t).unwrap();
            invariants &= (report.weight_sum - 1.0).abs() < 1e-12;
            losses.push(report.summary.mean_train_loss.unwrap());
            for c in sim.clients() {
                let reg = &sim.server().registry()[&c.id];
                for (s, p) in &c.adapters {
                    invariants &= reg[s] == (p.mask_a.clone(), p.mask_b.clone());
                    invariants &= p.mask_a.count_ones().abs_diff(p.target_kept()) <= 1;
                    invariants &= p.a.data().iter().enumerate().all(|(i, v)| p.mask_a.get_flat(i) || *v == 0.0);
                    invariants &= p.b.data().iter().enumerate().all(|(i, v)| p.mask_b.get_flat(i) || *v == 0.0);
                }
            }
        }
        invariants &= sim.server().transmissions().values().all(|&n| n == 1);
        let blocks: Vec<f64> = losses.chunks(5).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
        let down = blocks.windows(2).all(|w| w[1] <= w[0]);
        seeds_ok += usize::from(down);
        let b: Vec<String> = blocks.iter().map(|v| format!("{v:.3}")).collect();
        rows.push(format!("seed {seed} [{}]", b.join(" ")));
    }
    verdict(
        invariants && seeds_ok >= 3,
        format!(
            "invariants {}, 5-round block means nonincreasing on {seeds_ok}/4 (>= 3): {}",
            if invariants { "hold" } else { "VIOLATED" },
            rows.join(", ")
        ),
    )
}

fn mask_similarity() -> Verdict {
    let config = desk_config(0, &[("clients", "10"), ("rank", "8"), ("sparsity", "0.5")]);
    let mut sim = Simulation::new(config, 1).unwrap();
    sim.search().unwrap();
    let ids: Vec<usize> = (0..10).collect();
    let m = similarity_matrix(sim.server().registry(), &ids, SiteSelector::All).unwrap();
    let n = ids.len();
    let symmetric = (0..n).all(|i| (0..n).all(|j| m.values.get(i, j) == m.values.get(j, i)));
    let unit = (0..n).all(|i| m.values.get(i, i) == 1.0);
    let off = m.off_diagonal();
    let max_off = off.iter().copied().fold(0.0, f64::max);
    let std = m.off_diagonal_std();
    verdict(
        symmetric && unit && max_off < 1.0 && std < 0.1,
        format!("symmetric {symmetric}, unit diagonal {unit}, max off-diagonal {max_off:.4} (< 1), std {std:.4} (< 0.1)"),
    )
}

fn metric_ablation(first: Option<f64>) -> Verdict {
    let first = first.unwrap_or_else(|| final_ppl(desk_config(0, &SPARSE)));
    let mut vals = vec![("first", first)];
    for metric in ["second", "mixed"] {
        let mut pairs = SPARSE.to_vec();
        pairs.push(("metric", metric));
        vals.push((metric, final_ppl(desk_config(0, &pairs))));
    }
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in i + 1..3 {
            let (a, b) = (vals[i].1, vals[j].1);
            worst = worst.max((a - b).abs() / a.min(b));
        }
    }
    let shown: Vec<String> = vals.iter().map(|(m, v)| format!("{m} {v:.2}")).collect();
    verdict(
        worst < 0.1,
        format!("{}; worst pairwise {:.2}% (< 10%)", shown.join(", "), 100.0 * worst),
    )
}

const DETERMINISM_CFG: &str = "\
clients = 6
participation = 0.5
rounds = 4
hetero_ranks = 2,3,4
prune_epochs = 3
synth_per_category = 6
backbone.d_model = 16
backbone.n_layers = 1
backbone.n_heads = 2
backbone.d_ff = 32
backbone.max_seq = 64
";

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, DETERMINISM_CFG).unwrap();
    let train = |workers: &str, config: &Path, out: &Path| {
        let argv = [
            "fedprune", "--workers", workers, "train", "--manifest", config.to_str().unwrap(), "--out",
            out.to_str().unwrap(),
        ];
        fedprune::cli::run(argv)
    };
    let first = tmp.path().join("w1");
    let mut ok = train("1", &cfg, &first) == 0;
    let manifest = first.join("manifest.txt");
    let mut compared = 0;
    for (workers, name) in [("1", "r1"), ("4", "r4")] {
        let out = tmp.path().join(name);
        ok &= train(workers, &manifest, &out) == 0;
        for entry in fs::read_dir(&first).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "csv") {
                let file = path.file_name().unwrap();
                ok &= fs::read(&path).ok() == fs::read(out.join(file)).ok();
                compared += 1;
            }
        }
    }
    verdict(ok && compared > 0, format!("{compared} CSV comparisons across workers 1 and 4, byte-identical: {ok}"))
}

fn main() {
    // libtest flags are passed through even with harness = false
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let started = Instant::now();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, v: Verdict| {
        let tag = if v.ok { "PASS" } else { "FAIL" };
        failed += usize::from(!v.ok);
        println!("criterion {n:>2} {tag} {name}: {}", v.detail);
    };
    report(1, "gradient check", gradient_check());
    report(2, "measurement vanishing", measurement_vanishing());
    report(3, "pruning schedule", schedule_exactness());
    report(4, "sequential oracle", oracle_equivalence());
    report(5, "FedAvg reduction", fedavg_reduction());
    let mut seed0 = None;
    report(6, "directional sparse vs dense", directional(&mut seed0));
    println!("   info: reinit + literal aggregation, sparse vs dense: {}", default_variant());
    report(7, "heterogeneous group", hetero_group());
    report(8, "mask similarity", mask_similarity());
    report(9, "metric ablation", metric_ablation(seed0));
    report(10, "determinism", determinism());
    println!("acceptance: {failed} failed, {:.0}s", started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
