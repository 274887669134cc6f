//! Saliency scores for adapter entries and the iterative mask search.
//!
//! Scores estimate how much the loss changes when an entry is removed:
//!
//! - first order: `|g ⊙ θ|`
//! - second order: `|θ ⊙ F ⊙ θ|`, with `F` the diagonal empirical Fisher
//!   standing in for the Hessian diagonal
//! - mixed: `|g ⊙ θ - ½ θ ⊙ F ⊙ θ|`
//!
//! The search prunes each matrix over `T_p` epochs. After epoch `t` a matrix of
//! `N` entries keeps the `round((1 - s)^(t / T_p) · N)` highest-scoring of its
//! currently kept entries, so masks only ever shrink and end at
//! `round((1 - s) · N)` entries.

use std::collections::BTreeMap;

use crate::adapters::AdapterSet;
use crate::backbone::{AdapterGrads, Backbone, Site};
use crate::data::{LossScope, TokenSeq};
use crate::error::{Error, Result};
use crate::numerics::{ensure_same_shape, top_k, BitMask, Mat, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    First,
    Second,
    Mixed,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::First, Metric::Second, Metric::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::First => "first",
            Metric::Second => "second",
            Metric::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Metric::First),
            "second" => Ok(Metric::Second),
            "mixed" => Ok(Metric::Mixed),
            other => Err(Error::config(format!("unknown metric '{other}'"))),
        }
    }
}

fn zip_map(a: &Mat, b: &Mat, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
    ensure_same_shape(a, b, op)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Mat::from_vec(a.rows(), a.cols(), data)
}

pub fn score_first_order(theta: &Mat, grad: &Mat) -> Result<Mat> {
    zip_map(theta, grad, "score_first_order", |t, g| (g * t).abs())
}

pub fn score_second_order(theta: &Mat, fisher: &Mat) -> Result<Mat> {
    zip_map(theta, fisher, "score_second_order", |t, f| (t * f * t).abs())
}

pub fn score_mixed(theta: &Mat, grad: &Mat, fisher: &Mat) -> Result<Mat> {
    ensure_same_shape(theta, fisher, "score_mixed")?;
    let half_curv = zip_map(theta, fisher, "score_mixed", |t, f| 0.5 * t * f * t)?;
    let first = zip_map(theta, grad, "score_mixed", |t, g| g * t)?;
    zip_map(&first, &half_curv, "score_mixed", |a, b| (a - b).abs())
}

/// Diagonal Fisher estimate per site: mean over micro-batches of the squared
/// micro-batch gradient.
#[derive(Clone, Debug)]
pub struct FisherEstimate {
    pub per_site: AdapterGrads,
    pub micro_batches: usize,
}

/// First- and second-moment gradient information from one scoring batch.
#[derive(Clone, Debug)]
pub struct GradientStats {
    pub loss: f64,
    /// Mean gradient over every example of the batch.
    pub grad: AdapterGrads,
    pub fisher: FisherEstimate,
}

fn as_batch<'a>(seqs: &[&'a TokenSeq], scope: LossScope) -> Vec<(&'a [u32], usize)> {
    seqs.iter()
        .map(|s| (s.ids.as_slice(), s.first_target(scope)))
        .collect()
}

/// Splits `batch` into `micro_batches` contiguous chunks (sizes differ by at
/// most one) and computes the batch-mean gradient and the Fisher estimate.
pub fn gradient_stats(
    backbone: &Backbone,
    adapters: &AdapterSet,
    batch: &[&TokenSeq],
    micro_batches: usize,
    scope: LossScope,
) -> Result<GradientStats> {
    if batch.is_empty() {
        return Err(Error::data("empty scoring batch"));
    }
    if micro_batches == 0 {
        return Err(Error::config("micro_batches must be at least 1"));
    }
    let chunks = micro_batches.min(batch.len());
    let base = batch.len() / chunks;
    let extra = batch.len() % chunks;
    let n = batch.len() as f64;

    let mut grad: Option<AdapterGrads> = None;
    let mut fisher: Option<AdapterGrads> = None;
    let mut loss = 0.0;
    let mut start = 0;
    for c in 0..chunks {
        let len = base + usize::from(c < extra);
        let chunk = as_batch(&batch[start..start + len], scope);
        start += len;
        let (l, g) = backbone.mean_gradient(adapters, &chunk)?;
        let w = len as f64 / n;
        loss += w * l;
        let acc_g = grad.get_or_insert_with(|| zeros_like(&g));
        let acc_f = fisher.get_or_insert_with(|| zeros_like(&g));
        for (site, pg) in &g {
            let ag = acc_g.get_mut(site).expect("site");
            ag.a.add_scaled(&pg.a, w);
            ag.b.add_scaled(&pg.b, w);
            let af = acc_f.get_mut(site).expect("site");
            add_square(&mut af.a, &pg.a);
            add_square(&mut af.b, &pg.b);
        }
    }
    let mut fisher = fisher.expect("at least one chunk");
    for pf in fisher.values_mut() {
        pf.a.scale(1.0 / chunks as f64);
        pf.b.scale(1.0 / chunks as f64);
    }
    Ok(GradientStats {
        loss,
        grad: grad.expect("at least one chunk"),
        fisher: FisherEstimate {
            per_site: fisher,
            micro_batches: chunks,
        },
    })
}

/// `F = mean_k (g_k ⊙ g_k)` over `micro_batches` micro-batch gradients `g_k`.
pub fn estimate_fisher(
    backbone: &Backbone,
    adapters: &AdapterSet,
    batch: &[&TokenSeq],
    micro_batches: usize,
    scope: LossScope,
) -> Result<FisherEstimate> {
    Ok(gradient_stats(backbone, adapters, batch, micro_batches, scope)?.fisher)
}

fn zeros_like(g: &AdapterGrads) -> AdapterGrads {
    g.iter()
        .map(|(s, pg)| {
            (
                *s,
                crate::backbone::PairGrad {
                    a: Mat::zeros(pg.a.rows(), pg.a.cols()),
                    b: Mat::zeros(pg.b.rows(), pg.b.cols()),
                },
            )
        })
        .collect()
}

fn add_square(acc: &mut Mat, g: &Mat) {
    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += v * v;
    }
}

/// Score matrices aligned with one pair's `A` and `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScores {
    pub a: Mat,
    pub b: Mat,
}

#[derive(Clone, Debug)]
pub struct SaliencyScores {
    pub metric: Metric,
    pub per_site: BTreeMap<Site, PairScores>,
}

fn score_matrix(metric: Metric, theta: &Mat, grad: &Mat, fisher: &Mat) -> Result<Mat> {
    match metric {
        Metric::First => score_first_order(theta, grad),
        Metric::Second => score_second_order(theta, fisher),
        Metric::Mixed => score_mixed(theta, grad, fisher),
    }
}

/// Scores of the adapters' current values under `metric`.
pub fn scores_from_stats(adapters: &AdapterSet, stats: &GradientStats, metric: Metric) -> Result<SaliencyScores> {
    let mut per_site = BTreeMap::new();
    for (site, pair) in adapters {
        let g = stats
            .grad
            .get(site)
            .ok_or_else(|| Error::logic(format!("no gradient for site {site}")))?;
        let f = &stats.fisher.per_site[site];
        per_site.insert(
            *site,
            PairScores {
                a: score_matrix(metric, &pair.a, &g.a, &f.a)?,
                b: score_matrix(metric, &pair.b, &g.b, &f.b)?,
            },
        );
    }
    Ok(SaliencyScores { metric, per_site })
}

pub fn compute_scores(
    backbone: &Backbone,
    adapters: &AdapterSet,
    batch: &[&TokenSeq],
    micro_batches: usize,
    metric: Metric,
    scope: LossScope,
) -> Result<SaliencyScores> {
    let stats = gradient_stats(backbone, adapters, batch, micro_batches, scope)?;
    scores_from_stats(adapters, &stats, metric)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneSchedule {
    pub epochs: usize,
    pub sparsity: f64,
}

impl PruneSchedule {
    pub fn new(epochs: usize, sparsity: f64) -> Result<Self> {
        if epochs == 0 {
            return Err(Error::config("prune epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&sparsity) {
            return Err(Error::config(format!("sparsity {sparsity} outside [0, 1)")));
        }
        Ok(PruneSchedule { epochs, sparsity })
    }

    /// `(1 - s)^(t / T_p)`
    pub fn keep_fraction(&self, epoch: usize) -> f64 {
        (1.0 - self.sparsity).powf(epoch as f64 / self.epochs as f64)
    }

    /// Entries of an `total`-entry matrix kept after `epoch`.
    pub fn kept_count(&self, epoch: usize, total: usize) -> usize {
        (self.keep_fraction(epoch) * total as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchSettings {
    /// Examples scored per pruning epoch (the whole split if smaller).
    pub score_batch: usize,
    /// Examples per micro-batch for the Fisher estimate.
    pub micro_batch: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings {
            score_batch: 64,
            micro_batch: 8,
        }
    }
}

/// Kept counts `(A, B)` per site after each pruning epoch.
pub type KeptHistory = Vec<BTreeMap<Site, (usize, usize)>>;

/// Final masks plus the per-epoch record of the search.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub masks: BTreeMap<Site, (BitMask, BitMask)>,
    pub kept: KeptHistory,
    /// Masks after each epoch.
    pub trail: Vec<BTreeMap<Site, (BitMask, BitMask)>>,
    /// Mean scoring-batch loss at each epoch.
    pub losses: Vec<f64>,
}

fn prune_matrix(mask: &mut BitMask, scores: &Mat, target: usize) {
    let current = mask.ones_indices();
    let keep = top_k(scores.data(), &current, target.min(current.len()));
    *mask = BitMask::from_indices(mask.rows(), mask.cols(), &keep);
}

/// Iterative foresight pruning of every adapter in `adapters`.
///
/// Expects symmetric-init adapters with all-ones masks. On return the masks
/// are set on the pairs and their pruned entries are zero.
pub fn search_architecture(
    backbone: &Backbone,
    adapters: &mut AdapterSet,
    train: &[TokenSeq],
    schedule: PruneSchedule,
    metric: Metric,
    settings: SearchSettings,
    scope: LossScope,
    rng: &mut RngStream,
) -> Result<SearchOutcome> {
    if train.is_empty() {
        return Err(Error::data("mask search needs a non-empty training split"));
    }
    if settings.score_batch == 0 || settings.micro_batch == 0 {
        return Err(Error::config("score batch and micro-batch must be at least 1"));
    }
    for (site, pair) in adapters.iter() {
        let kept_a = schedule.kept_count(schedule.epochs, pair.a.len());
        let kept_b = schedule.kept_count(schedule.epochs, pair.b.len());
        if kept_a == 0 || kept_b == 0 {
            return Err(Error::config(format!(
                "sparsity {} leaves no trainable entries at site {site}",
                schedule.sparsity
            )));
        }
    }

    let mut kept = Vec::with_capacity(schedule.epochs);
    let mut losses = Vec::with_capacity(schedule.epochs);
    let mut trail = Vec::with_capacity(schedule.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=schedule.epochs {
        rng.shuffle(&mut order);
        let batch: Vec<&TokenSeq> = order
            .iter()
            .take(settings.score_batch.min(train.len()))
            .map(|&i| &train[i])
            .collect();
        let micro = batch.len().div_ceil(settings.micro_batch);
        let stats = gradient_stats(backbone, adapters, &batch, micro, scope)?;
        let scores = scores_from_stats(adapters, &stats, metric)?;
        losses.push(stats.loss);

        let mut counts = BTreeMap::new();
        for (site, pair) in adapters.iter_mut() {
            let s = &scores.per_site[site];
            prune_matrix(&mut pair.mask_a, &s.a, schedule.kept_count(epoch, pair.a.len()));
            prune_matrix(&mut pair.mask_b, &s.b, schedule.kept_count(epoch, pair.b.len()));
            pair.apply_masks();
            counts.insert(*site, (pair.mask_a.count_ones(), pair.mask_b.count_ones()));
        }
        kept.push(counts);
        trail.push(
            adapters
                .iter()
                .map(|(s, p)| (*s, (p.mask_a.clone(), p.mask_b.clone())))
                .collect::<BTreeMap<_, _>>(),
        );
    }
    let masks = trail.last().cloned().unwrap_or_default();
    Ok(SearchOutcome {
        masks,
        kept,
        trail,
        losses,
    })
}
