use std::collections::BTreeMap;

use log::warn;

use crate::adapters::{apply_mask, AdapterSet};
use crate::backbone::{AdapterGrads, Backbone, PairGrad, Site};
use crate::data::{LossScope, TokenSeq};
use crate::error::Result;
use crate::numerics::{Mat, RngStream};

use super::config::OptimizerKind;
use super::server::{PairUpload, SiteMasks};

const SHUFFLE_STREAM: u64 = 0x5F;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum BudgetLevel {
    Small,
    Medium,
    Large,
}

impl BudgetLevel {
    pub const ALL: [BudgetLevel; 3] = [BudgetLevel::Small, BudgetLevel::Medium, BudgetLevel::Large];

    pub fn as_str(self) -> &'static str {
        match self {
            BudgetLevel::Small => "small",
            BudgetLevel::Medium => "medium",
            BudgetLevel::Large => "large",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    /// Example ids into the run's corpus.
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub adapters: AdapterSet,
    /// `None` in homogeneous runs.
    pub level: Option<BudgetLevel>,
    pub rank: usize,
    pub sparsity: f64,
    /// Master seed; every stream of this client is derived from it and the id.
    pub seed: u64,
}

impl ClientState {
    pub fn masks(&self) -> SiteMasks {
        self.adapters
            .iter()
            .map(|(s, p)| (*s, (p.mask_a.clone(), p.mask_b.clone())))
            .collect()
    }

    /// Visiting order of the train split for one local epoch.
    pub fn epoch_order(&self, round: usize, epoch: usize) -> Vec<usize> {
        epoch_order(self.seed, self.id, round, epoch, &self.train)
    }

    /// Installs dispatched modules, re-applying the client's own masks.
    pub fn receive(&mut self, modules: &BTreeMap<Site, PairUpload>) {
        for (site, m) in modules {
            if let Some(pair) = self.adapters.get_mut(site) {
                pair.a = m.a.clone();
                pair.b = m.b.clone();
                pair.apply_masks();
            }
        }
    }
}

pub fn epoch_order(seed: u64, client: usize, round: usize, epoch: usize, train: &[usize]) -> Vec<usize> {
    let mut ids = train.to_vec();
    RngStream::derive(seed, &[SHUFFLE_STREAM, client as u64, round as u64, epoch as u64])
        .shuffle(&mut ids);
    ids
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub micro_batch: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub scope: LossScope,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer moments; recreated for every local fine-tuning call.
struct OptState {
    kind: OptimizerKind,
    momentum: f64,
    step: i32,
    first: BTreeMap<Site, PairGrad>,
    second: BTreeMap<Site, PairGrad>,
}

impl OptState {
    fn new(kind: OptimizerKind, momentum: f64) -> Self {
        OptState {
            kind,
            momentum,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    fn apply(&mut self, adapters: &mut AdapterSet, grads: &AdapterGrads, lr: f64) {
        self.step += 1;
        for (site, pair) in adapters.iter_mut() {
            let g = &grads[site];
            match self.kind {
                OptimizerKind::Sgd => pair.sgd_step(&g.a, &g.b, lr),
                OptimizerKind::Momentum => {
                    let v = self.first.entry(*site).or_insert_with(|| zeros_like(g));
                    v.a.scale(self.momentum);
                    v.a.add_scaled(&g.a, 1.0);
                    v.b.scale(self.momentum);
                    v.b.add_scaled(&g.b, 1.0);
                    pair.sgd_step(&v.a, &v.b, lr);
                }
                OptimizerKind::Adam => {
                    let m = self.first.entry(*site).or_insert_with(|| zeros_like(g));
                    let v = self.second.entry(*site).or_insert_with(|| zeros_like(g));
                    let b1 = self.momentum;
                    let c1 = 1.0 - b1.powi(self.step);
                    let c2 = 1.0 - ADAM_BETA2.powi(self.step);
                    let upd_a = adam(&mut m.a, &mut v.a, &g.a, b1, c1, c2);
                    let upd_b = adam(&mut m.b, &mut v.b, &g.b, b1, c1, c2);
                    pair.sgd_step(&upd_a, &upd_b, lr);
                }
            }
        }
    }
}

fn zeros_like(g: &PairGrad) -> PairGrad {
    PairGrad {
        a: Mat::zeros(g.a.rows(), g.a.cols()),
        b: Mat::zeros(g.b.rows(), g.b.cols()),
    }
}

fn adam(m: &mut Mat, v: &mut Mat, g: &Mat, b1: f64, c1: f64, c2: f64) -> Mat {
    let mut out = Mat::zeros(g.rows(), g.cols());
    let it = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
    for ((mi, vi), (gi, oi)) in it.zip(g.data().iter().zip(out.data_mut())) {
        *mi = b1 * *mi + (1.0 - b1) * gi;
        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
        *oi = (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
    }
    out
}

/// Mean loss and mean gradient over one accumulation window, built from
/// micro-batches weighted by their size.
pub fn window_gradient(
    backbone: &Backbone,
    adapters: &AdapterSet,
    window: &[&TokenSeq],
    micro_batch: usize,
    scope: LossScope,
) -> Result<(f64, AdapterGrads)> {
    let n = window.len() as f64;
    let mut loss = 0.0;
    let mut acc: Option<AdapterGrads> = None;
    for micro in window.chunks(micro_batch) {
        let batch: Vec<(&[u32], usize)> = micro
            .iter()
            .map(|s| (s.ids.as_slice(), s.first_target(scope)))
            .collect();
        let (l, g) = backbone.mean_gradient(adapters, &batch)?;
        let w = micro.len() as f64 / n;
        loss += w * l;
        let sum = acc.get_or_insert_with(|| g.iter().map(|(s, p)| (*s, zeros_like(p))).collect());
        for (site, pg) in &g {
            let s = sum.get_mut(site).expect("same sites");
            s.a.add_scaled(&pg.a, w);
            s.b.add_scaled(&pg.b, w);
        }
    }
    Ok((loss, acc.unwrap_or_default()))
}

/// Per-step mean training loss of one local fine-tuning call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub steps: Vec<f64>,
}

impl LossTrace {
    pub fn mean(&self) -> Option<f64> {
        if self.steps.is_empty() {
            None
        } else {
            Some(self.steps.iter().sum::<f64>() / self.steps.len() as f64)
        }
    }
}

/// `e` epochs of masked training on the client's train split.
///
/// An empty train split leaves the adapters untouched and returns `None`.
pub fn local_finetune(
    client: &mut ClientState,
    backbone: &Backbone,
    sequences: &[TokenSeq],
    settings: &TrainSettings,
    round: usize,
) -> Result<Option<LossTrace>> {
    if client.train.is_empty() {
        warn!("client {} has no training data; skipped", client.id);
        return Ok(None);
    }
    let mut opt = OptState::new(settings.optimizer, settings.momentum);
    let mut trace = LossTrace::default();
    for epoch in 0..settings.epochs {
        let order = client.epoch_order(round, epoch);
        for window in order.chunks(settings.batch_size) {
            let seqs: Vec<&TokenSeq> = window.iter().map(|&i| &sequences[i]).collect();
            let (loss, grads) = window_gradient(
                backbone,
                &client.adapters,
                &seqs,
                settings.micro_batch,
                settings.scope,
            )?;
            if !loss.is_finite() {
                return Err(crate::Error::numeric(format!(
                    "client {} round {round}: non-finite training loss",
                    client.id
                )));
            }
            opt.apply(&mut client.adapters, &grads, settings.learning_rate);
            for pair in client.adapters.values_mut() {
                pair.a.ensure_finite("adapter A")?;
                pair.b.ensure_finite("adapter B")?;
                apply_mask(&mut pair.a, &pair.mask_a);
                apply_mask(&mut pair.b, &pair.mask_b);
            }
            trace.steps.push(loss);
        }
    }
    Ok(Some(trace))
}
