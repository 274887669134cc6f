use std::collections::BTreeMap;

use crate::adapters::AdapterSet;
use crate::backbone::Site;
use crate::error::{Error, Result};
use crate::numerics::{BitMask, Mat, RngStream};

use super::config::AggregationMode;

/// `(m_a, m_b)` per site.
pub type SiteMasks = BTreeMap<Site, (BitMask, BitMask)>;

/// Client id → masks, written once per client at the end of its search.
pub type MaskRegistry = BTreeMap<usize, SiteMasks>;

/// Masked `A`/`B` of one site as uploaded by a client.
#[derive(Clone, Debug, PartialEq)]
pub struct PairUpload {
    pub a: Mat,
    pub b: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Upload {
    pub client: usize,
    pub modules: BTreeMap<Site, PairUpload>,
}

impl Upload {
    /// Masked copy of a client's adapters.
    pub fn from_adapters(client: usize, adapters: &AdapterSet) -> Self {
        let modules = adapters
            .iter()
            .map(|(site, pair)| {
                let mut p = pair.clone();
                p.apply_masks();
                (*site, PairUpload { a: p.a, b: p.b })
            })
            .collect();
        Upload { client, modules }
    }
}

/// Personalized modules per recipient, keyed by client id.
pub type Dispatch = BTreeMap<usize, BTreeMap<Site, PairUpload>>;

pub struct ServerState {
    registry: MaskRegistry,
    transmissions: BTreeMap<usize, usize>,
    round: usize,
    weights: Vec<(usize, f64)>,
    rng: RngStream,
}

const SAMPLING_STREAM: u64 = 0x5A;

impl ServerState {
    pub fn new(seed: u64) -> Self {
        ServerState {
            registry: BTreeMap::new(),
            transmissions: BTreeMap::new(),
            round: 0,
            weights: Vec::new(),
            rng: RngStream::derive(seed, &[SAMPLING_STREAM]),
        }
    }

    /// Stores a client's masks. A second registration for the same client is
    /// a protocol error: masks are static for the whole run.
    pub fn register(&mut self, client: usize, masks: SiteMasks) -> Result<()> {
        *self.transmissions.entry(client).or_insert(0) += 1;
        if self.registry.contains_key(&client) {
            return Err(Error::protocol(format!(
                "client {client} attempted to register masks twice"
            )));
        }
        self.registry.insert(client, masks);
        Ok(())
    }

    pub fn registry(&self) -> &MaskRegistry {
        &self.registry
    }

    /// Mask registrations attempted per client.
    pub fn transmissions(&self) -> &BTreeMap<usize, usize> {
        &self.transmissions
    }

    pub fn round(&self) -> usize {
        self.round
    }

    /// `γ` of the last aggregated round, by ascending client id.
    pub fn last_weights(&self) -> &[(usize, f64)] {
        &self.weights
    }

    /// `k` distinct client ids out of `m`, uniform without replacement, ascending.
    pub fn sample_participants(&mut self, m: usize, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > m {
            return Err(Error::config(format!("cannot sample {k} of {m} clients")));
        }
        let mut ids: Vec<usize> = (0..m).collect();
        for i in 0..k {
            let j = i + self.rng.below(m - i);
            ids.swap(i, j);
        }
        ids.truncate(k);
        ids.sort_unstable();
        Ok(ids)
    }

    /// Aggregates with weights proportional to `sizes`, then advances the round.
    pub fn aggregate_round(
        &mut self,
        uploads: &[Upload],
        sizes: &[usize],
        mode: AggregationMode,
    ) -> Result<Dispatch> {
        let gamma = size_weights(sizes)?;
        let out = aggregate(uploads, &gamma, &self.registry, mode)?;
        self.weights = uploads.iter().map(|u| u.client).zip(gamma).collect();
        self.weights.sort_by_key(|w| w.0);
        self.round += 1;
        Ok(out)
    }
}

/// `γ_j = n_j / Σ n`.
pub fn size_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::protocol("aggregation weights over zero examples"));
    }
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

fn check_upload(u: &Upload, masks: &SiteMasks) -> Result<()> {
    if u.modules.len() != masks.len() {
        return Err(Error::protocol(format!(
            "client {} uploaded {} sites, registered {}",
            u.client,
            u.modules.len(),
            masks.len()
        )));
    }
    for (site, p) in &u.modules {
        let (ma, mb) = masks.get(site).ok_or_else(|| {
            Error::protocol(format!("client {} uploaded unregistered site {site}", u.client))
        })?;
        if p.a.shape() != ma.shape() || p.b.shape() != mb.shape() {
            return Err(Error::protocol(format!(
                "client {} site {site}: upload shapes {:?}/{:?} differ from registry {:?}/{:?}",
                u.client,
                p.a.shape(),
                p.b.shape(),
                ma.shape(),
                mb.shape()
            )));
        }
    }
    Ok(())
}

fn literal(parts: &[(&Mat, f64)], mask: &BitMask) -> Mat {
    let (r, c) = mask.shape();
    let mut sum = Mat::zeros(r, c);
    for &(m, w) in parts {
        sum.add_scaled(m, w);
    }
    crate::adapters::apply_mask(&mut sum, mask);
    sum
}

fn overlap(parts: &[(&Mat, f64, &BitMask)], mask: &BitMask, previous: &Mat) -> Mat {
    let (r, c) = mask.shape();
    let mut out = Mat::zeros(r, c);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !mask.get_flat(i) {
            continue;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for &(m, w, mk) in parts {
            if mk.get_flat(i) {
                num += w * m.data()[i];
                den += w;
            }
        }
        *v = if den > 0.0 { num / den } else { previous.data()[i] };
    }
    out
}

/// Personalized aggregation for every uploader.
///
/// Uploads are visited in ascending client id order whatever order they are
/// passed in, so the summation order is fixed.
pub fn aggregate(
    uploads: &[Upload],
    gamma: &[f64],
    registry: &MaskRegistry,
    mode: AggregationMode,
) -> Result<Dispatch> {
    if uploads.len() != gamma.len() {
        return Err(Error::protocol(format!(
            "{} uploads but {} weights",
            uploads.len(),
            gamma.len()
        )));
    }
    if uploads.is_empty() {
        return Ok(Dispatch::new());
    }
    let total: f64 = gamma.iter().sum();
    if (total - 1.0).abs() > 1e-12 || gamma.iter().any(|g| !(*g >= 0.0)) {
        return Err(Error::protocol(format!("weights sum to {total}, expected 1")));
    }
    let mut order: Vec<usize> = (0..uploads.len()).collect();
    order.sort_by_key(|&i| uploads[i].client);
    for w in order.windows(2) {
        if uploads[w[0]].client == uploads[w[1]].client {
            return Err(Error::protocol(format!(
                "client {} uploaded twice in one round",
                uploads[w[0]].client
            )));
        }
    }
    let mut masks = Vec::with_capacity(order.len());
    for &i in &order {
        let u = &uploads[i];
        let m = registry.get(&u.client).ok_or_else(|| {
            Error::protocol(format!("client {} uploaded before registering masks", u.client))
        })?;
        check_upload(u, m)?;
        masks.push(m);
    }
    let first = &uploads[order[0]];
    for &i in &order[1..] {
        for (site, p) in &uploads[i].modules {
            let f = first.modules.get(site).ok_or_else(|| {
                Error::protocol(format!("site {site} missing from client {}", first.client))
            })?;
            if f.a.shape() != p.a.shape() || f.b.shape() != p.b.shape() {
                return Err(Error::protocol(format!(
                    "site {site}: uploads of clients {} and {} differ in dense shape",
                    first.client, uploads[i].client
                )));
            }
        }
    }

    let mut out = Dispatch::new();
    for (ri, &r) in order.iter().enumerate() {
        let recipient = &uploads[r];
        let own = masks[ri];
        let mut modules = BTreeMap::new();
        for (site, prev) in &recipient.modules {
            let (ma, mb) = &own[site];
            let pair = match mode {
                AggregationMode::Literal => {
                    let pa: Vec<_> = order
                        .iter()
                        .map(|&j| (&uploads[j].modules[site].a, gamma[j]))
                        .collect();
                    let pb: Vec<_> = order
                        .iter()
                        .map(|&j| (&uploads[j].modules[site].b, gamma[j]))
                        .collect();
                    PairUpload {
                        a: literal(&pa, ma),
                        b: literal(&pb, mb),
                    }
                }
                AggregationMode::OverlapNormalized => {
                    let pa: Vec<_> = order
                        .iter()
                        .zip(&masks)
                        .map(|(&j, m)| (&uploads[j].modules[site].a, gamma[j], &m[site].0))
                        .collect();
                    let pb: Vec<_> = order
                        .iter()
                        .zip(&masks)
                        .map(|(&j, m)| (&uploads[j].modules[site].b, gamma[j], &m[site].1))
                        .collect();
                    PairUpload {
                        a: overlap(&pa, ma, &prev.a),
                        b: overlap(&pb, mb, &prev.b),
                    }
                }
            };
            modules.insert(*site, pair);
        }
        out.insert(recipient.client, modules);
    }
    Ok(out)
}
