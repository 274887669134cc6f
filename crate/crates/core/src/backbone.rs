//! Frozen decoder-only transformer with LoRA injection at the Q/K/V projections.
//!
//! Pre-LN blocks: `x += Attn(LN1(x))`, `x += MLP(LN2(x))`, then `LN_f` and an
//! untied output head. Projection weights are stored `out × in`; for a row of
//! activations `h` a projection computes `h Wᵀ + (h Bᵀ) Aᵀ`, i.e. the column
//! form `W x + A B x` applied token by token.
//!
//! Only adapter gradients are produced by [`Backbone::backward_adapters`];
//! backbone parameters never receive gradients.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use crate::adapters::{AdapterSet, LoraPair};
use crate::error::{Error, Result};
use crate::numerics::{gemm_nn, gemm_nt, gemm_tn, sample_gaussian, Mat, RngStream};

const LN_EPS: f64 = 1e-5;
const BACKBONE_STREAM: u64 = 0xB0;
pub const BACKBONE_MAGIC: &str = "fedprune-backbone v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "q" | "query" => Ok(Projection::Query),
            "k" | "key" => Ok(Projection::Key),
            "v" | "value" => Ok(Projection::Value),
            other => Err(Error::config(format!("unknown projection '{other}'"))),
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Adapter injection site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Site {
    pub layer: usize,
    pub proj: Projection,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}{}", self.layer, self.proj.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: crate::data::VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq: 128,
            init_seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("backbone {name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Every Q/K/V site, in site order.
    pub fn sites(&self) -> Vec<Site> {
        (0..self.n_layers)
            .flat_map(|layer| Projection::ALL.map(|proj| Site { layer, proj }))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    ln1_g: Vec<f64>,
    ln1_b: Vec<f64>,
    /// Q, K, V projections, each `d × d` (out × in).
    qkv: [Mat; 3],
    wo: Mat,
    ln2_g: Vec<f64>,
    ln2_b: Vec<f64>,
    /// `d_ff × d`
    w1: Mat,
    b1: Vec<f64>,
    /// `d × d_ff`
    w2: Mat,
    b2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    cfg: BackboneConfig,
    tok_emb: Mat,
    pos_emb: Mat,
    layers: Vec<Layer>,
    lnf_g: Vec<f64>,
    lnf_b: Vec<f64>,
    head: Mat,
}

/// Per-site adapter gradients with respect to the dense `A` and `B` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrad {
    pub a: Mat,
    pub b: Mat,
}

pub type AdapterGrads = BTreeMap<Site, PairGrad>;

struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    h1: Mat,
    /// `h1 · Bᵀ` per projection when an adapter is present.
    u: [Option<Mat>; 3],
    q: Mat,
    k: Mat,
    v: Mat,
    /// Softmax rows per head, `T × T`, causal.
    probs: Vec<Mat>,
    ln2: LnCache,
    pre: Mat,
}

/// Activations kept by [`Backbone::forward`] for one reverse pass.
///
/// Consumed by value in [`Backbone::backward_adapters`], so a tape cannot be
/// replayed.
pub struct ForwardTape {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Softmax over the vocabulary at every position, `T × V`.
    probs: Mat,
    tokens: Vec<u32>,
    first_target: usize,
    nll: Vec<f64>,
    adapter_fingerprint: u64,
}

impl ForwardTape {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Negative log-likelihood of each counted prediction, in position order.
    pub fn per_token_nll(&self) -> &[f64] {
        &self.nll
    }

    pub fn nll_sum(&self) -> f64 {
        self.nll.iter().sum()
    }

    pub fn predicted(&self) -> usize {
        self.nll.len()
    }

    pub fn loss(&self) -> f64 {
        self.nll_sum() / self.nll.len() as f64
    }
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> (Mat, LnCache) {
    let (t, d) = x.shape();
    let mut out = Mat::zeros(t, d);
    let mut xhat = Mat::zeros(t, d);
    let mut inv_std = Vec::with_capacity(t);
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for c in 0..d {
            xh[c] = (row[c] - mean) * is;
        }
        let o = out.row_mut(r);
        for c in 0..d {
            o[c] = g[c] * xh[c] + b[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn layer_norm_backward(cache: &LnCache, g: &[f64], dy: &Mat) -> Mat {
    let (t, d) = dy.shape();
    let mut dx = Mat::zeros(t, d);
    let mut dxh = vec![0.0; d];
    for r in 0..t {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..d {
            dxh[c] = dyr[c] * g[c];
        }
        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
        let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = is * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_bias(m: &mut Mat, b: &[f64]) {
    for r in 0..m.rows() {
        for (v, bb) in m.row_mut(r).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

/// FNV-1a over the bit patterns of a sequence of matrices.
fn fingerprint<'a>(mats: impl IntoIterator<Item = &'a Mat>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for m in mats {
        for &v in [m.rows() as u64, m.cols() as u64].iter() {
            h = (h ^ v).wrapping_mul(0x0100_0000_01b3);
        }
        for v in m.data() {
            h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

fn adapters_fingerprint(adapters: &AdapterSet) -> u64 {
    fingerprint(adapters.values().flat_map(|p| [&p.a, &p.b]))
}

impl Backbone {
    /// Seeded random backbone: every weight matrix and both embeddings are
    /// drawn i.i.d. `N(0, 1/d_model)`; layer-norm gains are 1, biases 0.
    pub fn random(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::derive(cfg.init_seed, &[BACKBONE_STREAM]);
        let d = cfg.d_model;
        let var = 1.0 / d as f64;
        let tok_emb = sample_gaussian(&mut rng, cfg.vocab_size, d, var);
        let pos_emb = sample_gaussian(&mut rng, cfg.max_seq, d, var);
        let layers = (0..cfg.n_layers)
            .map(|_| Layer {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                qkv: [
                    sample_gaussian(&mut rng, d, d, var),
                    sample_gaussian(&mut rng, d, d, var),
                    sample_gaussian(&mut rng, d, d, var),
                ],
                wo: sample_gaussian(&mut rng, d, d, var),
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                w1: sample_gaussian(&mut rng, cfg.d_ff, d, var),
                b1: vec![0.0; cfg.d_ff],
                w2: sample_gaussian(&mut rng, d, cfg.d_ff, var),
                b2: vec![0.0; d],
            })
            .collect();
        let head = sample_gaussian(&mut rng, cfg.vocab_size, d, var);
        Ok(Backbone {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: vec![1.0; d],
            lnf_b: vec![0.0; d],
            head,
            cfg,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Hash of every parameter bit pattern; unchanged for the life of the backbone.
    pub fn fingerprint(&self) -> u64 {
        let vecs: Vec<Mat> = self
            .layers
            .iter()
            .flat_map(|l| [&l.ln1_g, &l.ln1_b, &l.ln2_g, &l.ln2_b, &l.b1, &l.b2])
            .chain([&self.lnf_g, &self.lnf_b])
            .map(|v| Mat::from_vec(1, v.len(), v.clone()).expect("finite"))
            .collect();
        let mats = [&self.tok_emb, &self.pos_emb, &self.head]
            .into_iter()
            .chain(self.layers.iter().flat_map(|l| {
                [&l.qkv[0], &l.qkv[1], &l.qkv[2], &l.wo, &l.w1, &l.w2]
            }))
            .chain(vecs.iter());
        fingerprint(mats)
    }

    fn check_adapters(&self, adapters: &AdapterSet) -> Result<()> {
        let d = self.cfg.d_model;
        for (site, pair) in adapters {
            if site.layer >= self.cfg.n_layers {
                return Err(Error::config(format!("adapter site {site} beyond backbone depth")));
            }
            if pair.a.rows() != d || pair.b.cols() != d || pair.a.cols() != pair.b.rows() {
                return Err(Error::config(format!(
                    "adapter {site} shapes {:?}/{:?} incompatible with d_model {d}",
                    pair.a.shape(),
                    pair.b.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() < 2 {
            return Err(Error::data(format!(
                "sequence of length {} has no predicted positions",
                tokens.len()
            )));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::data(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::data(format!(
                "token id {t} out of vocabulary ({})",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Causal next-token cross-entropy over every position.
    pub fn forward(&self, adapters: &AdapterSet, tokens: &[u32]) -> Result<(f64, ForwardTape)> {
        self.forward_from(adapters, tokens, 1)
    }

    /// Like [`Backbone::forward`] but only targets at index `>= first_target`
    /// contribute to the loss (`first_target` is clamped to at least 1).
    pub fn forward_from(
        &self,
        adapters: &AdapterSet,
        tokens: &[u32],
        first_target: usize,
    ) -> Result<(f64, ForwardTape)> {
        self.check_tokens(tokens)?;
        self.check_adapters(adapters)?;
        let first_target = first_target.max(1);
        if first_target >= tokens.len() {
            return Err(Error::data("loss window contains no predicted positions"));
        }
        let cfg = &self.cfg;
        let t = tokens.len();
        let d = cfg.d_model;
        let nh = cfg.n_heads;
        let hd = d / nh;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = Mat::zeros(t, d);
        for (p, &tok) in tokens.iter().enumerate() {
            let e = self.tok_emb.row(tok as usize);
            let pe = self.pos_emb.row(p);
            for (o, (a, b)) in x.row_mut(p).iter_mut().zip(e.iter().zip(pe)) {
                *o = a + b;
            }
        }

        let mut caches = Vec::with_capacity(cfg.n_layers);
        for (li, layer) in self.layers.iter().enumerate() {
            let (h1, ln1) = layer_norm(&x, &layer.ln1_g, &layer.ln1_b);
            let mut outs: [Option<Mat>; 3] = [None, None, None];
            let mut us: [Option<Mat>; 3] = [None, None, None];
            for proj in Projection::ALL {
                let i = proj.index();
                let mut o = gemm_nt(&h1, &layer.qkv[i]);
                if let Some(pair) = adapters.get(&Site { layer: li, proj }) {
                    let u = gemm_nt(&h1, &pair.b);
                    o.add_scaled(&gemm_nt(&u, &pair.a), 1.0);
                    us[i] = Some(u);
                }
                outs[i] = Some(o);
            }
            let [q, k, v] = outs.map(|o| o.expect("projection computed"));

            let mut y = Mat::zeros(t, d);
            let mut probs = Vec::with_capacity(nh);
            for h in 0..nh {
                let off = h * hd;
                let mut p = Mat::zeros(t, t);
                for i in 0..t {
                    let qi = &q.row(i)[off..off + hd];
                    let row = p.row_mut(i);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &k.row(j)[off..off + hd];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        row[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut().take(i + 1) {
                        *r = (*r - max).exp();
                        z += *r;
                    }
                    for r in row.iter_mut().take(i + 1) {
                        *r /= z;
                    }
                }
                for i in 0..t {
                    let pr = p.row(i);
                    let yr = &mut y.row_mut(i)[off..off + hd];
                    for (j, &pij) in pr.iter().enumerate().take(i + 1) {
                        let vj = &v.row(j)[off..off + hd];
                        for (o, vv) in yr.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
                probs.push(p);
            }
            let attn = gemm_nt(&y, &layer.wo);
            x.add_scaled(&attn, 1.0);

            let (h2, ln2) = layer_norm(&x, &layer.ln2_g, &layer.ln2_b);
            let mut pre = gemm_nt(&h2, &layer.w1);
            add_bias(&mut pre, &layer.b1);
            let mut act = pre.clone();
            act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
            let mut mlp = gemm_nt(&act, &layer.w2);
            add_bias(&mut mlp, &layer.b2);
            x.add_scaled(&mlp, 1.0);

            caches.push(LayerCache {
                ln1,
                h1,
                u: us,
                q,
                k,
                v,
                probs,
                ln2,
                pre,
            });
        }

        let (hf, lnf) = layer_norm(&x, &self.lnf_g, &self.lnf_b);
        let mut probs = gemm_nt(&hf, &self.head);
        let mut nll = Vec::with_capacity(t - first_target);
        for p in 0..t {
            let row = probs.row_mut(p);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let counted = p + 1 >= first_target && p + 1 < t;
            let target_shifted = if counted { row[tokens[p + 1] as usize] - max } else { 0.0 };
            let mut z = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                z += *r;
            }
            for r in row.iter_mut() {
                *r /= z;
            }
            if counted {
                nll.push(z.ln() - target_shifted);
            }
        }
        let loss = nll.iter().sum::<f64>() / nll.len() as f64;
        if !loss.is_finite() {
            return Err(Error::numeric("non-finite loss"));
        }
        let tape = ForwardTape {
            layers: caches,
            lnf,
            probs,
            tokens: tokens.to_vec(),
            first_target,
            nll,
            adapter_fingerprint: adapters_fingerprint(adapters),
        };
        Ok((loss, tape))
    }

    /// Loss only, discarding the tape.
    pub fn loss(&self, adapters: &AdapterSet, tokens: &[u32]) -> Result<f64> {
        Ok(self.forward(adapters, tokens)?.0)
    }

    /// Reverse pass of the mean loss recorded in `tape` with respect to every
    /// adapter's dense `A` and `B`. Pruned coordinates report their gradient as
    /// computed; callers mask when updating.
    pub fn backward_adapters(&self, tape: ForwardTape, adapters: &AdapterSet) -> Result<AdapterGrads> {
        if tape.adapter_fingerprint != adapters_fingerprint(adapters) {
            return Err(Error::logic(
                "forward tape was produced with different adapter values",
            ));
        }
        let cfg = &self.cfg;
        let t = tape.tokens.len();
        let d = cfg.d_model;
        let nh = cfg.n_heads;
        let hd = d / nh;
        let scale = 1.0 / (hd as f64).sqrt();
        let count = tape.nll.len() as f64;

        let mut dlogits = tape.probs;
        for p in 0..t {
            let row = dlogits.row_mut(p);
            if p + 1 >= tape.first_target && p + 1 < t {
                row[tape.tokens[p + 1] as usize] -= 1.0;
                row.iter_mut().for_each(|v| *v /= count);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let dhf = gemm_nn(&dlogits, &self.head);
        let mut dx = layer_norm_backward(&tape.lnf, &self.lnf_g, &dhf);

        let mut grads = AdapterGrads::new();
        for (li, (layer, cache)) in self.layers.iter().zip(tape.layers).enumerate().rev() {
            // MLP block
            let mut dpre = gemm_nn(&dx, &layer.w2);
            for (g, &p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
                *g *= gelu_grad(p);
            }
            let dh2 = gemm_nn(&dpre, &layer.w1);
            dx.add_scaled(&layer_norm_backward(&cache.ln2, &layer.ln2_g, &dh2), 1.0);

            // attention block
            let dy = gemm_nn(&dx, &layer.wo);
            let mut dq = Mat::zeros(t, d);
            let mut dk = Mat::zeros(t, d);
            let mut dv = Mat::zeros(t, d);
            let mut dp = vec![0.0; t];
            for h in 0..nh {
                let off = h * hd;
                let p = &cache.probs[h];
                for i in 0..t {
                    let dyi = &dy.row(i)[off..off + hd];
                    let pr = p.row(i);
                    let mut dot = 0.0;
                    for j in 0..=i {
                        let vj = &cache.v.row(j)[off..off + hd];
                        dp[j] = dyi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                        dot += dp[j] * pr[j];
                        let dvj = &mut dv.row_mut(j)[off..off + hd];
                        for (o, g) in dvj.iter_mut().zip(dyi) {
                            *o += pr[j] * g;
                        }
                    }
                    let qi: Vec<f64> = cache.q.row(i)[off..off + hd].to_vec();
                    for j in 0..=i {
                        let ds = pr[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &cache.k.row(j)[off..off + hd];
                        let dqi = &mut dq.row_mut(i)[off..off + hd];
                        for (o, kk) in dqi.iter_mut().zip(kj) {
                            *o += ds * kk;
                        }
                        let dkj = &mut dk.row_mut(j)[off..off + hd];
                        for (o, qq) in dkj.iter_mut().zip(&qi) {
                            *o += ds * qq;
                        }
                    }
                }
            }

            let mut dh1 = Mat::zeros(t, d);
            for (proj, dproj) in Projection::ALL.into_iter().zip([dq, dk, dv]) {
                let i = proj.index();
                dh1.add_scaled(&gemm_nn(&dproj, &layer.qkv[i]), 1.0);
                let site = Site { layer: li, proj };
                if let Some(pair) = adapters.get(&site) {
                    let u = cache.u[i].as_ref().expect("adapter cache present");
                    let grad_a = gemm_tn(&dproj, u);
                    let du = gemm_nn(&dproj, &pair.a);
                    let grad_b = gemm_tn(&du, &cache.h1);
                    dh1.add_scaled(&gemm_nn(&du, &pair.b), 1.0);
                    grads.insert(site, PairGrad { a: grad_a, b: grad_b });
                }
            }
            dx.add_scaled(&layer_norm_backward(&cache.ln1, &layer.ln1_g, &dh1), 1.0);
        }
        for g in grads.values() {
            g.a.ensure_finite("adapter gradient")?;
            g.b.ensure_finite("adapter gradient")?;
        }
        Ok(grads)
    }

    /// Mean loss and mean adapter gradient over a batch of
    /// `(tokens, first_target)` sequences, accumulated in batch order.
    pub fn mean_gradient(
        &self,
        adapters: &AdapterSet,
        batch: &[(&[u32], usize)],
    ) -> Result<(f64, AdapterGrads)> {
        if batch.is_empty() {
            return Err(Error::data("gradient requested on an empty batch"));
        }
        let mut total_loss = 0.0;
        let mut acc: Option<AdapterGrads> = None;
        for &(tokens, first_target) in batch {
            let (loss, tape) = self.forward_from(adapters, tokens, first_target)?;
            total_loss += loss;
            let g = self.backward_adapters(tape, adapters)?;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(sum) => {
                    for (site, pg) in g {
                        let s = sum.get_mut(&site).expect("same sites every example");
                        s.a.add_scaled(&pg.a, 1.0);
                        s.b.add_scaled(&pg.b, 1.0);
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let mut grads = acc.expect("non-empty batch");
        for pg in grads.values_mut() {
            pg.a.scale(1.0 / n);
            pg.b.scale(1.0 / n);
        }
        Ok((total_loss / n, grads))
    }

    /// Sum of NLL and number of counted predictions for one sequence.
    pub fn nll(&self, adapters: &AdapterSet, tokens: &[u32], first_target: usize) -> Result<(f64, usize)> {
        let (_, tape) = self.forward_from(adapters, tokens, first_target)?;
        Ok((tape.nll_sum(), tape.predicted()))
    }

    /// Adapters of the given dense rank at every Q/K/V site, zeroed, all-ones masks.
    pub fn empty_adapters(&self, rank: usize, sparsity: f64, dense_rank: usize) -> AdapterSet {
        self.cfg
            .sites()
            .into_iter()
            .map(|site| {
                (
                    site,
                    LoraPair::with_dense_rank(site, self.cfg.d_model, rank, sparsity, dense_rank),
                )
            })
            .collect()
    }

    /// Text checkpoint: magic line, config line, then named tensors
    /// (`tensor <name> <rows> <cols>` followed by one line of values per row).
    pub fn to_checkpoint_string(&self) -> String {
        let c = &self.cfg;
        let mut s = String::new();
        let _ = writeln!(s, "{BACKBONE_MAGIC}");
        let _ = writeln!(
            s,
            "config vocab_size={} d_model={} n_layers={} n_heads={} d_ff={} max_seq={} init_seed={}",
            c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_seq, c.init_seed
        );
        let vec_mat = |v: &Vec<f64>| Mat::from_vec(1, v.len(), v.clone()).expect("finite");
        let mut put = |name: String, m: &Mat| {
            let _ = writeln!(s, "tensor {name} {} {}", m.rows(), m.cols());
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        };
        put("tok_emb".into(), &self.tok_emb);
        put("pos_emb".into(), &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            put(format!("l{i}.ln1_g"), &vec_mat(&l.ln1_g));
            put(format!("l{i}.ln1_b"), &vec_mat(&l.ln1_b));
            put(format!("l{i}.wq"), &l.qkv[0]);
            put(format!("l{i}.wk"), &l.qkv[1]);
            put(format!("l{i}.wv"), &l.qkv[2]);
            put(format!("l{i}.wo"), &l.wo);
            put(format!("l{i}.ln2_g"), &vec_mat(&l.ln2_g));
            put(format!("l{i}.ln2_b"), &vec_mat(&l.ln2_b));
            put(format!("l{i}.w1"), &l.w1);
            put(format!("l{i}.b1"), &vec_mat(&l.b1));
            put(format!("l{i}.w2"), &l.w2);
            put(format!("l{i}.b2"), &vec_mat(&l.b2));
        }
        put("lnf_g".into(), &vec_mat(&self.lnf_g));
        put("lnf_b".into(), &vec_mat(&self.lnf_b));
        put("head".into(), &self.head);
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let bad = |n: usize, what: &str| Error::data(format!("backbone checkpoint line {n}: {what}"));
        match lines.next() {
            Some((_, l)) if l.trim() == BACKBONE_MAGIC => {}
            _ => return Err(bad(1, "missing header")),
        }
        let (n, cfg_line) = lines.next().ok_or_else(|| bad(2, "missing config"))?;
        let mut kv = BTreeMap::new();
        for tok in cfg_line.split_whitespace().skip(1) {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(n, "bad config entry"))?;
            kv.insert(k, v);
        }
        let get = |k: &str| -> Result<u64> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(n, &format!("missing {k}")))
        };
        let cfg = BackboneConfig {
            vocab_size: get("vocab_size")? as usize,
            d_model: get("d_model")? as usize,
            n_layers: get("n_layers")? as usize,
            n_heads: get("n_heads")? as usize,
            d_ff: get("d_ff")? as usize,
            max_seq: get("max_seq")? as usize,
            init_seed: get("init_seed")?,
        };
        cfg.validate()?;
        let mut tensors: BTreeMap<String, Mat> = BTreeMap::new();
        while let Some((n, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "tensor" {
                return Err(bad(n, "expected tensor header"));
            }
            let rows: usize = parts[2].parse().map_err(|_| bad(n, "bad rows"))?;
            let cols: usize = parts[3].parse().map_err(|_| bad(n, "bad cols"))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (n, row) = lines.next().ok_or_else(|| bad(n, "truncated tensor"))?;
                let before = data.len();
                for v in row.split_whitespace() {
                    data.push(v.parse::<f64>().map_err(|_| bad(n, "bad float"))?);
                }
                if data.len() - before != cols {
                    return Err(bad(n, "wrong row width"));
                }
            }
            tensors.insert(parts[1].to_string(), Mat::from_vec(rows, cols, data)?);
        }
        let mut take = |name: &str, rows: usize, cols: usize| -> Result<Mat> {
            let m = tensors
                .remove(name)
                .ok_or_else(|| Error::data(format!("backbone checkpoint missing tensor {name}")))?;
            if m.shape() != (rows, cols) {
                return Err(Error::data(format!(
                    "backbone tensor {name} has shape {:?}, expected {:?}",
                    m.shape(),
                    (rows, cols)
                )));
            }
            Ok(m)
        };
        let d = cfg.d_model;
        let tok_emb = take("tok_emb", cfg.vocab_size, d)?;
        let pos_emb = take("pos_emb", cfg.max_seq, d)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let mut vec = |n: &str, len: usize| take(&format!("l{i}.{n}"), 1, len).map(Mat::into_data);
            let ln1_g = vec("ln1_g", d)?;
            let ln1_b = vec("ln1_b", d)?;
            let ln2_g = vec("ln2_g", d)?;
            let ln2_b = vec("ln2_b", d)?;
            let b1 = vec("b1", cfg.d_ff)?;
            let b2 = vec("b2", d)?;
            layers.push(Layer {
                ln1_g,
                ln1_b,
                qkv: [
                    take(&format!("l{i}.wq"), d, d)?,
                    take(&format!("l{i}.wk"), d, d)?,
                    take(&format!("l{i}.wv"), d, d)?,
                ],
                wo: take(&format!("l{i}.wo"), d, d)?,
                ln2_g,
                ln2_b,
                w1: take(&format!("l{i}.w1"), cfg.d_ff, d)?,
                b1,
                w2: take(&format!("l{i}.w2"), d, cfg.d_ff)?,
                b2,
            });
        }
        let lnf_g = take("lnf_g", 1, d)?.into_data();
        let lnf_b = take("lnf_b", 1, d)?.into_data();
        let head = take("head", cfg.vocab_size, d)?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::data(format!("backbone checkpoint has unknown tensor {extra}")));
        }
        Ok(Backbone {
            cfg,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Backbone {
        Backbone::random(BackboneConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_seq: 16,
            init_seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = BackboneConfig::default();
        c.validate().unwrap();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        c.n_heads = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sites_are_qkv_per_layer() {
        let sites = BackboneConfig::default().sites();
        assert_eq!(sites.len(), 6);
        assert_eq!(sites[0], Site { layer: 0, proj: Projection::Query });
        assert_eq!(sites[5], Site { layer: 1, proj: Projection::Value });
    }

    #[test]
    fn token_errors() {
        let bb = small();
        let none = AdapterSet::new();
        assert!(matches!(bb.forward(&none, &[3]), Err(Error::Data(_))));
        assert!(matches!(bb.forward(&none, &[3, 20]), Err(Error::Data(_))));
        assert!(matches!(bb.forward(&none, &[1; 17]), Err(Error::Data(_))));
    }

    #[test]
    fn zero_b_adapters_are_invisible() {
        let bb = small();
        let toks = [1u32, 5, 7, 2, 19, 4];
        let base = bb.loss(&AdapterSet::new(), &toks).unwrap();
        let mut ad = bb.empty_adapters(2, 0.0, 2);
        let mut rng = RngStream::new(1, 1);
        for p in ad.values_mut() {
            p.init_finetune(&mut rng);
        }
        assert_eq!(bb.loss(&ad, &toks).unwrap().to_bits(), base.to_bits());
    }

    #[test]
    fn zero_b_gives_zero_grad_a() {
        let bb = small();
        let mut ad = bb.empty_adapters(2, 0.0, 2);
        let mut rng = RngStream::new(1, 1);
        for p in ad.values_mut() {
            p.init_finetune(&mut rng);
        }
        let (_, tape) = bb.forward(&ad, &[1, 2, 3, 4, 5]).unwrap();
        let g = bb.backward_adapters(tape, &ad).unwrap();
        assert_eq!(g.len(), 6);
        for pg in g.values() {
            assert_eq!(pg.a.max_abs(), 0.0);
            assert!(pg.b.max_abs() > 0.0);
        }
    }

    #[test]
    fn tape_from_other_adapters_rejected() {
        let bb = small();
        let mut ad = bb.empty_adapters(2, 0.0, 2);
        let (_, tape) = bb.forward(&ad, &[1, 2, 3]).unwrap();
        let mut rng = RngStream::new(2, 2);
        for p in ad.values_mut() {
            p.init_symmetric(&mut rng);
        }
        assert!(matches!(bb.backward_adapters(tape, &ad), Err(Error::Logic(_))));
    }

    #[test]
    fn response_window_counts() {
        let bb = small();
        let none = AdapterSet::new();
        let toks = [1u32, 2, 3, 4, 5, 6];
        let (_, full) = bb.forward(&none, &toks).unwrap();
        let (_, tail) = bb.forward_from(&none, &toks, 4).unwrap();
        assert_eq!(full.predicted(), 5);
        assert_eq!(tail.predicted(), 2);
        assert_eq!(tail.per_token_nll(), &full.per_token_nll()[3..]);
        assert!(bb.forward_from(&none, &toks, 6).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let bb = small();
        let back = Backbone::from_checkpoint_str(&bb.to_checkpoint_string()).unwrap();
        assert_eq!(back, bb);
        assert_eq!(back.fingerprint(), bb.fingerprint());
        let broken = bb.to_checkpoint_string().replace("tensor head", "tensor hed");
        assert!(Backbone::from_checkpoint_str(&broken).is_err());
    }
}
