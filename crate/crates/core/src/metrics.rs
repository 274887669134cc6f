//! Perplexity, mask similarity, and the run's text artifacts.
//!
//! CSV floats use Rust's shortest round-trip formatting, so equal values
//! always render to equal bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::adapters::AdapterSet;
use crate::backbone::{Backbone, Projection, Site};
use crate::data::{LossScope, TokenSeq};
use crate::error::{Error, Result};
use crate::federation::{MaskRegistry, SiteMasks};
use crate::numerics::{hamming_similarity, BitMask, Mat};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub client: usize,
    pub round: usize,
    pub nll_sum: f64,
    pub tokens: usize,
    pub perplexity: f64,
}

/// `exp(Σ NLL / Σ predicted tokens)` over an eval split; `None` when the split is empty.
pub fn perplexity(
    backbone: &Backbone,
    adapters: &AdapterSet,
    eval: &[&TokenSeq],
    scope: LossScope,
    client: usize,
    round: usize,
) -> Result<Option<EvalReport>> {
    if eval.is_empty() {
        return Ok(None);
    }
    let mut nll_sum = 0.0;
    let mut tokens = 0;
    for seq in eval {
        let (s, n) = backbone.nll(adapters, &seq.ids, seq.first_target(scope))?;
        nll_sum += s;
        tokens += n;
    }
    if tokens == 0 {
        return Ok(None);
    }
    let ppl = (nll_sum / tokens as f64).exp();
    if !(ppl.is_finite() && ppl > 0.0) {
        return Err(Error::numeric(format!("client {client}: perplexity {ppl}")));
    }
    Ok(Some(EvalReport {
        client,
        round,
        nll_sum,
        tokens,
        perplexity: ppl,
    }))
}

/// Unweighted mean of per-client perplexities.
pub fn mean_perplexity(reports: &[EvalReport]) -> Option<f64> {
    if reports.is_empty() {
        None
    } else {
        Some(reports.iter().map(|r| r.perplexity).sum::<f64>() / reports.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteSelector {
    /// Average over every registered site.
    All,
    One(Site),
}

impl SiteSelector {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(SiteSelector::All);
        }
        let rest = s
            .strip_prefix('l')
            .ok_or_else(|| Error::config(format!("site '{s}' is not of the form l<layer><q|k|v>")))?;
        let split = rest.len().saturating_sub(1);
        let layer = rest[..split]
            .parse()
            .map_err(|_| Error::config(format!("bad layer in site '{s}'")))?;
        let proj = Projection::parse(&rest[split..])?;
        Ok(SiteSelector::One(Site { layer, proj }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub clients: Vec<usize>,
    pub values: Mat,
}

fn pair_similarity(a: &SiteMasks, b: &SiteMasks, selector: SiteSelector) -> Result<f64> {
    let one = |site: &Site| -> Result<f64> {
        let (xa, xb) = a
            .get(site)
            .ok_or_else(|| Error::config(format!("site {site} not registered")))?;
        let (ya, yb) = b
            .get(site)
            .ok_or_else(|| Error::config(format!("site {site} not registered")))?;
        Ok(0.5 * (hamming_similarity(xa, ya)? + hamming_similarity(xb, yb)?))
    };
    match selector {
        SiteSelector::One(site) => one(&site),
        SiteSelector::All => {
            let mut sum = 0.0;
            for site in a.keys() {
                sum += one(site)?;
            }
            Ok(sum / a.len().max(1) as f64)
        }
    }
}

/// Pairwise mask similarity of `clients`, `m_a` and `m_b` averaged.
pub fn similarity_matrix(
    registry: &MaskRegistry,
    clients: &[usize],
    selector: SiteSelector,
) -> Result<SimilarityMatrix> {
    if clients.len() < 2 {
        return Err(Error::config("similarity needs at least two clients"));
    }
    let masks: Vec<&SiteMasks> = clients
        .iter()
        .map(|c| {
            registry
                .get(c)
                .ok_or_else(|| Error::config(format!("client {c} has no registered masks")))
        })
        .collect::<Result<_>>()?;
    let n = clients.len();
    let mut values = Mat::zeros(n, n);
    for i in 0..n {
        values.set(i, i, 1.0);
        for j in i + 1..n {
            let s = pair_similarity(masks[i], masks[j], selector)?;
            values.set(i, j, s);
            values.set(j, i, s);
        }
    }
    Ok(SimilarityMatrix {
        clients: clients.to_vec(),
        values,
    })
}

impl SimilarityMatrix {
    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.clients.len();
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.values.get(i, j))
            .collect()
    }

    /// Population standard deviation of the off-diagonal entries.
    pub fn off_diagonal_std(&self) -> f64 {
        let v = self.off_diagonal();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("client_id");
        for c in &self.clients {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (i, c) in self.clients.iter().enumerate() {
            let _ = write!(s, "{c}");
            for j in 0..self.clients.len() {
                let _ = write!(s, ",{:?}", self.values.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

/// One participant's line of the per-round report.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientRoundRow {
    pub round: usize,
    pub client: usize,
    pub mean_train_loss: Option<f64>,
    pub eval_ppl: Option<f64>,
}

/// One line of the loss curve.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub mean_train_loss: Option<f64>,
    pub mean_eval_ppl: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

pub const LOSS_CURVE_HEADER: &str = "round,mean_train_loss,mean_eval_ppl";
pub const ROUNDS_HEADER: &str = "round,client_id,mean_train_loss,eval_ppl";

pub fn loss_curve_csv(rows: &[RoundSummary]) -> String {
    let mut s = format!("{LOSS_CURVE_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.round, opt(r.mean_train_loss), opt(r.mean_eval_ppl));
    }
    s
}

pub fn rounds_csv(rows: &[ClientRoundRow]) -> String {
    let mut s = format!("{ROUNDS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.round,
            r.client,
            opt(r.mean_train_loss),
            opt(r.eval_ppl)
        );
    }
    s
}

/// `client_id,eval_ppl` for every client with an eval split.
pub fn final_eval_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("client_id,eval_ppl\n");
    for r in reports {
        let _ = writeln!(s, "{},{:?}", r.client, r.perplexity);
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const MASK_MAGIC: &str = "fedprune-masks v1";

fn push_mask(s: &mut String, tag: &str, m: &BitMask) {
    let _ = writeln!(s, "{tag} {} {}", m.rows(), m.cols());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            s.push(if m.get(r, c) { '1' } else { '0' });
        }
        s.push('\n');
    }
}

/// Text form of one client's masks: a header, then per site
/// `site <layer> <q|k|v>` followed by the `a` and `b` masks as rows of 0/1.
pub fn masks_to_string(client: usize, masks: &SiteMasks) -> String {
    let mut s = format!("{MASK_MAGIC}\nclient {client}\n");
    for (site, (a, b)) in masks {
        let _ = writeln!(s, "site {} {}", site.layer, site.proj.as_str());
        push_mask(&mut s, "a", a);
        push_mask(&mut s, "b", b);
    }
    s.push_str("end\n");
    s
}

pub fn masks_from_str(text: &str) -> Result<(usize, SiteMasks)> {
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, &str)> {
        lines
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| Error::data(format!("mask file ended early, expected {what}")))
    };
    let (_, magic) = next("header")?;
    if magic != MASK_MAGIC {
        return Err(Error::data(format!("not a mask file: '{magic}'")));
    }
    let (n, line) = next("client line")?;
    let client = line
        .strip_prefix("client ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::data(format!("mask file line {n}: bad client line")))?;
    let mut masks = SiteMasks::new();
    loop {
        let (n, line) = next("site or end")?;
        if line == "end" {
            break;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 || f[0] != "site" {
            return Err(Error::data(format!("mask file line {n}: expected site line")));
        }
        let layer = f[1]
            .parse()
            .map_err(|_| Error::data(format!("mask file line {n}: bad layer")))?;
        let site = Site {
            layer,
            proj: Projection::parse(f[2])?,
        };
        let mut read = |tag: &str| -> Result<BitMask> {
            let (n, line) = next(tag)?;
            let f: Vec<&str> = line.split_whitespace().collect();
            let dims = (f.len() == 3 && f[0] == tag)
                .then(|| Some((f[1].parse::<usize>().ok()?, f[2].parse::<usize>().ok()?)))
                .flatten()
                .ok_or_else(|| Error::data(format!("mask file line {n}: expected '{tag} rows cols'")))?;
            let mut bits = Vec::with_capacity(dims.0 * dims.1);
            for _ in 0..dims.0 {
                let (n, row) = next("mask row")?;
                if row.len() != dims.1 {
                    return Err(Error::data(format!("mask file line {n}: row length {}", row.len())));
                }
                for ch in row.chars() {
                    match ch {
                        '0' => bits.push(false),
                        '1' => bits.push(true),
                        _ => return Err(Error::data(format!("mask file line {n}: bad bit '{ch}'"))),
                    }
                }
            }
            BitMask::from_bools(dims.0, dims.1, &bits)
        };
        let a = read("a")?;
        let b = read("b")?;
        masks.insert(site, (a, b));
    }
    Ok((client, masks))
}

pub fn mask_file_name(client: usize) -> String {
    format!("client{client:04}.masks")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn site(layer: usize, proj: Projection) -> Site {
        Site { layer, proj }
    }

    fn registry(entries: Vec<(usize, BitMask)>) -> MaskRegistry {
        entries
            .into_iter()
            .map(|(c, m)| {
                let b = m.clone();
                (c, [(site(0, Projection::Query), (m, b))].into_iter().collect())
            })
            .collect()
    }

    #[test]
    fn matches_direct_nll_sum() {
        let cfg = BackboneConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq: 16,
            init_seed: 4,
        };
        let bb = Backbone::random(cfg).unwrap();
        let seqs = vec![
            TokenSeq {
                ids: vec![1, 2, 3, 4, 5],
                response_start: 3,
            },
            TokenSeq {
                ids: vec![7, 7, 8],
                response_start: 1,
            },
        ];
        let refs: Vec<&TokenSeq> = seqs.iter().collect();
        let adapters = AdapterSet::new();
        let r = perplexity(&bb, &adapters, &refs, LossScope::Full, 0, 0)
            .unwrap()
            .unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for s in &seqs {
            let (_, tape) = bb.forward(&adapters, &s.ids).unwrap();
            for v in tape.per_token_nll() {
                total += v;
                count += 1;
            }
        }
        assert_eq!(r.tokens, count);
        assert!((r.perplexity - (total / count as f64).exp()).abs() < 1e-9);
        assert!(perplexity(&bb, &adapters, &[], LossScope::Full, 0, 0)
            .unwrap()
            .is_none());
    }

    #[test]
    fn duplicate_and_complementary_masks() {
        let m = BitMask::from_indices(4, 4, &[0, 3, 5, 9, 10]);
        let dup = registry(vec![(0, m.clone()), (1, m.clone()), (2, m.clone())]);
        let s = similarity_matrix(&dup, &[0, 1, 2], SiteSelector::All).unwrap();
        assert!(s.values.data().iter().all(|&v| v == 1.0));

        let comp = registry(vec![(0, m.clone()), (1, m.not())]);
        let s = similarity_matrix(&comp, &[0, 1], SiteSelector::All).unwrap();
        assert_eq!(s.values.get(0, 1), 0.0);
        assert_eq!(s.values.get(1, 0), 0.0);
        assert_eq!(s.values.get(1, 1), 1.0);
        assert!(similarity_matrix(&comp, &[0, 5], SiteSelector::All).is_err());
    }

    #[test]
    fn csv_shapes() {
        let m = BitMask::from_indices(2, 2, &[0]);
        let reg = registry(vec![(3, m.clone()), (8, m)]);
        let s = similarity_matrix(&reg, &[3, 8], SiteSelector::parse("l0q").unwrap()).unwrap();
        assert_eq!(s.to_csv(), "client_id,3,8\n3,1.0,1.0\n8,1.0,1.0\n");
        let curve = loss_curve_csv(&[RoundSummary {
            round: 0,
            mean_train_loss: Some(1.5),
            mean_eval_ppl: None,
        }]);
        assert_eq!(curve, "round,mean_train_loss,mean_eval_ppl\n0,1.5,\n");
    }

    #[test]
    fn mask_file_round_trip() {
        let mut masks = SiteMasks::new();
        masks.insert(
            site(1, Projection::Value),
            (BitMask::from_indices(3, 2, &[1, 4]), BitMask::from_indices(2, 3, &[0, 5])),
        );
        masks.insert(
            site(0, Projection::Key),
            (BitMask::ones(3, 2), BitMask::zeros(2, 3)),
        );
        let text = masks_to_string(12, &masks);
        let (c, back) = masks_from_str(&text).unwrap();
        assert_eq!(c, 12);
        assert_eq!(back, masks);
        assert!(masks_from_str("fedprune-masks v1\nclient 1\nsite 0 q\na 1 2\n01\n").is_err());
    }

    #[test]
    fn site_selector_parse() {
        assert_eq!(SiteSelector::parse("all").unwrap(), SiteSelector::All);
        assert_eq!(
            SiteSelector::parse("l12v").unwrap(),
            SiteSelector::One(site(12, Projection::Value))
        );
        assert!(SiteSelector::parse("q0").is_err());
    }
}
