//! LoRA pairs with element-wise masks.
//!
//! A pair at an injection site holds `A` (`d × R`) and `B` (`R × d`) where `R`
//! is the dense rank: the target rank `r` expanded by the sparsity `s` so that
//! after pruning roughly `r·d` entries per matrix remain trainable. The
//! effective update is always `(A ⊙ m_a)(B ⊙ m_b)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::backbone::Site;
use crate::error::{Error, Result};
use crate::numerics::{sample_gaussian, BitMask, Mat, RngStream};

pub const CHECKPOINT_MAGIC: &str = "fedprune-adapter";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Dense rank `round(r / (1 - s))`, at least 1. Halves round away from zero.
pub fn dense_rank(rank: usize, sparsity: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::config(format!("sparsity {sparsity} outside [0, 1)")));
    }
    if rank == 0 {
        return Err(Error::config("rank must be at least 1"));
    }
    Ok(((rank as f64 / (1.0 - sparsity)).round() as usize).max(1))
}

/// How adapters are prepared for federated tuning once masks are fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneInit {
    /// `A ~ N(0, 1/d) ⊙ m_a`, `B = 0`: the tuned model starts equal to the backbone.
    Reinit,
    /// Keep the symmetric search-time weights, masked.
    KeepSearch,
}

impl FinetuneInit {
    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneInit::Reinit => "reinit",
            FinetuneInit::KeepSearch => "keep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reinit" => Ok(FinetuneInit::Reinit),
            "keep" => Ok(FinetuneInit::KeepSearch),
            other => Err(Error::config(format!("unknown finetune init '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub site: Site,
    pub a: Mat,
    pub b: Mat,
    pub mask_a: BitMask,
    pub mask_b: BitMask,
    pub rank: usize,
    pub sparsity: f64,
    pub dense_rank: usize,
}

impl LoraPair {
    /// Zero pair with all-ones masks, `A: d × R`, `B: R × d`.
    pub fn new(site: Site, d_model: usize, rank: usize, sparsity: f64) -> Result<Self> {
        let dense = dense_rank(rank, sparsity)?;
        Ok(Self::with_dense_rank(site, d_model, rank, sparsity, dense))
    }

    /// Pair whose dense rank is given directly (heterogeneous groups share one `R_max`).
    pub fn with_dense_rank(
        site: Site,
        d_model: usize,
        rank: usize,
        sparsity: f64,
        dense_rank: usize,
    ) -> Self {
        LoraPair {
            site,
            a: Mat::zeros(d_model, dense_rank),
            b: Mat::zeros(dense_rank, d_model),
            mask_a: BitMask::ones(d_model, dense_rank),
            mask_b: BitMask::ones(dense_rank, d_model),
            rank,
            sparsity,
            dense_rank,
        }
    }

    pub fn d_model(&self) -> usize {
        self.a.rows()
    }

    /// Entries kept per matrix once search is complete: `round((1 - s)·d·R)`.
    pub fn target_kept(&self) -> usize {
        ((1.0 - self.sparsity) * (self.d_model() * self.dense_rank) as f64).round() as usize
    }

    pub fn trainable(&self) -> usize {
        self.mask_a.count_ones() + self.mask_b.count_ones()
    }

    /// Search-time state: `A, B ~ N(0, 1/d)` i.i.d.
    pub fn init_symmetric(&mut self, rng: &mut RngStream) {
        let d = self.d_model();
        let var = 1.0 / d as f64;
        self.a = sample_gaussian(rng, d, self.dense_rank, var);
        self.b = sample_gaussian(rng, self.dense_rank, d, var);
    }

    /// Fine-tuning start: `A ~ N(0, 1/d) ⊙ m_a`, `B = 0`, so `ΔW = 0`.
    pub fn init_finetune(&mut self, rng: &mut RngStream) {
        let d = self.d_model();
        self.a = sample_gaussian(rng, d, self.dense_rank, 1.0 / d as f64);
        self.b = Mat::zeros(self.dense_rank, d);
        self.apply_masks();
    }

    /// Sets pruned coordinates of `A` and `B` to exactly `+0.0`.
    pub fn apply_masks(&mut self) {
        apply_mask(&mut self.a, &self.mask_a);
        apply_mask(&mut self.b, &self.mask_b);
    }

    /// `(A ⊙ m_a)(B ⊙ m_b)`
    pub fn delta(&self) -> Mat {
        let mut a = self.a.clone();
        let mut b = self.b.clone();
        apply_mask(&mut a, &self.mask_a);
        apply_mask(&mut b, &self.mask_b);
        crate::numerics::gemm_nn(&a, &b)
    }

    /// Masked gradient step: `θ ← θ - lr·(g ⊙ m)` on both matrices.
    pub fn sgd_step(&mut self, grad_a: &Mat, grad_b: &Mat, lr: f64) {
        masked_axpy(&mut self.a, grad_a, &self.mask_a, -lr);
        masked_axpy(&mut self.b, grad_b, &self.mask_b, -lr);
    }
}

pub(crate) fn apply_mask(m: &mut Mat, mask: &BitMask) {
    debug_assert_eq!(m.shape(), mask.shape());
    for (i, v) in m.data_mut().iter_mut().enumerate() {
        if !mask.get_flat(i) {
            *v = 0.0;
        }
    }
}

pub(crate) fn masked_axpy(target: &mut Mat, grad: &Mat, mask: &BitMask, k: f64) {
    debug_assert_eq!(target.shape(), grad.shape());
    for (i, (t, g)) in target.data_mut().iter_mut().zip(grad.data()).enumerate() {
        if mask.get_flat(i) {
            *t += k * g;
        } else {
            *t = 0.0;
        }
    }
}

/// Adapters of one model, keyed and iterated in site order.
pub type AdapterSet = BTreeMap<Site, LoraPair>;

/// Renders one pair in the versioned text checkpoint format.
///
/// ```text
/// fedprune-adapter v1
/// site <layer> <q|k|v>
/// rank <r>
/// sparsity <s>
/// dense_rank <R>
/// a_shape <rows> <cols>
/// a_mask
/// <row of 0/1 separated by spaces>   (rows lines)
/// a_values <count>
/// <retained values, row-major, one per line>
/// b_shape <rows> <cols>
/// b_mask
/// ...
/// b_values <count>
/// ...
/// end
/// ```
///
/// Floats are written in shortest round-trip decimal form, so a stored pair
/// loads back bit-identically. Pruned coordinates are implicit zeros.
pub fn checkpoint_to_string(pair: &LoraPair) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}");
    let _ = writeln!(s, "site {} {}", pair.site.layer, pair.site.proj.as_str());
    let _ = writeln!(s, "rank {}", pair.rank);
    let _ = writeln!(s, "sparsity {:?}", pair.sparsity);
    let _ = writeln!(s, "dense_rank {}", pair.dense_rank);
    write_matrix(&mut s, "a", &pair.a, &pair.mask_a);
    write_matrix(&mut s, "b", &pair.b, &pair.mask_b);
    s.push_str("end\n");
    s
}

fn write_matrix(s: &mut String, name: &str, m: &Mat, mask: &BitMask) {
    let _ = writeln!(s, "{name}_shape {} {}", m.rows(), m.cols());
    let _ = writeln!(s, "{name}_mask");
    for r in 0..mask.rows() {
        let row: Vec<&str> = (0..mask.cols())
            .map(|c| if mask.get(r, c) { "1" } else { "0" })
            .collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    let kept = mask.ones_indices();
    let _ = writeln!(s, "{name}_values {}", kept.len());
    for i in kept {
        let _ = writeln!(s, "{:?}", m.data()[i]);
    }
}

struct Lines<'a> {
    it: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.it
            .next()
            .map(|(i, l)| (i + 1, l.trim_end()))
            .ok_or_else(|| Error::data("adapter checkpoint truncated"))
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (n, line) = self.next()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(Error::data(format!(
                "adapter checkpoint line {n}: expected '{key}', found '{line}'"
            )));
        }
        Ok((n, parts.collect()))
    }
}

fn parse_num<T: std::str::FromStr>(tok: Option<&&str>, line: usize) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::data(format!("adapter checkpoint line {line}: bad number")))
}

fn read_matrix(lines: &mut Lines<'_>, name: &str) -> Result<(Mat, BitMask)> {
    let (n, shape) = lines.keyed(&format!("{name}_shape"))?;
    let rows: usize = parse_num(shape.first(), n)?;
    let cols: usize = parse_num(shape.get(1), n)?;
    lines.keyed(&format!("{name}_mask"))?;
    let mut bits = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let (n, line) = lines.next()?;
        let row: Vec<&str> = line.split_whitespace().collect();
        if row.len() != cols {
            return Err(Error::data(format!(
                "adapter checkpoint line {n}: expected {cols} mask entries"
            )));
        }
        for t in row {
            bits.push(match t {
                "1" => true,
                "0" => false,
                _ => {
                    return Err(Error::data(format!(
                        "adapter checkpoint line {n}: mask entry '{t}'"
                    )))
                }
            });
        }
    }
    let mask = BitMask::from_bools(rows, cols, &bits)?;
    let (n, count) = lines.keyed(&format!("{name}_values"))?;
    let count: usize = parse_num(count.first(), n)?;
    let kept = mask.ones_indices();
    if count != kept.len() {
        return Err(Error::data(format!(
            "adapter checkpoint line {n}: {count} values for {} retained entries",
            kept.len()
        )));
    }
    let mut data = vec![0.0; rows * cols];
    for i in kept {
        let (n, line) = lines.next()?;
        data[i] = line
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("adapter checkpoint line {n}: bad float")))?;
    }
    Ok((Mat::from_vec(rows, cols, data)?, mask))
}

pub fn checkpoint_from_str(text: &str) -> Result<LoraPair> {
    let mut lines = Lines {
        it: text.lines().enumerate(),
    };
    let (_, header) = lines.next()?;
    let expected = format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}");
    if header != expected {
        return Err(Error::data(format!(
            "adapter checkpoint header '{header}', expected '{expected}'"
        )));
    }
    let (n, site) = lines.keyed("site")?;
    let layer: usize = parse_num(site.first(), n)?;
    let proj = crate::backbone::Projection::parse(site.get(1).copied().unwrap_or(""))?;
    let (n, r) = lines.keyed("rank")?;
    let rank = parse_num(r.first(), n)?;
    let (n, s) = lines.keyed("sparsity")?;
    let sparsity = parse_num(s.first(), n)?;
    let (n, dr) = lines.keyed("dense_rank")?;
    let dense_rank = parse_num(dr.first(), n)?;
    let (a, mask_a) = read_matrix(&mut lines, "a")?;
    let (b, mask_b) = read_matrix(&mut lines, "b")?;
    lines.keyed("end")?;
    if a.cols() != dense_rank || b.rows() != dense_rank || a.rows() != b.cols() {
        return Err(Error::data("adapter checkpoint shapes inconsistent with dense rank"));
    }
    Ok(LoraPair {
        site: Site { layer, proj },
        a,
        b,
        mask_a,
        mask_b,
        rank,
        sparsity,
        dense_rank,
    })
}

pub fn store_checkpoint(pair: &LoraPair, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_string(pair)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<LoraPair> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}

/// File name used for a (client, site) checkpoint inside a run directory.
pub fn checkpoint_file_name(client: usize, site: Site) -> String {
    format!("client{client:04}_l{}{}.lora", site.layer, site.proj.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Projection;

    fn site() -> Site {
        Site {
            layer: 0,
            proj: Projection::Query,
        }
    }

    #[test]
    fn dense_rank_pairs() {
        assert_eq!(dense_rank(8, 0.5).unwrap(), 16);
        assert_eq!(dense_rank(8, 0.0).unwrap(), 8);
        assert_eq!(dense_rank(8, 0.66).unwrap(), 24);
        assert_eq!(dense_rank(8, 0.33).unwrap(), 12);
        assert!(dense_rank(8, 1.0).is_err());
        assert!(dense_rank(0, 0.5).is_err());
    }

    #[test]
    fn symmetric_init_variance() {
        let d = 64;
        let mut pair = LoraPair::with_dense_rank(site(), d, 8, 0.0, 1600);
        pair.init_symmetric(&mut RngStream::new(4, 1));
        let n = pair.a.len() as f64;
        let mean = pair.a.data().iter().sum::<f64>() / n;
        let var = pair.a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 1.0 / 64.0;
        assert!((var - target).abs() / target < 0.05, "variance {var}");
        assert!(pair.b.max_abs() > 0.0);
    }

    #[test]
    fn symmetric_init_distinct_streams() {
        let mut p1 = LoraPair::new(site(), 16, 4, 0.5).unwrap();
        let mut p2 = p1.clone();
        p1.init_symmetric(&mut RngStream::new(4, 1));
        p2.init_symmetric(&mut RngStream::new(4, 2));
        assert_ne!(p1.a, p2.a);
    }

    #[test]
    fn finetune_init_zero_delta_and_mask_support() {
        let mut p = LoraPair::new(site(), 16, 4, 0.5).unwrap();
        p.mask_a = BitMask::from_indices(16, 8, &[0, 3, 17, 100]);
        p.init_finetune(&mut RngStream::new(1, 1));
        assert_eq!(p.b.max_abs(), 0.0);
        assert_eq!(p.delta().max_abs(), 0.0);
        assert_eq!(p.mask_a.count_ones(), 4);
        let nz: Vec<usize> = (0..p.a.len()).filter(|&i| p.a.data()[i] != 0.0).collect();
        assert_eq!(nz, vec![0, 3, 17, 100]);
        let mut q = LoraPair::new(site(), 16, 4, 0.5).unwrap();
        q.mask_a = p.mask_a.clone();
        q.init_finetune(&mut RngStream::new(1, 1));
        assert_eq!(p.a, q.a);
    }

    #[test]
    fn apply_masks_cases() {
        let mut p = LoraPair::new(site(), 4, 2, 0.0).unwrap();
        p.init_symmetric(&mut RngStream::new(2, 2));
        let before = p.clone();
        p.apply_masks();
        assert_eq!(p, before);

        p.mask_a = BitMask::zeros(4, 2);
        p.mask_b = BitMask::zeros(2, 4);
        p.apply_masks();
        assert!(p.a.data().iter().chain(p.b.data()).all(|v| v.to_bits() == 0));

        let mut q = before.clone();
        q.mask_a = BitMask::from_indices(4, 2, &[1, 6]);
        q.apply_masks();
        let nz: Vec<usize> = (0..8).filter(|&i| q.a.data()[i] != 0.0).collect();
        assert_eq!(nz, vec![1, 6]);
    }

    #[test]
    fn masked_sgd_keeps_pruned_zero() {
        let mut p = LoraPair::new(site(), 6, 2, 0.5).unwrap();
        p.init_symmetric(&mut RngStream::new(3, 3));
        p.mask_a = BitMask::from_indices(6, 4, &[0, 1, 2, 9]);
        p.mask_b = BitMask::from_indices(4, 6, &[5, 23]);
        p.apply_masks();
        let mut rng = RngStream::new(8, 8);
        for _ in 0..50 {
            let ga = sample_gaussian(&mut rng, 6, 4, 1.0);
            let gb = sample_gaussian(&mut rng, 4, 6, 1.0);
            p.sgd_step(&ga, &gb, 0.3);
        }
        for i in 0..24 {
            if !p.mask_a.get_flat(i) {
                assert_eq!(p.a.data()[i].to_bits(), 0);
            }
            if !p.mask_b.get_flat(i) {
                assert_eq!(p.b.data()[i].to_bits(), 0);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let mut p = LoraPair::new(
            Site {
                layer: 1,
                proj: Projection::Value,
            },
            8,
            2,
            0.5,
        )
        .unwrap();
        p.init_symmetric(&mut RngStream::new(7, 0));
        p.mask_a = BitMask::from_indices(8, 4, &[0, 5, 6, 31]);
        p.apply_masks();
        p.a.data_mut()[5] = -0.0;
        let text = checkpoint_to_string(&p);
        let back = checkpoint_from_str(&text).unwrap();
        assert_eq!(back.site, p.site);
        assert_eq!(back.mask_a, p.mask_a);
        assert_eq!(back.mask_b, p.mask_b);
        let bits = |m: &Mat| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.a), bits(&p.a));
        assert_eq!(bits(&back.b), bits(&p.b));
        assert_eq!(back.sparsity.to_bits(), p.sparsity.to_bits());
        assert_eq!(checkpoint_to_string(&back), text);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(checkpoint_from_str("nope").is_err());
        let p = LoraPair::new(site(), 2, 1, 0.0).unwrap();
        let text = checkpoint_to_string(&p).replace("a_values 2", "a_values 3");
        assert!(checkpoint_from_str(&text).is_err());
    }
}
