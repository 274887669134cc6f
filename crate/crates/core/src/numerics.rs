//! Dense matrices, seeded random streams, bit masks and order statistics.
//!
//! Everything here is `f64` and single-threaded. Summation order in every
//! product is fixed (ascending inner index), so results are bit-reproducible.

use std::cmp::Ordering;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite matrix entry {v}")));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("{what} contains non-finite values")))
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }

    /// `self += k * other`
    pub fn add_scaled(&mut self, other: &Mat, k: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

pub(crate) fn ensure_same_shape(a: &Mat, b: &Mat, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}


/// Checked matrix product `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::config(format!(
            "matmul: inner dimensions differ ({}x{} · {}x{})",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let out = gemm_nn(a, b);
    out.ensure_finite("matmul result")?;
    Ok(out)
}

/// `a · b`. Each output entry accumulates over the inner index in ascending order.
pub(crate) fn gemm_nn(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.cols, b.rows);
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Mat::zeros(n, m);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`, computed as `a · (bᵀ)` so the inner loop is the same
/// contiguous axpy as [`gemm_nn`].
pub(crate) fn gemm_nt(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.cols, b.cols);
    gemm_nn(a, &b.transpose())
}

/// `aᵀ · b`
pub(crate) fn gemm_tn(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.rows, b.rows);
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut out = Mat::zeros(n, m);
    for p in 0..k {
        let arow = &a.data[p * n..(p + 1) * n];
        let brow = &b.data[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Deterministic random stream: ChaCha8 keyed by `seed`, with `stream` selecting
/// one of 2^64 independent sequences of the same key.
///
/// Uniforms are built from the top 53 bits of each 64-bit draw, Gaussians with
/// the Box-Muller transform, so the sample sequence depends only on
/// `(seed, stream)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngStream {
            seed,
            stream,
            inner,
        }
    }

    /// Stream addressed by a path of labels, e.g. `[purpose, client_id]`.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        Self::new(seed, stream_id(path))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` by rejection (no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle driven by [`RngStream::below`].
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// A standard normal pair from Box-Muller: `u1` in (0, 1], `u2` in [0, 1),
    /// `r = sqrt(-2 ln u1)`, returns `(r cos 2πu2, r sin 2πu2)`.
    pub fn gaussian_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub(crate) fn inner_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

/// SplitMix64-style fold of a label path into a stream id.
pub fn stream_id(path: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in path {
        h = splitmix(h ^ splitmix(p));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `rows × cols` matrix of i.i.d. N(0, variance) entries, filled row-major,
/// both Box-Muller outputs consumed in order.
pub fn sample_gaussian(rng: &mut RngStream, rows: usize, cols: usize, variance: f64) -> Mat {
    assert!(variance >= 0.0, "negative variance");
    let mut m = Mat::zeros(rows, cols);
    let sd = variance.sqrt();
    let mut chunks = m.data.chunks_mut(2);
    for pair in &mut chunks {
        let (z0, z1) = rng.gaussian_pair();
        pair[0] = sd * z0;
        if pair.len() > 1 {
            pair[1] = sd * z1;
        }
    }
    if variance == 0.0 {
        // sd * z may yield -0.0
        m.fill(0.0);
    }
    m
}

/// Orders indices by descending value, ascending index among equals.
fn rank_desc(values: &[f64], idx: &mut [usize]) {
    idx.sort_by(|&a, &b| match values[b].total_cmp(&values[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
}

fn check_scores(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::data("percentile over an empty set"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("NaN score"));
    }
    Ok(())
}

/// Indices of the `k` highest values among `candidates`, ties going to the lower
/// index. Returned in ascending index order.
pub fn top_k(values: &[f64], candidates: &[usize], k: usize) -> Vec<usize> {
    let mut idx = candidates.to_vec();
    rank_desc(values, &mut idx);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Retained set for a percentile cut: the `n - ⌊fraction_below·n⌋` highest values.
pub fn retained_indices(values: &[f64], fraction_below: f64) -> Result<Vec<usize>> {
    check_scores(values)?;
    let n = values.len();
    let below = below_count(n, fraction_below)?;
    let all: Vec<usize> = (0..n).collect();
    Ok(top_k(values, &all, n - below))
}

fn below_count(n: usize, fraction_below: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction_below) {
        return Err(Error::config(format!(
            "fraction_below {fraction_below} outside [0, 1]"
        )));
    }
    Ok(((fraction_below * n as f64).floor() as usize).min(n))
}

/// Threshold τ of a percentile cut: the smallest retained value. Exactly
/// `⌊fraction_below·n⌋` values rank below the retained set; among equal values
/// lower indices rank higher. Returns `+∞` when nothing is retained.
pub fn percentile_threshold(values: &[f64], fraction_below: f64) -> Result<f64> {
    let kept = retained_indices(values, fraction_below)?;
    Ok(kept
        .iter()
        .map(|&i| values[i])
        .min_by(|a, b| a.total_cmp(b))
        .unwrap_or(f64::INFINITY))
}

/// Packed binary mask, row-major, one bit per matrix entry.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitMask {
    rows: usize,
    cols: usize,
    bits: Vec<u64>,
}

impl BitMask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        BitMask {
            rows,
            cols,
            bits: vec![0; (rows * cols).div_ceil(64)],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows * cols {
            m.set_flat(i, true);
        }
        m
    }

    pub fn from_bools(rows: usize, cols: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::config(format!(
                "mask length {} does not match shape {rows}x{cols}",
                bits.len()
            )));
        }
        let mut m = Self::zeros(rows, cols);
        for (i, &b) in bits.iter().enumerate() {
            m.set_flat(i, b);
        }
        Ok(m)
    }

    /// Mask with exactly the listed flat indices set.
    pub fn from_indices(rows: usize, cols: usize, idx: &[usize]) -> Self {
        let mut m = Self::zeros(rows, cols);
        for &i in idx {
            m.set_flat(i, true);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get_flat(&self, i: usize) -> bool {
        (self.bits[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set_flat(&mut self, i: usize, v: bool) {
        assert!(i < self.len(), "mask index out of range");
        if v {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.get_flat(r * self.cols + c)
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Flat indices of set bits, ascending.
    pub fn ones_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.get_flat(i)).collect()
    }

    pub fn is_subset_of(&self, other: &BitMask) -> bool {
        self.shape() == other.shape() && self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }

    pub fn not(&self) -> BitMask {
        let mut out = self.clone();
        for w in &mut out.bits {
            *w = !*w;
        }
        out.clear_tail();
        out
    }

    pub fn and(&self, other: &BitMask) -> BitMask {
        assert_eq!(self.shape(), other.shape());
        BitMask {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a & b).collect(),
        }
    }

    fn clear_tail(&mut self) {
        let n = self.len();
        if n % 64 != 0 {
            if let Some(last) = self.bits.last_mut() {
                *last &= (1u64 << (n % 64)) - 1;
            }
        }
    }

    fn differing_bits(&self, other: &BitMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }
}

/// `1 - differing / total`.
pub fn hamming_similarity(a: &BitMask, b: &BitMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "hamming_similarity: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    Ok(1.0 - a.differing_bits(b) as f64 / a.len() as f64)
}
