//! Dense numerical substrate shared by every model module.
//!
//! Everything here is `f64`. Matrices are row-major and small (tens of rows),
//! so the kernels are plain loops; there is no BLAS dependency.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "DenseMatrix::from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "DenseMatrix::from_vec".into(),
                index,
            });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape(
                "DenseMatrix::from_rows",
                format!("{cols} columns"),
                format!("row of {}", bad.len()),
            ));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Column vector (n x 1).
    pub fn column(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::from_vec(n, 1, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
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

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    /// `self · x`, checked.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "matvec",
                format!("matrix {}", self.shape_string()),
                format!("vector of {}", x.len()),
            ));
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        Ok(out)
    }

    /// `out = self · x` over the leading `x.len()` columns starting at `col_offset`.
    ///
    /// Unchecked beyond debug assertions; the model layers validate shapes once per episode.
    #[inline]
    pub(crate) fn matvec_cols_add(&self, col_offset: usize, x: &[f64], out: &mut [f64]) {
        debug_assert!(col_offset + x.len() <= self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols + col_offset..r * self.cols + col_offset + x.len()];
            *o += dot(row, x);
        }
    }

    #[inline]
    pub(crate) fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        self.matvec_cols_add(0, x, out);
    }

    /// `out += selfᵀ · y` restricted to columns `col_offset..col_offset + out.len()`.
    #[inline]
    pub(crate) fn matvec_t_cols_add(&self, col_offset: usize, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert!(col_offset + out.len() <= self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            let row = &self.data[r * self.cols + col_offset..r * self.cols + col_offset + out.len()];
            axpy(yr, row, out);
        }
    }

    /// `selfᵀ · y`, checked.
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::shape(
                "matvec_transposed",
                format!("matrix {}", self.shape_string()),
                format!("vector of {}", y.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        self.matvec_t_cols_add(0, y, &mut out);
        Ok(out)
    }

    /// `self[:, col_offset..] += scale · a bᵀ`.
    #[inline]
    pub(crate) fn add_outer_cols(&mut self, col_offset: usize, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert!(col_offset + b.len() <= self.cols);
        let cols = self.cols;
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[r * cols + col_offset..r * cols + col_offset + b.len()];
            axpy(s, b, row);
        }
    }

    /// `self += scale · a bᵀ`, checked.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) -> Result<()> {
        if a.len() != self.rows || b.len() != self.cols {
            return Err(Error::shape(
                "add_outer",
                format!("matrix {}", self.shape_string()),
                format!("outer {}x{}", a.len(), b.len()),
            ));
        }
        self.add_outer_cols(0, scale, a, b);
        Ok(())
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, scale: f64, other: &DenseMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_scaled", self.shape_string(), other.shape_string()));
        }
        axpy(scale, &other.data, &mut self.data);
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `xᵀ · self · y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != self.rows || y.len() != self.cols {
            return Err(Error::shape(
                "bilinear",
                format!("matrix {}", self.shape_string()),
                format!("vectors {} and {}", x.len(), y.len()),
            ));
        }
        Ok(x.iter()
            .enumerate()
            .map(|(r, &xr)| xr * dot(self.row(r), y))
            .sum())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn stable_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "softmax input".into(),
            index,
        });
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// `log Σ exp(v_i)`, stable. Returns `-inf` for an empty slice.
pub fn log_sum_exp(v: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = v.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Backward pass of softmax: given `p = softmax(x)` and `dL/dp`, returns `dL/dx`.
#[inline]
pub(crate) fn softmax_backward(p: &[f64], dp: &[f64], dx: &mut [f64]) {
    let inner = dot(p, dp);
    for ((o, &pi), &dpi) in dx.iter_mut().zip(p).zip(dp) {
        *o = pi * (dpi - inner);
    }
}

/// `tanh(weight · x + bias)`.
pub fn tanh_affine(x: &[f64], weight: &DenseMatrix, bias: &[f64]) -> Result<Vec<f64>> {
    if weight.cols() != x.len() {
        return Err(Error::shape(
            "tanh_affine",
            format!("weight {}", weight.shape_string()),
            format!("input of {}", x.len()),
        ));
    }
    if weight.rows() != bias.len() {
        return Err(Error::shape(
            "tanh_affine",
            format!("weight {}", weight.shape_string()),
            format!("bias of {}", bias.len()),
        ));
    }
    let mut out = bias.to_vec();
    weight.matvec_cols_add(0, x, &mut out);
    out.iter_mut().for_each(|v| *v = v.tanh());
    Ok(out)
}

/// Relative-error floor for coordinates where both gradients vanish.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares `analytic` against central differences of `f` around `p`.
///
/// Returns `max_i |g_fd - g_an| / max(1e-8, |g_fd| + |g_an|)`.
pub fn grad_check<F>(mut f: F, p: &[f64], analytic: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    if analytic.len() != p.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} parameters", p.len()),
            format!("{} gradient entries", analytic.len()),
        ));
    }
    let mut probe = p.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        probe[i] = p[i] + step;
        let up = f(&probe);
        probe[i] = p[i] - step;
        let down = f(&probe);
        probe[i] = p[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check objective".into(),
                index: i,
            });
        }
        let fd = (up - down) / (2.0 * step);
        let err = (fd - analytic[i]).abs() / GRAD_CHECK_FLOOR.max(fd.abs() + analytic[i].abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Seeded generator: ChaCha8 keyed by a 64-bit seed.
///
/// Independent streams for distinct purposes come from [`Rng::fork`], which
/// derives a child seed as `splitmix64(seed ^ fnv1a64(label))`. The ChaCha8
/// stream is platform independent, so a given seed reproduces bit-for-bit.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator for a named purpose. Does not advance `self`.
    pub fn fork(&self, label: &str) -> Rng {
        Rng::new(splitmix64(self.seed ^ fnv1a64(label.as_bytes())))
    }

    /// Child generator for an indexed purpose (epoch, run, ...).
    pub fn fork_indexed(&self, label: &str, index: u64) -> Rng {
        Rng::new(splitmix64(
            self.seed ^ fnv1a64(label.as_bytes()) ^ splitmix64(index.wrapping_add(0x51_7c_c1_b7)),
        ))
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        // 53 random mantissa bits.
        let u = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * u
    }

    pub fn normal(&mut self, std_dev: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        z * std_dev
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        rand::Rng::random_range(&mut self.inner, 0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn inclusive(&mut self, lo: usize, hi: usize) -> usize {
        rand::Rng::random_range(&mut self.inner, lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        rand::seq::SliceRandom::shuffle(items, &mut self.inner);
    }

    /// `k` distinct elements of `pool`, uniformly without replacement, in random order.
    pub fn sample<T: Copy>(&mut self, pool: &[T], k: usize) -> Vec<T> {
        assert!(k <= pool.len(), "sample of {k} from {}", pool.len());
        rand::seq::index::sample(&mut self.inner, pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
