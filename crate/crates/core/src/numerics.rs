//! Dense fp32 matrices, the reference GEMM, row softmax and IEEE-754 helpers.
//!
//! Every kernel here sums the inner dimension in ascending order, so two runs
//! over the same operands are bitwise identical. The protected pipeline relies
//! on that to compare corrected outputs against fault-free ones exactly.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, AbftError, Result};

/// Row-major fp32 matrix with at least one row and one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        Self {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(shape_err("Matrix::from_vec", "dimensions must be >= 1"));
        }
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::from_vec",
                format!("{} elements for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Self {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::from_vec(rows.len(), cols, data).expect("non-empty rows")
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    /// Standard-normal entries scaled by `std`.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Self {
        let mut m = Self::zeros(rows, cols);
        for x in &mut m.data {
            let z: f32 = StandardNormal.sample(rng);
            *x = z * std;
        }
        m
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, lo: f32, hi: f32, rng: &mut R) -> Self {
        let mut m = Self::zeros(rows, cols);
        for x in &mut m.data {
            *x = rng.random_range(lo..hi);
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_col(&mut self, c: usize, values: &[f32]) {
        debug_assert_eq!(values.len(), self.rows);
        for (r, &v) in values.iter().enumerate() {
            self.set(r, c, v);
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols && width >= 1);
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Horizontal concatenation of equally tall blocks.
    pub fn hconcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let first = blocks
            .first()
            .ok_or_else(|| shape_err("Matrix::hconcat", "no blocks"))?;
        let rows = first.rows;
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(shape_err("Matrix::hconcat", "blocks differ in row count"));
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for b in blocks {
                out.row_mut(r)[offset..offset + b.cols].copy_from_slice(b.row(r));
                offset += b.cols;
            }
        }
        Ok(out)
    }

    /// Largest `|x|` over all elements, NaN ignored.
    pub fn max_abs(&self) -> f32 {
        self.data
            .iter()
            .fold(0.0f32, |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    /// Largest `|x|` over elements that classify as [`FloatClass::Finite`]
    /// under `near_inf`. Extreme entries are skipped so a single corrupted
    /// element cannot inflate a tolerance derived from this magnitude.
    pub fn finite_max_abs(&self, near_inf: f32) -> f32 {
        finite_max_abs(&self.data, near_inf)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest elementwise `|a - b|`; `INFINITY` if any pair differs in a
    /// non-finite way.
    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape());
        let mut worst = 0.0f32;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            if a.to_bits() == b.to_bits() {
                continue;
            }
            let d = (a - b).abs();
            if d.is_nan() {
                return f32::INFINITY;
            }
            if d > worst {
                worst = d;
            }
        }
        worst
    }

    pub fn bitwise_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn finite_max_abs(values: &[f32], near_inf: f32) -> f32 {
    values.iter().fold(0.0f32, |m, &x| {
        let a = x.abs();
        if a <= near_inf && a > m {
            a
        } else {
            m
        }
    })
}

/// A `batches x heads` grid of equally shaped slices, stored batch-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batched<T> {
    batches: usize,
    heads: usize,
    slices: Vec<T>,
}

pub type BatchedMatrix = Batched<Matrix>;

impl<T> Batched<T> {
    pub fn from_fn(batches: usize, heads: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(batches * heads >= 1, "batches x heads must be >= 1");
        let mut slices = Vec::with_capacity(batches * heads);
        for b in 0..batches {
            for h in 0..heads {
                slices.push(f(b, h));
            }
        }
        Self { batches, heads, slices }
    }

    pub fn try_from_fn<E>(
        batches: usize,
        heads: usize,
        mut f: impl FnMut(usize, usize) -> std::result::Result<T, E>,
    ) -> std::result::Result<Self, E> {
        assert!(batches * heads >= 1, "batches x heads must be >= 1");
        let mut slices = Vec::with_capacity(batches * heads);
        for b in 0..batches {
            for h in 0..heads {
                slices.push(f(b, h)?);
            }
        }
        Ok(Self { batches, heads, slices })
    }

    #[inline]
    pub fn batches(&self) -> usize {
        self.batches
    }

    #[inline]
    pub fn heads(&self) -> usize {
        self.heads
    }

    #[inline]
    pub fn get(&self, batch: usize, head: usize) -> &T {
        &self.slices[batch * self.heads + head]
    }

    #[inline]
    pub fn get_mut(&mut self, batch: usize, head: usize) -> &mut T {
        &mut self.slices[batch * self.heads + head]
    }

    pub fn slices(&self) -> &[T] {
        &self.slices
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &T)> {
        let heads = self.heads;
        self.slices
            .iter()
            .enumerate()
            .map(move |(i, s)| ((i / heads, i % heads), s))
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Batched<U> {
        Batched {
            batches: self.batches,
            heads: self.heads,
            slices: self.slices.iter().map(&mut f).collect(),
        }
    }
}

impl Batched<Matrix> {
    pub fn from_slices(batches: usize, heads: usize, slices: Vec<Matrix>) -> Result<Self> {
        if batches * heads == 0 || slices.len() != batches * heads {
            return Err(shape_err(
                "BatchedMatrix::from_slices",
                format!("{} slices for {batches}x{heads}", slices.len()),
            ));
        }
        let shape = slices[0].shape();
        if slices.iter().any(|s| s.shape() != shape) {
            return Err(shape_err("BatchedMatrix::from_slices", "slices differ in shape"));
        }
        Ok(Self { batches, heads, slices })
    }

    /// Wraps one matrix as a 1x1 batch.
    pub fn single(m: Matrix) -> Self {
        Self {
            batches: 1,
            heads: 1,
            slices: vec![m],
        }
    }

    /// Shape shared by every slice.
    pub fn slice_shape(&self) -> (usize, usize) {
        self.slices[0].shape()
    }

    pub fn max_abs_diff(&self, other: &BatchedMatrix) -> f32 {
        self.slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f32::max)
    }

    pub fn bitwise_eq(&self, other: &BatchedMatrix) -> bool {
        self.batches == other.batches
            && self.heads == other.heads
            && self.slices.iter().zip(&other.slices).all(|(a, b)| a.bitwise_eq(b))
    }

    pub fn has_non_finite(&self) -> bool {
        self.slices.iter().any(|s| !s.all_finite())
    }
}

/// IEEE-754 category of a value relative to a near-INF magnitude threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FloatClass {
    Finite,
    NearInf,
    Inf,
    NaN,
}

pub fn classify_value(x: f32, near_inf: f32) -> FloatClass {
    if x.is_nan() {
        FloatClass::NaN
    } else if x.is_infinite() {
        FloatClass::Inf
    } else if x.abs() > near_inf {
        FloatClass::NearInf
    } else {
        FloatClass::Finite
    }
}

/// Flips bit `pos` (0 = mantissa LSB, 31 = sign) of the fp32 encoding.
pub fn flip_bit(x: f32, pos: u32) -> f32 {
    assert!(pos < 32, "bit position {pos} out of range");
    f32::from_bits(x.to_bits() ^ (1u32 << pos))
}

/// Naive `op(A) * op(B)` where `op` optionally transposes.
///
/// Each output element accumulates its inner products in ascending inner
/// index, starting from `0.0`, with no fused multiply-add. IEEE special
/// values propagate normally (`0 * INF = NaN` is not short-circuited).
pub fn gemm(a: &Matrix, b: &Matrix, trans_a: bool, trans_b: bool) -> Result<Matrix> {
    let (m, ka) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if ka != kb {
        return Err(AbftError::Shape {
            op: "gemm",
            detail: format!(
                "inner dimensions {ka} vs {kb} (A {}x{}{}, B {}x{}{})",
                a.rows,
                a.cols,
                if trans_a { "^T" } else { "" },
                b.rows,
                b.cols,
                if trans_b { "^T" } else { "" },
            ),
        });
    }
    let at;
    let a = if trans_a {
        at = a.transpose();
        &at
    } else {
        a
    };
    let bt;
    let b = if trans_b {
        bt = b.transpose();
        &bt
    } else {
        b
    };
    let mut c = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let crow = &mut c.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * n..(k + 1) * n];
            for (cij, &bkj) in crow.iter_mut().zip(brow) {
                *cij += aik * bkj;
            }
        }
    }
    Ok(c)
}

/// Max-subtracted softmax over each row.
///
/// A row holding `+INF` becomes all NaN (`INF - INF`), which is the
/// propagation behaviour extreme-value faults exhibit in practice.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mut max = f32::NEG_INFINITY;
        for &x in row.iter() {
            if x > max {
                max = x;
            }
        }
        // every element NaN: keep max at -INF so the row turns NaN below
        let mut sum = 0.0f32;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

pub fn scale(m: &Matrix, factor: f32) -> Matrix {
    let mut out = m.clone();
    for x in out.data_mut() {
        *x *= factor;
    }
    out
}
