//! Unweighted and weighted checksums that travel alongside a matrix through
//! GEMMs.
//!
//! Column checksums are `[1 1 .. 1; 1 2 .. m] * A` (one pair per column),
//! row checksums are `B * [1 1 .. 1; 1 2 .. n]^T` (one pair per row). Weights
//! are 1-based so a single error at index `i` yields `delta2 / delta1 = i + 1`.
//!
//! For `C = A * B` the stored checksums of `C` are derived from the operands'
//! checksums (`C^c = A^c * B`, `C^r = A * B^r`) and never from `C` itself,
//! which is what keeps a fault in `C` detectable.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, AbftError, Result};
use crate::flops;
use crate::numerics::Matrix;

/// fp32 unit roundoff, 2^-23.
pub const FP32_EPSILON: f64 = 1.0 / 8_388_608.0;

/// Multiplier applied on top of the first-order roundoff bound.
pub const ROUNDOFF_SLACK: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    /// One checksum pair per column, summed down the rows.
    Column,
    /// One checksum pair per row, summed across the columns.
    Row,
}

impl Axis {
    pub fn other(self) -> Axis {
        match self {
            Axis::Column => Axis::Row,
            Axis::Row => Axis::Column,
        }
    }

    /// Number of checksum vectors `m` carries on this axis.
    pub fn vector_count(self, m: &Matrix) -> usize {
        match self {
            Axis::Column => m.cols(),
            Axis::Row => m.rows(),
        }
    }

    /// Extracts the `idx`-th vector protected by this axis' checksums.
    pub fn vector(self, m: &Matrix, idx: usize) -> Vec<f32> {
        match self {
            Axis::Column => m.col(idx),
            Axis::Row => m.row(idx).to_vec(),
        }
    }

    pub fn write_vector(self, m: &mut Matrix, idx: usize, values: &[f32]) {
        match self {
            Axis::Column => m.set_col(idx, values),
            Axis::Row => m.row_mut(idx).copy_from_slice(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecksumPair {
    pub axis: Axis,
    pub unweighted: Vec<f32>,
    pub weighted: Vec<f32>,
}

impl ChecksumPair {
    pub fn len(&self) -> usize {
        self.unweighted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unweighted.is_empty()
    }

    /// Elementwise sum of two pairs on the same axis.
    pub fn add(&self, other: &ChecksumPair) -> Result<ChecksumPair> {
        if self.axis != other.axis {
            return Err(AbftError::AxisMismatch {
                stored: self.axis,
                fresh: other.axis,
            });
        }
        if self.len() != other.len() {
            return Err(shape_err("ChecksumPair::add", "length mismatch"));
        }
        let zip = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| x + y).collect();
        Ok(ChecksumPair {
            axis: self.axis,
            unweighted: zip(&self.unweighted, &other.unweighted),
            weighted: zip(&self.weighted, &other.weighted),
        })
    }
}

/// Per-vector differences `stored - recomputed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecksumDelta {
    pub axis: Axis,
    pub delta1: Vec<f32>,
    pub delta2: Vec<f32>,
}

impl ChecksumDelta {
    /// Indices whose unweighted delta is NaN or exceeds `roundoff` in
    /// magnitude.
    pub fn violations(&self, roundoff: f32) -> Vec<usize> {
        self.delta1
            .iter()
            .enumerate()
            .filter(|(_, d)| !(d.abs() <= roundoff))
            .map(|(i, _)| i)
            .collect()
    }
}

/// A matrix with optional checksum pairs riding alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedMatrix {
    pub matrix: Matrix,
    pub col_checksums: Option<ChecksumPair>,
    pub row_checksums: Option<ChecksumPair>,
}

impl EncodedMatrix {
    pub fn plain(matrix: Matrix) -> Self {
        Self {
            matrix,
            col_checksums: None,
            row_checksums: None,
        }
    }

    pub fn with_columns(matrix: Matrix) -> Self {
        let col = encode_column_checksums(&matrix);
        Self {
            matrix,
            col_checksums: Some(col),
            row_checksums: None,
        }
    }

    pub fn with_rows(matrix: Matrix) -> Self {
        let row = encode_row_checksums(&matrix);
        Self {
            matrix,
            col_checksums: None,
            row_checksums: Some(row),
        }
    }

    pub fn with_both(matrix: Matrix) -> Self {
        let col = encode_column_checksums(&matrix);
        let row = encode_row_checksums(&matrix);
        Self {
            matrix,
            col_checksums: Some(col),
            row_checksums: Some(row),
        }
    }

    pub fn checksums(&self, axis: Axis) -> Option<&ChecksumPair> {
        match axis {
            Axis::Column => self.col_checksums.as_ref(),
            Axis::Row => self.row_checksums.as_ref(),
        }
    }

    pub fn set_checksums(&mut self, pair: ChecksumPair) {
        match pair.axis {
            Axis::Column => self.col_checksums = Some(pair),
            Axis::Row => self.row_checksums = Some(pair),
        }
    }

    /// Replaces the stored checksums on `axis` with ones recomputed from the
    /// current data.
    pub fn refresh(&mut self, axis: Axis) {
        let fresh = recompute_checksums(&self.matrix, axis);
        self.set_checksums(fresh);
    }

    /// `stored - recomputed` on `axis`.
    pub fn delta(&self, axis: Axis, op: &'static str, tag: &str) -> Result<ChecksumDelta> {
        let stored = self.checksums(axis).ok_or_else(|| AbftError::MissingChecksum {
            op,
            tag: tag.to_string(),
            axis,
        })?;
        checksum_delta(stored, &recompute_checksums(&self.matrix, axis))
    }
}

fn weighted_sums<'a>(values: impl Iterator<Item = &'a f32>) -> (f32, f32) {
    let mut plain = 0.0f32;
    let mut weighted = 0.0f32;
    let mut n = 0u64;
    for (i, &x) in values.enumerate() {
        plain += x;
        weighted += (i + 1) as f32 * x;
        n += 1;
    }
    flops::add(3 * n);
    (plain, weighted)
}

/// `(sum v, sum (i+1) v_i)` accumulated in ascending index order.
pub fn vector_checksums(v: &[f32]) -> (f32, f32) {
    weighted_sums(v.iter())
}

pub fn encode_column_checksums(a: &Matrix) -> ChecksumPair {
    let (rows, cols) = a.shape();
    let mut unweighted = vec![0.0f32; cols];
    let mut weighted = vec![0.0f32; cols];
    for i in 0..rows {
        let w = (i + 1) as f32;
        for (j, &x) in a.row(i).iter().enumerate() {
            unweighted[j] += x;
            weighted[j] += w * x;
        }
    }
    flops::add(3 * (rows * cols) as u64);
    ChecksumPair {
        axis: Axis::Column,
        unweighted,
        weighted,
    }
}

pub fn encode_row_checksums(b: &Matrix) -> ChecksumPair {
    let mut unweighted = Vec::with_capacity(b.rows());
    let mut weighted = Vec::with_capacity(b.rows());
    for i in 0..b.rows() {
        let (p, w) = weighted_sums(b.row(i).iter());
        unweighted.push(p);
        weighted.push(w);
    }
    ChecksumPair {
        axis: Axis::Row,
        unweighted,
        weighted,
    }
}

/// Fresh checksums of `c`, same arithmetic as the encoders.
pub fn recompute_checksums(c: &Matrix, axis: Axis) -> ChecksumPair {
    match axis {
        Axis::Column => encode_column_checksums(c),
        Axis::Row => encode_row_checksums(c),
    }
}

pub fn checksum_delta(stored: &ChecksumPair, fresh: &ChecksumPair) -> Result<ChecksumDelta> {
    if stored.axis != fresh.axis {
        return Err(AbftError::AxisMismatch {
            stored: stored.axis,
            fresh: fresh.axis,
        });
    }
    if stored.len() != fresh.len() || stored.weighted.len() != fresh.weighted.len() {
        return Err(shape_err(
            "checksum_delta",
            format!("stored length {} vs fresh {}", stored.len(), fresh.len()),
        ));
    }
    let sub = |a: &[f32], b: &[f32]| -> Vec<f32> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
    flops::add(2 * stored.len() as u64);
    Ok(ChecksumDelta {
        axis: stored.axis,
        delta1: sub(&stored.unweighted, &fresh.unweighted),
        delta2: sub(&stored.weighted, &fresh.weighted),
    })
}

/// Which output checksums to derive when pushing checksums through a GEMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Propagate {
    pub columns: bool,
    pub rows: bool,
}

impl Propagate {
    pub const COLUMNS: Propagate = Propagate {
        columns: true,
        rows: false,
    };
    pub const ROWS: Propagate = Propagate {
        columns: false,
        rows: true,
    };
    pub const BOTH: Propagate = Propagate {
        columns: true,
        rows: true,
    };
}

/// Attaches checksums to `c = a * op(b)` computed from the operands'
/// checksums, where `op(b)` is `b^T` when `trans_b` is set.
///
/// Column checksums need column checksums on `a`. Row checksums need the row
/// checksums of `op(b)`: the row checksums of `b`, or its column checksums
/// when `b` enters transposed.
pub fn update_checksums_through_gemm(
    a: &EncodedMatrix,
    b: &EncodedMatrix,
    trans_b: bool,
    c: Matrix,
    propagate: Propagate,
) -> Result<EncodedMatrix> {
    const OP: &str = "update_checksums_through_gemm";
    let am = &a.matrix;
    let bm = &b.matrix;
    let (k, n) = if trans_b {
        (bm.cols(), bm.rows())
    } else {
        (bm.rows(), bm.cols())
    };
    if am.cols() != k || c.shape() != (am.rows(), n) {
        return Err(shape_err(
            OP,
            format!(
                "A {:?}, B {:?}{}, C {:?}",
                am.shape(),
                bm.shape(),
                if trans_b { "^T" } else { "" },
                c.shape()
            ),
        ));
    }
    let op_b = |kk: usize, j: usize| if trans_b { bm.get(j, kk) } else { bm.get(kk, j) };

    let mut out = EncodedMatrix::plain(c);
    if propagate.columns {
        let ac = a.col_checksums.as_ref().ok_or(AbftError::MissingChecksum {
            op: OP,
            tag: "A".into(),
            axis: Axis::Column,
        })?;
        let mut unweighted = vec![0.0f32; n];
        let mut weighted = vec![0.0f32; n];
        for j in 0..n {
            let (mut s1, mut s2) = (0.0f32, 0.0f32);
            for kk in 0..k {
                let bv = op_b(kk, j);
                s1 += ac.unweighted[kk] * bv;
                s2 += ac.weighted[kk] * bv;
            }
            unweighted[j] = s1;
            weighted[j] = s2;
        }
        flops::add(4 * (n * k) as u64);
        out.col_checksums = Some(ChecksumPair {
            axis: Axis::Column,
            unweighted,
            weighted,
        });
    }
    if propagate.rows {
        let br = if trans_b {
            b.col_checksums.as_ref()
        } else {
            b.row_checksums.as_ref()
        }
        .ok_or(AbftError::MissingChecksum {
            op: OP,
            tag: "B".into(),
            axis: if trans_b { Axis::Column } else { Axis::Row },
        })?;
        let m = am.rows();
        let mut unweighted = vec![0.0f32; m];
        let mut weighted = vec![0.0f32; m];
        for i in 0..m {
            let (mut s1, mut s2) = (0.0f32, 0.0f32);
            for (kk, &av) in am.row(i).iter().enumerate() {
                s1 += av * br.unweighted[kk];
                s2 += av * br.weighted[kk];
            }
            unweighted[i] = s1;
            weighted[i] = s2;
        }
        flops::add(4 * (m * k) as u64);
        out.row_checksums = Some(ChecksumPair {
            axis: Axis::Row,
            unweighted,
            weighted,
        });
    }
    if !propagate.columns && !propagate.rows {
        return Err(AbftError::InvalidConfig(format!("{OP}: nothing to propagate")));
    }
    Ok(out)
}

/// Fault-free tolerance on `|delta1|` for a GEMM with inner dimension `k`
/// whose operands are bounded by `mag_a` and `mag_b`:
/// `2^-23 * k * mag_a * mag_b * 16`, floored at the smallest positive normal
/// so the threshold is always strictly positive.
pub fn roundoff_threshold(k: usize, mag_a: f32, mag_b: f32) -> f32 {
    let e = FP32_EPSILON * k.max(1) as f64 * mag_a as f64 * mag_b as f64 * ROUNDOFF_SLACK;
    (e as f32).max(f32::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gemm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn encode_pair(a: &Matrix, b: &Matrix) -> EncodedMatrix {
        let c = gemm(a, b, false, false).unwrap();
        update_checksums_through_gemm(
            &EncodedMatrix::with_columns(a.clone()),
            &EncodedMatrix::with_rows(b.clone()),
            false,
            c,
            Propagate::BOTH,
        )
        .unwrap()
    }

    #[test]
    fn column_checksum_examples() {
        let z = encode_column_checksums(&Matrix::zeros(3, 2));
        assert_eq!(z.unweighted, vec![0.0, 0.0]);
        assert_eq!(z.weighted, vec![0.0, 0.0]);

        let p = encode_column_checksums(&Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        assert_eq!(p.unweighted, vec![4.0, 6.0]);
        assert_eq!(p.weighted, vec![7.0, 10.0]);

        let mut a = Matrix::filled(2, 2, 1.0);
        a.set(0, 0, f32::INFINITY);
        assert_eq!(encode_column_checksums(&a).unweighted[0], f32::INFINITY);
    }

    #[test]
    fn row_checksum_examples() {
        let p = encode_row_checksums(&Matrix::identity(2));
        assert_eq!(p.unweighted, vec![1.0, 1.0]);
        assert_eq!(p.weighted, vec![1.0, 2.0]);
        let z = encode_row_checksums(&Matrix::zeros(2, 4));
        assert_eq!(z.unweighted, vec![0.0, 0.0]);
        let r = encode_row_checksums(&Matrix::from_rows(&[[1.5, -2.0, 4.0]]));
        assert_eq!(r.unweighted, vec![3.5]);
        assert_eq!(r.axis, Axis::Row);
    }

    #[test]
    fn recompute_matches_encoders() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(recompute_checksums(&m, Axis::Column), encode_column_checksums(&m));
        assert_eq!(recompute_checksums(&m, Axis::Row), encode_row_checksums(&m));
    }

    #[test]
    fn fault_free_propagation_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Matrix::random_uniform(8, 8, -1.0, 1.0, &mut rng);
        let b = Matrix::random_uniform(8, 8, -1.0, 1.0, &mut rng);
        let enc = encode_pair(&a, &b);
        let e = roundoff_threshold(8, a.max_abs(), b.max_abs());
        for axis in [Axis::Column, Axis::Row] {
            let d = enc.delta(axis, "test", "C").unwrap();
            assert!(d.violations(e).is_empty(), "{axis:?}: {:?}", d.delta1);
        }
    }

    #[test]
    fn operand_fault_after_encoding_points_at_one_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Matrix::random_uniform(8, 8, -1.0, 1.0, &mut rng);
        let b = Matrix::random_uniform(8, 8, -1.0, 1.0, &mut rng);
        let a_enc = EncodedMatrix::with_columns(a.clone());
        let e = roundoff_threshold(8, a.max_abs() + 3.0, b.max_abs());
        // A corrupted after A^c was taken: row i of C is wrong, C^c (from the
        // clean A^c) disagrees in every column and locates row i each time
        for i in 0..8 {
            for k in 0..8 {
                let mut a_bad = a.clone();
                a_bad.set(i, k, a.get(i, k) + 3.0);
                let c = gemm(&a_bad, &b, false, false).unwrap();
                let enc = update_checksums_through_gemm(
                    &a_enc,
                    &EncodedMatrix::plain(b.clone()),
                    false,
                    c,
                    Propagate::COLUMNS,
                )
                .unwrap();
                let d = enc.delta(Axis::Column, "test", "C").unwrap();
                assert_eq!(d.violations(e), (0..8).collect::<Vec<_>>(), "fault at ({i},{k})");
                for j in 0..8 {
                    assert_eq!((d.delta2[j] / d.delta1[j]).round() as usize, i + 1);
                }
            }
        }
    }

    #[test]
    fn identity_operand_passes_checksums_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = Matrix::random_uniform(6, 6, -1.0, 1.0, &mut rng);
        let enc = encode_pair(&a, &Matrix::identity(6));
        let ac = encode_column_checksums(&a);
        let e = roundoff_threshold(6, a.max_abs(), 1.0);
        for (x, y) in enc.col_checksums.unwrap().unweighted.iter().zip(&ac.unweighted) {
            assert!((x - y).abs() <= e);
        }
    }

    #[test]
    fn transposed_operand_uses_column_checksums_for_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let q = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let k = Matrix::random_normal(7, 3, 1.0, &mut rng);
        let s = gemm(&q, &k, false, true).unwrap();
        let enc = update_checksums_through_gemm(
            &EncodedMatrix::with_columns(q.clone()),
            &EncodedMatrix::with_columns(k.clone()),
            true,
            s.clone(),
            Propagate::BOTH,
        )
        .unwrap();
        let e = roundoff_threshold(3, q.max_abs(), k.max_abs()) * 4.0;
        for axis in [Axis::Column, Axis::Row] {
            assert!(enc.delta(axis, "t", "S").unwrap().violations(e).is_empty());
        }
        let missing = update_checksums_through_gemm(
            &EncodedMatrix::with_columns(q),
            &EncodedMatrix::with_rows(k),
            true,
            s,
            Propagate::ROWS,
        );
        assert!(matches!(missing, Err(AbftError::MissingChecksum { .. })));
    }

    #[test]
    fn delta_examples() {
        let p = encode_column_checksums(&Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let d = checksum_delta(&p, &p).unwrap();
        assert_eq!(d.delta1, vec![0.0, 0.0]);
        assert_eq!(d.delta2, vec![0.0, 0.0]);

        let mut stored = p.clone();
        stored.unweighted[1] = f32::INFINITY;
        assert_eq!(checksum_delta(&stored, &p).unwrap().delta1[1], f32::INFINITY);

        let mut nan = p.clone();
        nan.unweighted[0] = f32::NAN;
        assert!(checksum_delta(&p, &nan).unwrap().delta1[0].is_nan());

        let rows = encode_row_checksums(&Matrix::identity(2));
        assert!(matches!(checksum_delta(&p, &rows), Err(AbftError::AxisMismatch { .. })));
    }

    #[test]
    fn single_corruption_delta_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let c = Matrix::random_uniform(8, 8, -1.0, 1.0, &mut rng);
        let stored = encode_column_checksums(&c);
        let e = roundoff_threshold(8, 1.0, 1.0);
        for i in 0..8 {
            for j in 0..8 {
                let delta: f32 = rng.random_range(-50.0..50.0);
                let mut bad = c.clone();
                bad.set(i, j, c.get(i, j) + delta);
                let d = checksum_delta(&stored, &recompute_checksums(&bad, Axis::Column)).unwrap();
                // brute force: stored - fresh = -(change), weighted by (i+1)
                assert!((d.delta1[j] + delta).abs() <= e * 64.0, "{} vs {}", d.delta1[j], -delta);
                assert!((d.delta2[j] + (i + 1) as f32 * delta).abs() <= e * 64.0 * 8.0);
                for (jj, &d1) in d.delta1.iter().enumerate() {
                    if jj != j {
                        assert_eq!(d1, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn location_rule_exhaustive_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let c = Matrix::random_uniform(8, 8, -1.0, 1.0, &mut rng);
        let stored = encode_column_checksums(&c);
        for delta in [1.0f32, -1.0, 1e3, -1e3, 0.37, 12.5] {
            for i in 0..8 {
                for j in 0..8 {
                    let mut bad = c.clone();
                    bad.set(i, j, c.get(i, j) + delta);
                    let d = checksum_delta(&stored, &recompute_checksums(&bad, Axis::Column)).unwrap();
                    assert_eq!((d.delta2[j] / d.delta1[j]).round() as usize, i + 1);
                }
            }
        }
    }

    #[test]
    fn roundoff_threshold_formula() {
        assert_eq!(roundoff_threshold(1, 1.0, 1.0), 16.0 * 2f32.powi(-23));
        assert_eq!(roundoff_threshold(4, 2.0, 0.5), 64.0 * 2f32.powi(-23));
        let zero = roundoff_threshold(8, 0.0, 0.0);
        assert!(zero > 0.0);
        let enc = encode_pair(&Matrix::zeros(4, 4), &Matrix::zeros(4, 4));
        assert!(enc.delta(Axis::Column, "t", "0").unwrap().violations(zero).is_empty());
    }

    #[test]
    fn roundoff_threshold_calibration_32x32() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst_ratio = 0.0f32;
        for _ in 0..10_000 {
            let a = Matrix::random_uniform(32, 32, -1.0, 1.0, &mut rng);
            let b = Matrix::random_uniform(32, 32, -1.0, 1.0, &mut rng);
            let enc = encode_pair(&a, &b);
            let e = roundoff_threshold(32, a.max_abs(), b.max_abs());
            for axis in [Axis::Column, Axis::Row] {
                let d = enc.delta(axis, "t", "C").unwrap();
                for &x in &d.delta1 {
                    worst_ratio = worst_ratio.max(x.abs() / e);
                }
            }
        }
        assert!(worst_ratio < 1.0, "worst |delta1| / E = {worst_ratio}");
    }

    #[test]
    fn propagated_checksums_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..1000 {
            let m = rng.random_range(1..=64);
            let k = rng.random_range(1..=64);
            let n = rng.random_range(1..=64);
            let a = Matrix::random_uniform(m, k, -1.0, 1.0, &mut rng);
            let b = Matrix::random_uniform(k, n, -1.0, 1.0, &mut rng);
            let enc = encode_pair(&a, &b);
            let e = roundoff_threshold(k, a.max_abs(), b.max_abs());
            for axis in [Axis::Column, Axis::Row] {
                let d = enc.delta(axis, "t", "C").unwrap();
                assert!(d.violations(e).is_empty(), "{m}x{k}x{n} {axis:?}");
            }
        }
    }

    #[test]
    fn encoding_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..200 {
            let a = Matrix::random_uniform(16, 9, -1.0, 1.0, &mut rng);
            let b = Matrix::random_uniform(16, 9, -1.0, 1.0, &mut rng);
            let mut sum = a.clone();
            for (x, y) in sum.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
            let lhs = encode_column_checksums(&sum);
            let rhs = encode_column_checksums(&a).add(&encode_column_checksums(&b)).unwrap();
            let e = roundoff_threshold(16, 2.0, 1.0);
            for (x, y) in lhs.unweighted.iter().zip(&rhs.unweighted) {
                assert!((x - y).abs() <= e);
            }
            for (x, y) in lhs.weighted.iter().zip(&rhs.weighted) {
                assert!((x - y).abs() <= e * 16.0);
            }
        }
    }
}
