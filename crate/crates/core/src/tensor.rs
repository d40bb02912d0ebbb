//! Dense f32 kernels with a fixed accumulation order.
//!
//! Every reduction runs left to right over its index, so two computations
//! that visit the same operands produce bit-identical results regardless of
//! batch shape or execution mode.

use crate::par::{self, Exec};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("softmax row has no visible entries")]
    EmptyVisibleSet,
    #[error("rotary embedding needs an even head dimension, got {0}")]
    OddHeadDim(usize),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies the selected rows, in the given order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `a × b` using the default execution mode.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    matmul_with(Exec::default(), a, b)
}

/// `a × b`. Each output entry accumulates over the shared index in ascending
/// order; rows are independent, which is what `exec` parallelizes over.
pub fn matmul_with(exec: Exec, a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if a.cols != b.rows {
        return Err(TensorError::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    if b.cols == 0 {
        return Ok(out);
    }
    par::for_each_chunk_mut(exec, &mut out.data, b.cols, |i, out_row| {
        vec_mat_into(a.row(i), b, out_row);
    });
    Ok(out)
}

/// `out = x × b` for a single row vector.
pub(crate) fn vec_mat_into(x: &[f32], b: &Matrix, out: &mut [f32]) {
    debug_assert_eq!(x.len(), b.rows);
    debug_assert_eq!(out.len(), b.cols);
    out.fill(0.0);
    for (k, &xk) in x.iter().enumerate() {
        let brow = b.row(k);
        for (o, &bkj) in out.iter_mut().zip(brow) {
            *o += xk * bkj;
        }
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    // eight independent lanes so the loop vectorizes
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

/// Plain softmax of a non-empty slice, in place.
pub(crate) fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the visible entries only; invisible entries come out as
/// exactly zero and never influence the max or the normalizer.
pub fn masked_softmax_row(scores: &[f32], visible: &[bool]) -> Result<Vec<f32>, TensorError> {
    let mut out = vec![0.0; scores.len()];
    masked_softmax_into(scores, visible, &mut out)?;
    Ok(out)
}

pub(crate) fn masked_softmax_into(
    scores: &[f32],
    visible: &[bool],
    out: &mut [f32],
) -> Result<(), TensorError> {
    if scores.len() != visible.len() || out.len() != scores.len() {
        return Err(TensorError::Shape(format!(
            "softmax over {} scores with {} mask entries",
            scores.len(),
            visible.len()
        )));
    }
    let mut max = f32::NEG_INFINITY;
    let mut any = false;
    for (&s, &v) in scores.iter().zip(visible) {
        if v {
            any = true;
            if s > max {
                max = s;
            }
        }
    }
    if !any {
        return Err(TensorError::EmptyVisibleSet);
    }
    let mut sum = 0.0f32;
    for ((o, &s), &v) in out.iter_mut().zip(scores).zip(visible) {
        if v {
            let e = (s - max).exp();
            *o = e;
            sum += e;
        } else {
            *o = 0.0;
        }
    }
    for (o, &v) in out.iter_mut().zip(visible) {
        if v {
            *o /= sum;
        }
    }
    Ok(())
}

/// `gain_i · x_i / sqrt(mean(x²) + eps)`. An all-zero input maps to zero even
/// when `eps` is zero.
pub fn rms_norm(x: &[f32], gain: &[f32], eps: f32) -> Result<Vec<f32>, TensorError> {
    let mut out = vec![0.0; x.len()];
    rms_norm_into(x, gain, eps, &mut out)?;
    Ok(out)
}

pub(crate) fn rms_norm_into(
    x: &[f32],
    gain: &[f32],
    eps: f32,
    out: &mut [f32],
) -> Result<(), TensorError> {
    if x.len() != gain.len() || out.len() != x.len() {
        return Err(TensorError::Shape(format!(
            "rms_norm over {} values with {} gains",
            x.len(),
            gain.len()
        )));
    }
    if x.is_empty() {
        return Ok(());
    }
    let mut ss = 0.0f32;
    for v in x {
        ss += v * v;
    }
    let denom = (ss / x.len() as f32 + eps).sqrt();
    if denom == 0.0 {
        out.fill(0.0);
        return Ok(());
    }
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * v / denom;
    }
    Ok(())
}

/// Rotates consecutive pairs `(2i, 2i+1)` of every head in `x` by
/// `position · theta_base^(−2i/d_head)`. `position` is the token's absolute
/// sequence index.
pub fn rope_apply(
    x: &mut [f32],
    d_head: usize,
    position: usize,
    theta_base: f32,
) -> Result<(), TensorError> {
    if d_head == 0 || !d_head.is_multiple_of(2) {
        return Err(TensorError::OddHeadDim(d_head));
    }
    if !x.len().is_multiple_of(d_head) {
        return Err(TensorError::Shape(format!(
            "{} values is not a whole number of {d_head}-wide heads",
            x.len()
        )));
    }
    let pos = position as f64;
    for head in x.chunks_mut(d_head) {
        for i in 0..d_head / 2 {
            let freq = (theta_base as f64).powf(-2.0 * i as f64 / d_head as f64);
            let (sin, cos) = (pos * freq).sin_cos();
            let (sin, cos) = (sin as f32, cos as f32);
            let a = head[2 * i];
            let b = head[2 * i + 1];
            head[2 * i] = a * cos - b * sin;
            head[2 * i + 1] = a * sin + b * cos;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 2, 5);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        assert_eq!(matmul(&m, &Matrix::identity(5)).unwrap(), m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_matrix(&mut rng, 3, 4);
        let z = matmul(&Matrix::zeros(2, 3), &m).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, TensorError::Shape(_)));
    }

    #[test]
    fn matmul_bit_identical_across_modes_and_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 17, 9);
        let b = random_matrix(&mut rng, 9, 13);
        let s = matmul_with(Exec::Sequential, &a, &b).unwrap();
        let p = matmul_with(Exec::Parallel, &a, &b).unwrap();
        assert_eq!(s, p);
        assert_eq!(s, matmul_with(Exec::Sequential, &a, &b).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let u = masked_softmax_row(&[0.0, 0.0, 0.0], &[true; 3]).unwrap();
        for w in u {
            assert!((w - 1.0 / 3.0).abs() < 1e-7);
        }
        assert_eq!(masked_softmax_row(&[42.0], &[true]).unwrap(), vec![1.0]);
        let r = masked_softmax_row(&[2f32.ln(), 0.0], &[true, true]).unwrap();
        assert!((r[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((r[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_errors() {
        assert_eq!(
            masked_softmax_row(&[1.0, 2.0], &[false, false]),
            Err(TensorError::EmptyVisibleSet)
        );
        assert!(matches!(masked_softmax_row(&[1.0], &[true, true]), Err(TensorError::Shape(_))));
    }

    #[test]
    fn softmax_ignores_masked_magnitudes() {
        // a huge masked score must not affect the stabilizer
        let r = masked_softmax_row(&[1e30, 0.0, 0.0], &[false, true, true]).unwrap();
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn rms_norm_examples() {
        assert_eq!(rms_norm(&[0.0; 4], &[1.0; 4], 1e-6).unwrap(), vec![0.0; 4]);
        assert_eq!(rms_norm(&[0.0; 4], &[1.0; 4], 0.0).unwrap(), vec![0.0; 4]);
        assert_eq!(rms_norm(&[1.0; 4], &[1.0; 4], 0.0).unwrap(), vec![1.0; 4]);
        assert!(rms_norm(&[1.0; 4], &[1.0; 3], 0.0).is_err());
    }

    #[test]
    fn rope_examples() {
        let mut v = vec![0.3, -0.7, 1.1, 0.2];
        let orig = v.clone();
        rope_apply(&mut v, 4, 0, 10000.0).unwrap();
        assert_eq!(v, orig);

        let mut v = vec![1.0, 0.0];
        rope_apply(&mut v, 2, 1, 10000.0).unwrap();
        assert!((v[0] - 1f32.cos()).abs() < 1e-7);
        assert!((v[1] - 1f32.sin()).abs() < 1e-7);

        assert_eq!(rope_apply(&mut [0.0; 3], 3, 1, 10000.0), Err(TensorError::OddHeadDim(3)));
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_masked(
            row in prop::collection::vec((-30.0f32..30.0, any::<bool>()), 1..40)
        ) {
            let (scores, mut visible): (Vec<f32>, Vec<bool>) = row.into_iter().unzip();
            visible[0] = true;
            let out = masked_softmax_row(&scores, &visible).unwrap();
            let sum: f32 = out.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            for (w, v) in out.iter().zip(&visible) {
                if *v { prop_assert!(*w >= 0.0); } else { prop_assert_eq!(*w, 0.0); }
            }
        }

        #[test]
        fn rms_norm_scale_invariant(
            x in prop::collection::vec(-10.0f32..10.0, 1..32),
            c in 0.1f32..10.0,
        ) {
            prop_assume!(x.iter().any(|v| v.abs() > 1e-2));
            let g = vec![1.0; x.len()];
            let a = rms_norm(&x, &g, 0.0).unwrap();
            let scaled: Vec<f32> = x.iter().map(|v| v * c).collect();
            let b = rms_norm(&scaled, &g, 0.0).unwrap();
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() <= 1e-4);
            }
        }

        #[test]
        fn rope_relative_position(seed in any::<u64>(), m in 0usize..512, n in 0usize..512, shift in 0usize..512) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 16;
            let q: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let score = |pm: usize, pn: usize| {
                let (mut qm, mut kn) = (q.clone(), k.clone());
                rope_apply(&mut qm, d, pm, 10000.0).unwrap();
                rope_apply(&mut kn, d, pn, 10000.0).unwrap();
                dot(&qm, &kn)
            };
            prop_assert!((score(m, n) - score(m + shift, n + shift)).abs() <= 1e-5);
        }
    }
}
