//! Reference numerics for the encoder: softmax, scaled dot-product attention,
//! layer norm and GELU, all in f64.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Max-subtracted softmax.
pub fn softmax(x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if x.is_empty() {
        return Err(Error::domain("softmax of an empty vector"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("softmax input has non-finite entries"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = x.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    Ok(exps / sum)
}

/// Row-wise softmax in place. Rows are assumed finite.
pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// `Softmax(Q K^T / sqrt(d)) V` for a single head.
///
/// `d` is the dimension used in the scaling; callers choose between the full
/// embedding width and the head width.
pub fn attention_head(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    d: usize,
) -> Result<Array2<f64>> {
    if d == 0 {
        return Err(Error::domain(
            "attention scaling dimension must be positive",
        ));
    }
    if q.ncols() != k.ncols() {
        return Err(Error::domain(format!(
            "Q has {} columns but K has {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::domain(format!(
            "K has {} rows but V has {}",
            k.nrows(),
            v.nrows()
        )));
    }
    if q.nrows() == 0 || k.nrows() == 0 {
        return Err(Error::domain("attention over zero tokens"));
    }
    let mut scores = q.dot(&k.t()) / (d as f64).sqrt();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::domain("attention scores are not finite"));
    }
    softmax_rows(&mut scores);
    Ok(scores.dot(&v))
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

pub(crate) fn layer_norm(
    x: ArrayView2<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    beta: ArrayView1<'_, f64>,
) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

/// tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn affine(x: ArrayView2<'_, f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += &b.view().insert_axis(Axis(0));
    y
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn softmax_examples() {
        let s = softmax(array![0.0, 0.0].view()).unwrap();
        assert_eq!(s, array![0.5, 0.5]);

        // Reference values from a standalone numpy evaluation.
        let s = softmax(array![1.0, 2.0, 3.0].view()).unwrap();
        for (got, want) in s.iter().zip([0.090_030_57, 0.244_728_47, 0.665_240_96]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-8);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(array![1.0, f64::NAN].view()).is_err());
        assert!(softmax(array![f64::INFINITY].view()).is_err());
        assert!(softmax(Array1::<f64>::zeros(0).view()).is_err());
    }

    #[test]
    fn attention_examples() {
        let one = array![[1.0]];
        let out = attention_head(one.view(), one.view(), one.view(), 1).unwrap();
        assert_eq!(out, array![[1.0]]);

        let q = array![[1.0], [0.0]];
        let v = array![[2.0], [4.0]];
        let out = attention_head(q.view(), q.view(), v.view(), 4).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], 2.755_081_34, epsilon = 1e-8);
        assert_abs_diff_eq!(out[[1, 0]], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_attention_gives_column_mean() {
        let q = Array2::<f64>::zeros((3, 2));
        let k = Array2::<f64>::zeros((3, 2));
        let v = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let out = attention_head(q.view(), k.view(), v.view(), 8).unwrap();
        for x in out.iter() {
            assert_abs_diff_eq!(*x, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn attention_shape_errors() {
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((2, 2));
        let c = Array2::<f64>::zeros((3, 3));
        assert!(attention_head(a.view(), b.view(), b.view(), 4).is_err());
        assert!(attention_head(b.view(), b.view(), c.view(), 4).is_err());
        assert!(attention_head(b.view(), b.view(), b.view(), 0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            xs in prop::collection::vec(-50.0f64..50.0, 1..16),
            c in -100.0f64..100.0,
        ) {
            let x = Array1::from(xs);
            let s = softmax(x.view()).unwrap();
            prop_assert!((s.sum() - 1.0).abs() < 1e-9);
            prop_assert!(s.iter().all(|p| *p > 0.0));
            let shifted = softmax((&x + c).view()).unwrap();
            for (a, b) in s.iter().zip(shifted.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn attention_rows_bounded_by_value_rows(
            seed in prop::collection::vec(-3.0f64..3.0, 36),
        ) {
            let q = Array2::from_shape_vec((3, 4), seed[..12].to_vec()).unwrap();
            let k = Array2::from_shape_vec((3, 4), seed[12..24].to_vec()).unwrap();
            let v = Array2::from_shape_vec((3, 4), seed[24..].to_vec()).unwrap();
            let out = attention_head(q.view(), k.view(), v.view(), 16).unwrap();
            let norm = |r: ArrayView1<'_, f64>| r.dot(&r).sqrt();
            let max_v = v.rows().into_iter().map(norm).fold(0.0, f64::max);
            for row in out.rows() {
                prop_assert!(norm(row) <= max_v + 1e-9);
            }
        }
    }
}
