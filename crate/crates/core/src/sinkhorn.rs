//! Cluster-assignment targets by repeated row/column normalization.
//!
//! Raw scores are dot products in `[-1, 1]`, so they are first mapped to
//! strictly positive values with `exp(score / epsilon)`. Every function
//! here works on plain `f64` matrices and never touches a gradient tape.

use crate::error::{Error, Result};
use crate::ndmath::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_ITERATIONS: usize = 3;

/// Largest exponent accepted by [`positify`].
pub const MAX_EXPONENT: f64 = 700.0;

fn check_unit_rows<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    for i in 0..t.rows() {
        let norm = t.row(i).iter().map(|&x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 || !norm.is_finite() {
            return Err(Error::NotNormalized { row: i, norm });
        }
    }
    Ok(())
}

/// `scores[i][j] = embeddings[i] · prototypes[j]` for unit-norm rows.
pub fn score_matrix<T: Scalar>(embeddings: &Tensor<T>, prototypes: &Tensor<T>) -> Result<Tensor<f64>> {
    check_unit_rows(embeddings)?;
    check_unit_rows(prototypes)?;
    if embeddings.row_len() != prototypes.row_len() {
        return Err(Error::shape(format!(
            "embedding width {} differs from prototype width {}",
            embeddings.row_len(),
            prototypes.row_len()
        )));
    }
    let (b, k, d) = (embeddings.rows(), prototypes.rows(), embeddings.row_len());
    Ok(Tensor::from_fn(&[b, k], |idx| {
        let (i, j) = (idx / k, idx % k);
        (0..d)
            .map(|c| embeddings.row(i)[c].as_f64() * prototypes.row(j)[c].as_f64())
            .sum()
    }))
}

/// Elementwise `exp(c / epsilon)`.
pub fn positify(scores: &Tensor<f64>, epsilon: f64) -> Result<Tensor<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::ConfigInvalid(vec![format!(
            "epsilon must be positive, got {epsilon}"
        )]));
    }
    let mut out = scores.clone();
    for x in out.data_mut() {
        let e = *x / epsilon;
        if e > MAX_EXPONENT || e.is_nan() {
            return Err(Error::Overflow(e));
        }
        *x = e.exp();
    }
    Ok(out)
}

fn check_positive(t: &Tensor<f64>) -> Result<()> {
    if t.data().iter().all(|&x| x > 0.0 && x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonPositive)
    }
}

/// Divide each entry by its row sum times the row count; rows then sum to
/// `1 / rows`.
pub fn row_norm(t: &Tensor<f64>) -> Result<Tensor<f64>> {
    check_positive(t)?;
    let rows = t.rows() as f64;
    let mut out = t.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let s: f64 = row.iter().sum::<f64>() * rows;
        row.iter_mut().for_each(|x| *x /= s);
    }
    Ok(out)
}

/// Divide each entry by its column sum times the column count; columns
/// then sum to `1 / cols`.
pub fn col_norm(t: &Tensor<f64>) -> Result<Tensor<f64>> {
    check_positive(t)?;
    let (r, c) = (t.rows(), t.row_len());
    let mut sums = vec![0.0; c];
    for i in 0..r {
        for (s, &x) in sums.iter_mut().zip(t.row(i)) {
            *s += x;
        }
    }
    let mut out = t.clone();
    for i in 0..r {
        for (x, &s) in out.row_mut(i).iter_mut().zip(&sums) {
            *x /= s * c as f64;
        }
    }
    Ok(out)
}

/// One row normalization followed by one column normalization.
pub fn dou(t: &Tensor<f64>) -> Result<Tensor<f64>> {
    col_norm(&row_norm(t)?)
}

/// `dou` applied `iterations` times to `positify(scores, epsilon)`.
pub fn assignment_targets(scores: &Tensor<f64>, iterations: usize, epsilon: f64) -> Result<Tensor<f64>> {
    let mut t = positify(scores, epsilon)?;
    for _ in 0..iterations {
        t = dou(&t)?;
    }
    Ok(t)
}

pub fn row_sums(t: &Tensor<f64>) -> Vec<f64> {
    (0..t.rows()).map(|i| t.row(i).iter().sum()).collect()
}

pub fn col_sums(t: &Tensor<f64>) -> Vec<f64> {
    let mut sums = vec![0.0; t.row_len()];
    for i in 0..t.rows() {
        for (s, &x) in sums.iter_mut().zip(t.row(i)) {
            *s += x;
        }
    }
    sums
}
