//! Dense `f64` vector helpers used by the rules and the optimizer.

use crate::error::{Error, Result};

pub fn check_dim(expected: usize, v: &[f64]) -> Result<()> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(Error::shape(expected, v.len()))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(c: f64, a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| c * x).collect()
}

/// `a * x + b * y`, elementwise.
pub fn lincomb(a: f64, x: &[f64], b: f64, y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(xi, yi)| a * xi + b * yi).collect()
}

/// Cosine similarity; `None` when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let denom = norm(a) * norm(b);
    if denom > 0.0 {
        Some(dot(a, b) / denom)
    } else {
        None
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Norm of the sub-vector selected by `dims`.
pub fn norm_over(a: &[f64], dims: impl IntoIterator<Item = usize>) -> f64 {
    dims.into_iter().map(|i| a[i] * a[i]).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_of_zero_is_none() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
        assert_eq!(cosine(&[2.0, 0.0], &[1.0, 0.0]), Some(1.0));
    }

    #[test]
    fn lincomb_matches_manual() {
        assert_eq!(lincomb(2.0, &[1.0, 2.0], -1.0, &[3.0, 1.0]), vec![-1.0, 3.0]);
    }

    #[test]
    fn check_dim_reports_both_sizes() {
        match check_dim(3, &[1.0]) {
            Err(Error::Shape { expected, got }) => assert_eq!((expected, got), (3, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
