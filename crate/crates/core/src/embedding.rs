use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// A condition or identity embedding vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(shape_err("embedding must have at least one entry"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding contains non-finite entries".into()));
        }
        Ok(Self(values))
    }

    /// Scales to unit Euclidean norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Numeric("cannot normalize a zero-norm embedding".into()));
        }
        Self::new(values.into_iter().map(|v| v / norm).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn cosine(&self, other: &Embedding) -> Result<f64> {
        cosine(&self.0, &other.0)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err(format!(
            "cosine of vectors with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine of a zero-norm vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Gradient of `cos(a, b)` with respect to `a`.
pub fn cosine_grad_a(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let cos = cosine(a, b)?;
    let (na, nb) = (l2_norm(a), l2_norm(b));
    Ok(a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - cos * x / (na * na))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_and_cosine() {
        let e = Embedding::normalized(vec![3.0, 4.0]).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-15);
        assert!(Embedding::normalized(vec![0.0, 0.0]).is_err());
        assert!(cosine(&[1.0, 0.0], &[0.0, 0.0]).is_err());
        assert!((cosine(&[1.0, 0.0], &[-2.0, 0.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_gradient_matches_central_difference() {
        let a = [0.3, -1.2, 0.7];
        let b = [1.1, 0.4, -0.5];
        let g = cosine_grad_a(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut ap = a;
            let mut am = a;
            ap[i] += h;
            am[i] -= h;
            let fd = (cosine(&ap, &b).unwrap() - cosine(&am, &b).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
