//! Vector similarity helpers. Everything is accumulated in `f64`.

use crate::error::{KecoError, Result};

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn euclidean(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// `u·v / (‖u‖‖v‖)`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(KecoError::InvalidConfig(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(KecoError::ZeroNormVector("<operand>".into()));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Cosine against a query whose norm is known to be positive. A key that has
/// drifted to the origin scores 0.
pub(crate) fn cosine_with_query(key: &[f64], query: &[f64], query_norm: f64) -> f64 {
    let nk = norm(key);
    if nk == 0.0 {
        0.0
    } else {
        dot(key, query) / (nk * query_norm)
    }
}
