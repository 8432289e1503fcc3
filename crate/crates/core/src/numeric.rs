//! Scalar kernels shared by the eager API and the differentiable graph.

use crate::error::{Error, Result};
use crate::tensor::{dot, norm};

/// Floor applied to vector norms inside cosine similarity.
pub const NORM_EPS: f64 = 1e-8;

/// Floor applied to `q` inside the KL logarithm.
pub const KL_EPS: f64 = 1e-12;

/// Tolerance on `Σp = 1` when validating a distribution argument.
pub const DISTRIBUTION_TOL: f64 = 1e-6;

/// Cosine similarity with the norm floor `NORM_EPS`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim("cosine_similarity", a.len().max(1), b.len()));
    }
    Ok(cosine_guarded(a, b))
}

/// Cosine similarity without the norm floor; zero-norm input is an error.
pub fn cosine_similarity_strict(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim("cosine_similarity", a.len().max(1), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("cosine_similarity", "zero-norm input"));
    }
    Ok(dot(a, b) / (na * nb))
}

pub(crate) fn cosine_guarded(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a).max(NORM_EPS) * norm(b).max(NORM_EPS))
}

/// `softmax(r · scores)`, computed with max-subtraction.
pub fn scaled_softmax(scores: &[f64], r: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::dim("scaled_softmax", "N >= 1", 0));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::domain("scaled_softmax", format!("scale must be positive, got {r}")));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::domain(
            "scaled_softmax",
            format!("score {i} is {}", scores[i]),
        ));
    }
    let scaled: Vec<f64> = scores.iter().map(|s| r * s).collect();
    let mut out = vec![0.0; scaled.len()];
    softmax_into(&scaled, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `D_KL(p || q)` with `q` clamped to `KL_EPS` and `0 · log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    validate_distribution("kl_divergence", p)?;
    validate_distribution("kl_divergence", q)?;
    if p.len() != q.len() {
        return Err(Error::dim("kl_divergence", p.len(), q.len()));
    }
    Ok(kl_clamped(p, q))
}

/// `D_KL(p || q)` without clamping; a zero `q_i` under positive `p_i` is an error.
pub fn kl_divergence_strict(p: &[f64], q: &[f64]) -> Result<f64> {
    validate_distribution("kl_divergence", p)?;
    validate_distribution("kl_divergence", q)?;
    if p.len() != q.len() {
        return Err(Error::dim("kl_divergence", p.len(), q.len()));
    }
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi == 0.0 {
                return Err(Error::domain(
                    "kl_divergence",
                    format!("q[{i}] is zero where p[{i}] = {pi}"),
                ));
            }
            acc += pi * (pi / qi).ln();
        }
    }
    Ok(acc)
}

pub(crate) fn kl_clamped(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_EPS)).ln())
        .sum()
}

pub(crate) fn validate_distribution(op: &'static str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::dim(op, "non-empty distribution", 0));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::domain(op, "distribution has a negative or non-finite component"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::domain(op, format!("distribution sums to {s}")));
    }
    Ok(())
}
