//! Numerically stable primitives: temperature softmax, log-sum-exp, L2
//! normalization and its Jacobian, cosine similarity, confidence intervals.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

/// Norms below this are rejected rather than clamped.
pub const NORM_FLOOR: f64 = 1e-12;

fn check_temperature<T: Scalar>(tau: T) -> Result<()> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::config(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

fn check_finite<T: Scalar>(values: &[T], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::numeric(format!(
            "{what} has non-finite entry {} at index {i}",
            values[i]
        )));
    }
    Ok(())
}

/// `log Σ exp(x)`, shifted by the maximum. Empty input gives `-inf`.
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> T {
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let sum: T = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `softmax(logits / tau)`.
pub fn softmax_with_temperature<T: Scalar>(logits: &[T], tau: T) -> Result<Vec<T>> {
    check_temperature(tau)?;
    check_finite(logits, "logits")?;
    if logits.is_empty() {
        return Err(Error::shape("at least one logit", "none"));
    }
    let scaled: Vec<T> = logits.iter().map(|&z| z / tau).collect();
    let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = scaled.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

fn checked_norm<T: Scalar>(v: &[T]) -> Result<T> {
    check_finite(v, "vector")?;
    let n = norm(v);
    if n < T::lit(NORM_FLOOR) {
        return Err(Error::Degenerate(format!(
            "vector norm {n} is below the floor {NORM_FLOOR}"
        )));
    }
    Ok(n)
}

/// `f / ||f||`; zero-norm input is an error.
pub fn l2_normalize<T: Scalar>(f: &[T]) -> Result<Vec<T>> {
    let n = checked_norm(f)?;
    Ok(f.iter().map(|&x| x / n).collect())
}

/// Jacobian of [`l2_normalize`] at `f`: `(I - e eᵀ) / ||f||`.
pub fn normalize_jacobian<T: Scalar>(f: &[T]) -> Result<Matrix<T>> {
    let n = checked_norm(f)?;
    let d = f.len();
    let e: Vec<T> = f.iter().map(|&x| x / n).collect();
    let mut j = Matrix::zeros(d, d);
    for r in 0..d {
        for c in 0..d {
            let delta = if r == c { T::one() } else { T::zero() };
            j[(r, c)] = (delta - e[r] * e[c]) / n;
        }
    }
    Ok(j)
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape(
            format!("length {}", a.len()),
            format!("length {}", b.len()),
        ));
    }
    let na = checked_norm(a)?;
    let nb = checked_norm(b)?;
    Ok(dot(a, b) / (na * nb))
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy in nats.
pub fn entropy<T: Scalar>(p: &[T]) -> T {
    p.iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| -x * x.ln())
        .sum()
}

/// Sample mean and the normal-approximation 95% half-width
/// `1.96 · s / √n`, with `s` the (n−1)-denominator standard deviation.
pub fn mean_and_ci95<T: Scalar>(values: &[T]) -> Result<(T, T)> {
    if values.len() < 2 {
        return Err(Error::protocol(format!(
            "a confidence interval needs at least 2 values, got {}",
            values.len()
        )));
    }
    check_finite(values, "sample")?;
    let n = T::from_usize_lossy(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    let ss: T = values.iter().map(|&v| (v - mean) * (v - mean)).sum();
    let sd = (ss / (n - T::one())).sqrt();
    Ok((mean, T::lit(1.96) * sd / n.sqrt()))
}
