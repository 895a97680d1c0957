//! Differentiable computation core.
//!
//! A small reverse-mode autodiff engine over an explicit, replayable graph,
//! the primitive operations the seq2seq model is built from, a counter-based
//! RNG with named sub-streams, and a central-difference gradient checker.

mod gradcheck;
mod graph;
mod real;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_graph, grad_check_params, GradCheckReport};
pub use graph::{AttentionMask, Gradients, Graph, NodeId, ParamId, ParamSet};
pub use real::Real;
pub use rng::RngState;
pub use tensor::Tensor;

use thiserror::Error;

/// Floor applied to every argument of `log`.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("graph has not been evaluated; call forward first")]
    NotEvaluated,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

/// Numerically stable softmax of a single slice.
pub fn softmax<T: Real>(logits: &[T]) -> Result<Vec<T>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite { op: "softmax" });
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Softmax along `axis` of an arbitrary-rank tensor.
pub fn softmax_axis<T: Real>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if axis >= shape.len() {
        return Err(NumericsError::Shape(format!("axis {axis} out of range for rank {}", shape.len())));
    }
    if logits.data().iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite { op: "softmax" });
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let src = logits.data();
    let mut out = vec![T::zero(); src.len()];
    let mut buf = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = src[(o * len + j) * inner + i];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out[(o * len + j) * inner + i] = *b;
            }
        }
    }
    Ok(Tensor::new(shape.to_vec(), out))
}

/// Logistic function, kept strictly inside (0, 1) even where it saturates.
pub fn sigmoid<T: Real>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    s.max(T::min_positive_value()).min(T::one() - T::epsilon() / T::lit(2.0))
}

/// `-log(max(probs[target], 1e-12))`.
pub fn cross_entropy<T: Real>(probs: &[T], target: usize) -> Result<T> {
    let p = probs.get(target).ok_or(NumericsError::IndexOutOfRange { index: target, len: probs.len() })?;
    Ok(-safe_ln(*p))
}

pub(crate) fn safe_ln<T: Real>(x: T) -> T {
    x.max(T::lit(LOG_FLOOR)).ln()
}
