use super::error::{NumericsError, Result};
use super::float::Float;
use super::graph::{log_softmax_at, log_sum_exp};
use super::tensor::Tensor;

/// Cross-entropy target: a class index or a full distribution.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a, T: Float> {
    Index(usize),
    Dist(&'a [T]),
}

/// `-log softmax(logits)[i]` for an index, `-sum p log softmax(logits)` for a distribution.
pub fn cross_entropy<T: Float>(logits: &Tensor<T>, target: Target<'_, T>) -> Result<T> {
    let row = logits.data();
    match target {
        Target::Index(i) => {
            if i >= row.len() {
                return Err(NumericsError::Index {
                    op: "cross_entropy",
                    index: i,
                    extent: row.len(),
                });
            }
            Ok(-log_softmax_at(row, i))
        }
        Target::Dist(p) => {
            if p.len() != row.len() {
                return Err(super::shape_err(
                    "cross_entropy",
                    format!("{} logits, {} probabilities", row.len(), p.len()),
                ));
            }
            let sum: f64 = p.iter().map(|x| x.as_f64()).sum();
            if (sum - 1.0).abs() > 1e-6 || p.iter().any(|x| *x < T::zero()) {
                return Err(NumericsError::NotNormalized { sum });
            }
            let lse = log_sum_exp(row);
            let mut loss = T::zero();
            for (x, q) in row.iter().zip(p) {
                if *q != T::zero() {
                    loss -= *q * (*x - lse);
                }
            }
            Ok(loss)
        }
    }
}
