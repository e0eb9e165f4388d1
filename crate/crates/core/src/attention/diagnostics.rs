//! Head-diversity metrics over a stack of per-head attention maps `[H, R, C]`.

use crate::error::{Error, Result};
use crate::tensor::{ops, Scalar, Tensor};

fn heads_of<T: Scalar>(op: &'static str, stack: &Tensor<T>) -> Result<(usize, usize)> {
    if stack.rank() != 3 {
        return Err(Error::shape(op, format!("expected [H, R, C], got {:?}", stack.shape())));
    }
    let heads = stack.shape()[0];
    Ok((heads, stack.len() / heads))
}

/// Population variance across the head axis, averaged over all `R·C` entries.
pub fn head_variance<T: Scalar>(stack: &Tensor<T>) -> Result<f64> {
    heads_of("head_variance", stack)?;
    let var = ops::variance_over_axis(stack, 0)?;
    Ok(ops::mean_all(&var).max(0.0))
}

/// Mean cosine similarity over all unordered pairs of flattened heads.
pub fn cross_head_similarity<T: Scalar>(stack: &Tensor<T>) -> Result<f64> {
    const OP: &str = "cross_head_similarity";
    let (heads, plane) = heads_of(OP, stack)?;
    if heads < 2 {
        return Err(Error::invalid(OP, "needs at least two heads"));
    }
    let flat: Vec<Tensor<T>> = stack
        .data()
        .chunks(plane)
        .map(|h| Tensor::from_parts(vec![plane], h.to_vec()))
        .collect();
    if let Some(i) = flat.iter().position(|h| h.data().iter().all(|v| v.is_zero())) {
        return Err(Error::invalid(OP, format!("head {i} is all zeros")));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..heads {
        for j in i + 1..heads {
            total += ops::cosine_similarity(&flat[i], &flat[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
