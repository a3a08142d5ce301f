//! Numerically stable softmax + cross-entropy, mean-reduced over the batch.

use crate::error::{Error, Result};
use crate::tensor::{dims2, ec, Elem, Tensor};

/// Returns (mean loss, softmax probabilities saved for backward).
pub fn softmax_xent_forward<E: Elem>(
    logits: &Tensor<E>,
    labels: &[u32],
) -> Result<(E, Vec<E>)> {
    let (b, k) = dims2(logits.shape(), "softmax_xent")?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "softmax_xent labels",
            expected: vec![b],
            got: vec![labels.len()],
        });
    }
    let ld = logits.data();
    let mut probs = vec![E::zero(); b * k];
    let mut loss = E::zero();
    for (bi, row) in ld.chunks_exact(k).enumerate() {
        let y = labels[bi] as usize;
        if y >= k {
            return Err(Error::BadDimension {
                op: "softmax_xent",
                detail: format!("label {y} out of range for {k} classes"),
            });
        }
        let mut mx = row[0];
        for v in row {
            if *v > mx {
                mx = *v;
            }
        }
        let mut denom = E::zero();
        for v in row {
            denom = denom + (*v - mx).exp();
        }
        let lse = mx + denom.ln();
        loss = loss + (lse - row[y]);
        let p = &mut probs[bi * k..(bi + 1) * k];
        for (pi, v) in p.iter_mut().zip(row) {
            *pi = (*v - lse).exp();
        }
    }
    Ok((loss / ec::<E>(b as f64), probs))
}

/// dLogits for upstream gradient `dloss` (a scalar, normally 1).
pub fn softmax_xent_backward<E: Elem>(
    probs: &[E],
    labels: &[u32],
    classes: usize,
    dloss: E,
) -> Tensor<E> {
    let b = labels.len();
    let scale = dloss / ec::<E>(b as f64);
    let mut dl = probs.to_vec();
    for (bi, row) in dl.chunks_exact_mut(classes).enumerate() {
        let y = labels[bi] as usize;
        row[y] = row[y] - E::one();
        for v in row.iter_mut() {
            *v = *v * scale;
        }
    }
    Tensor::new(vec![b, classes], dl).expect("probs sized b*k")
}
