//! Scaled dot-product and multi-head attention.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;

/// `softmax(Q Kᵀ / √d_k) V` with masked keys excluded from the softmax.
pub fn scaled_dot_attention_on(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let d_k = tape.value(q).cols;
    let logits = tape.matmul_t(q, k);
    let logits = tape.scale(logits, 1.0 / (d_k as f64).sqrt());
    let weights = tape.masked_softmax(logits, key_mask)?;
    Ok(tape.matmul(weights, v))
}

/// Splits the already-projected `q`, `k`, `v` into `n_heads` column slices,
/// attends per head and concatenates the head outputs.
pub fn multi_head_on(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let width = tape.value(q).cols;
    if n_heads == 0 || width % n_heads != 0 {
        return Err(Error::shape(
            "multi_head",
            format!("width {width} not divisible by {n_heads} heads"),
        ));
    }
    if n_heads == 1 {
        return scaled_dot_attention_on(tape, q, k, v, key_mask);
    }
    let d_k = width / n_heads;
    let heads = (0..n_heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * d_k, d_k);
            let kh = tape.slice_cols(k, h * d_k, d_k);
            let vh = tape.slice_cols(v, h * d_k, d_k);
            scaled_dot_attention_on(tape, qh, kh, vh, key_mask)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.concat_cols(&heads))
}

/// Standalone attention over plain matrices. `mask[j] == 0` excludes key `j`.
pub fn scaled_dot_attention(q: &Mat, k: &Mat, v: &Mat, mask: &[u8]) -> Result<Mat> {
    if q.cols != k.cols || k.rows != v.rows || mask.len() != k.rows {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!(
                "Q {:?}, K {:?}, V {:?}, mask {}",
                q.shape(),
                k.shape(),
                v.shape(),
                mask.len()
            ),
        ));
    }
    let keep: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = scaled_dot_attention_on(&mut tape, qv, kv, vv, Some(&keep))?;
    Ok(tape.value(out).clone())
}

/// Attention weights alone, for inspecting row sums.
pub fn attention_weights(q: &Mat, k: &Mat, mask: &[u8]) -> Result<Mat> {
    let keep: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let logits = tape.matmul_t(qv, kv);
    let logits = tape.scale(logits, 1.0 / (q.cols as f64).sqrt());
    let w = tape.masked_softmax(logits, Some(&keep))?;
    Ok(tape.value(w).clone())
}
