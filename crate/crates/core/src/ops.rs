//! Eager versions of the core kernels for callers that do not need gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Heads};
use crate::tensor::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

/// Row-wise softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    crate::tensor::softmax(x)
}

pub fn rmsnorm(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(weight.clone()));
    let y = g.rmsnorm(xv, wv)?;
    Ok(g.value(y).clone())
}

/// Single-head causal attention with rotary embedding. Query row `i` sits at
/// absolute position `position_offset + i` and sees keys `0..=position_offset + i`.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, position_offset: usize) -> Result<Tensor> {
    let (tq, d) = q.dims2()?;
    let tk = k.rows();
    if tk < position_offset + 1 {
        return Err(Error::CacheUnderrun { query_position: position_offset });
    }
    if k.cols() != d || v.cols() != d || v.rows() != tk || d % 2 != 0 {
        return Err(Error::Dimension(format!("attention q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape())));
    }
    let q_pos: Vec<usize> = (position_offset..position_offset + tq).collect();
    let k_pos: Vec<usize> = (0..tk).collect();
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let qr = g.rope(qv, &q_pos, d)?;
    let kr = g.rope(kv, &k_pos, d)?;
    let out = g.attention(qr, kr, vv, &q_pos, &k_pos, Heads { n_heads: 1, n_kv_heads: 1, d_head: d })?;
    Ok(g.value(out).clone())
}

/// Mean token negative log-likelihood.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let ce = g.cross_entropy(l, targets)?;
    Ok(g.value(ce).item())
}

/// Top-1 softmax probability of a logits row.
pub fn confidence(row: &[f64]) -> f64 {
    let mut p = vec![0.0; row.len()];
    crate::tensor::softmax_row(row, &mut p);
    p.into_iter().fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0, 3f64.ln()]));
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        let big = softmax(&Tensor::vector(vec![1000.0; 3]));
        assert!(big.data().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn rmsnorm_examples() {
        let w = Tensor::vector(vec![1.0, 1.0]);
        let y = rmsnorm(&Tensor::vector(vec![2.0, 2.0]), &w).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        let z = rmsnorm(&Tensor::vector(vec![0.0, 0.0]), &w).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn attention_one_key_returns_value() {
        let q = Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap();
        let k = Tensor::matrix(1, 2, vec![0.5, 0.1]).unwrap();
        let v = Tensor::matrix(1, 2, vec![7.0, -3.0]).unwrap();
        assert_eq!(causal_attention(&q, &k, &v, 0).unwrap().data(), &[7.0, -3.0]);
        assert!(matches!(causal_attention(&q, &k, &v, 1), Err(Error::CacheUnderrun { .. })));
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let v = 49152;
        let ce = cross_entropy(&Tensor::zeros(&[1, v]), &[17]).unwrap();
        assert!((ce - (v as f64).ln()).abs() < 1e-12);
        assert!(cross_entropy(&Tensor::zeros(&[1, 4]), &[4]).is_err());
    }

    #[test]
    fn confidence_of_uniform() {
        assert!((confidence(&[0.0; 4]) - 0.25).abs() < 1e-15);
    }
}
