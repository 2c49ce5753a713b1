//! Differentiable-array core: tensors, the gradient tape, the handful of pure
//! vector primitives everything else composes, and the finite-difference
//! oracle that keeps the analytic gradients honest.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_coords};
pub use tape::{BufId, Gradients, Im2ColMeta, Tape};
pub use tensor::Tensor;

pub(crate) use tape::softmax_into;

use crate::error::{Error, Result};

/// Stable softmax of a non-empty logit vector. Outputs are non-negative, sum
/// to 1 within 1e-12, and are invariant to adding a constant to every logit.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}

/// Cosine similarity with ε = 1e-12 added to each norm, so zero-norm operands
/// yield 0 instead of NaN (masks must be total over arbitrary activations).
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine on unequal lengths");
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / ((na.sqrt() + 1e-12) * (nb.sqrt() + 1e-12))
}

/// Single-head scaled dot-product attention:
/// softmax(query·keysᵀ / √C) · values. Output lies in the convex hull of the
/// value rows.
pub fn scaled_dot_attention(
    query: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::InvalidArgument("attention over zero key rows".into()));
    }
    assert_eq!(keys.len(), values.len(), "keys/values row mismatch");
    let c = query.len();
    let scale = 1.0 / (c as f64).sqrt();
    let mut scores = Vec::with_capacity(keys.len());
    for k in keys {
        assert_eq!(k.len(), c, "key width mismatch");
        let mut s = 0.0;
        for (&q, &kx) in query.iter().zip(k) {
            s += q * kx;
        }
        scores.push(s * scale);
    }
    let weights = softmax(&scores)?;
    let width = values[0].len();
    let mut out = vec![0.0; width];
    for (w, v) in weights.iter().zip(values) {
        assert_eq!(v.len(), width, "value width mismatch");
        for (o, &vx) in out.iter_mut().zip(v) {
            *o += w * vx;
        }
    }
    Ok(out)
}

/// Indices of the k largest scores, descending; ties broken by smaller index.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} out of range for {} scores",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_hand_values() {
        // exp(1), exp(2), exp(3) normalized
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let expect = [0.09003, 0.24473, 0.66524];
        for (got, want) in p.iter().zip(expect) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_single_element() {
        assert_eq!(softmax(&[5.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn softmax_empty_is_invalid() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(1..8usize);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let shift = rng.gen_range(-50.0..50.0);
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let p = softmax(&v).unwrap();
            let q = softmax(&shifted).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-12);
                assert!(*a >= 0.0);
            }
        }
    }

    #[test]
    fn cosine_orthogonal_identity_and_hand_value() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        let v = [0.3, -0.8, 0.1];
        assert!((cosine_similarity(&v, &v) - 1.0).abs() < 1e-9);
        // (1,1)·(1,0) / (√2·1)
        assert!((cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]) - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn cosine_zero_norm_is_zero() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[3.0, 4.0]), 0.0);
    }

    #[test]
    fn cosine_scale_invariance_and_symmetry() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let alpha = rng.gen_range(0.1..10.0);
            let scaled: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            assert!((cosine_similarity(&a, &b) - cosine_similarity(&b, &a)).abs() < 1e-12);
            assert!((cosine_similarity(&scaled, &b) - cosine_similarity(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_degenerate_values() {
        // all value rows equal → output = that value row regardless of keys
        let v = vec![vec![2.0, -1.0], vec![2.0, -1.0], vec![2.0, -1.0]];
        let k = vec![vec![5.0, 0.0], vec![0.0, 1.0], vec![-3.0, 2.0]];
        let out = scaled_dot_attention(&[1.0, 1.0], &k, &v).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-12 && (out[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_uniform_when_keys_equal() {
        let k = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        let v = vec![vec![0.0, 0.0], vec![4.0, 8.0]];
        let out = scaled_dot_attention(&[0.3, -0.7], &k, &v).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-12 && (out[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn attention_saturates_toward_closest_key() {
        let k = vec![vec![10.0, 0.0], vec![-10.0, 0.0]];
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = scaled_dot_attention(&[1.0, 0.0], &k, &v).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-4 && out[1].abs() < 1e-4);
    }

    #[test]
    fn attention_empty_keys_is_invalid() {
        assert!(scaled_dot_attention(&[1.0], &[], &[]).is_err());
    }

    #[test]
    fn attention_output_in_value_hull() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let m = rng.gen_range(1..6usize);
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let keys: Vec<Vec<f64>> =
                (0..m).map(|_| (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let values: Vec<Vec<f64>> =
                (0..m).map(|_| (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let out = scaled_dot_attention(&q, &keys, &values).unwrap();
            for c in 0..3 {
                let lo = values.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
                let hi = values.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
                assert!(out[c] >= lo - 1e-12 && out[c] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn topk_enumeration_and_ties() {
        assert_eq!(topk_indices(&[0.1, 0.4, 0.3, 0.2], 2).unwrap(), vec![1, 2]);
        assert_eq!(topk_indices(&[7.0], 1).unwrap(), vec![0]);
        assert_eq!(topk_indices(&[0.5, 0.5, 0.1], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn topk_out_of_range() {
        assert!(topk_indices(&[1.0, 2.0], 0).is_err());
        assert!(topk_indices(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn topk_matches_full_sort_on_distinct_values() {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for k in 1..=8usize {
            let mut v: Vec<f64> = (0..8).map(|i| i as f64 * 0.37).collect();
            v.shuffle(&mut rng);
            let got = topk_indices(&v, k).unwrap();
            let mut idx: Vec<usize> = (0..8).collect();
            idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap());
            assert_eq!(got, idx[..k].to_vec());
        }
    }
}
