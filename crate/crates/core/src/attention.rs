//! Multi-head self-attention forward pass and the attention-to-affinity map.
//!
//! Each head projects the tokens to queries, keys and values, forms the
//! scaled score matrix `S_i = Q_i K_iᵀ / √d_k`, and mixes the values with the
//! row-wise softmax of `S_i`. The pre-softmax scores of every head are kept
//! in an [`AttentionStack`] so that [`symmetrize_combine`] can turn them into
//! a symmetric affinity logit matrix.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::affinity::AffinityMatrix;
use crate::{Error, Result, Tensor};

/// Query, key and value projections of one head, each `[d, d_k]` or `[d, d_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjection {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

/// Per-head projections plus the affine map applied to the concatenated
/// head outputs (the block's feed-forward stage reduced to one layer).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    heads: Vec<HeadProjection>,
    output_weight: Tensor,
    output_bias: Tensor,
    input_dim: usize,
    key_dim: usize,
    value_dim: usize,
}

impl AttentionParams {
    /// `output_weight` is `[n * d_v, d_out]` and `output_bias` is `[d_out]`.
    pub fn new(
        heads: Vec<HeadProjection>,
        output_weight: Tensor,
        output_bias: Tensor,
    ) -> Result<Self> {
        let first = heads.first().ok_or(Error::InvalidParameter {
            name: "num_heads",
            reason: "at least one head is required",
        })?;
        first.query.expect_rank("query projection", 2)?;
        first.value.expect_rank("value projection", 2)?;
        let input_dim = first.query.shape()[0];
        let key_dim = first.query.shape()[1];
        let value_dim = first.value.shape()[1];
        for head in &heads {
            check_shape("query projection", &head.query, &[input_dim, key_dim])?;
            check_shape("key projection", &head.key, &[input_dim, key_dim])?;
            check_shape("value projection", &head.value, &[input_dim, value_dim])?;
        }
        output_weight.expect_rank("output weight", 2)?;
        let out_dim = output_weight.shape()[1];
        check_shape(
            "output weight",
            &output_weight,
            &[heads.len() * value_dim, out_dim],
        )?;
        check_shape("output bias", &output_bias, &[out_dim])?;
        Ok(Self {
            heads,
            output_weight,
            output_bias,
            input_dim,
            key_dim,
            value_dim,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_weight.shape()[1]
    }

    pub fn heads(&self) -> &[HeadProjection] {
        &self.heads
    }
}

fn check_shape(what: &'static str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::shape(what, expected, t.shape()));
    }
    Ok(())
}

/// Pre-softmax score matrices of `m` heads over an `h × w` token grid,
/// laid out as `[hw, hw, m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    height: usize,
    width: usize,
    heads: usize,
    scores: Vec<f32>,
}

impl AttentionStack {
    /// Wraps a `[hw, hw, m]` tensor recorded on an `height × width` grid.
    pub fn from_tensor(scores: Tensor, height: usize, width: usize) -> Result<Self> {
        scores.expect_rank("attention stack", 3)?;
        let hw = height * width;
        let shape = scores.shape();
        if shape[0] != hw || shape[1] != hw {
            return Err(Error::shape("attention stack", &[hw, hw, shape[2]], shape));
        }
        let heads = shape[2];
        let (_, scores) = scores.into_parts();
        Ok(Self {
            height,
            width,
            heads,
            scores,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        let hw = self.tokens();
        Tensor::new(vec![hw, hw, self.heads], self.scores.clone())
            .expect("stack invariants imply a valid tensor")
    }

    /// Concatenates stacks from several blocks along the head axis.
    pub fn concat(blocks: &[AttentionStack]) -> Result<Self> {
        let first = blocks.first().ok_or(Error::InvalidParameter {
            name: "attention blocks",
            reason: "at least one block is required",
        })?;
        let (height, width) = (first.height, first.width);
        for b in blocks {
            if b.height != height || b.width != width {
                return Err(Error::shape(
                    "attention block grid",
                    &[height, width],
                    &[b.height, b.width],
                ));
            }
        }
        let heads: usize = blocks.iter().map(|b| b.heads).sum();
        let pairs = height * width * height * width;
        let mut scores = Vec::with_capacity(pairs * heads);
        for pair in 0..pairs {
            for b in blocks {
                scores.extend_from_slice(&b.scores[pair * b.heads..(pair + 1) * b.heads]);
            }
        }
        Ok(Self {
            height,
            width,
            heads,
            scores,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn num_heads(&self) -> usize {
        self.heads
    }

    /// Score of query token `p` against key token `q` in `head`.
    pub fn score(&self, p: usize, q: usize, head: usize) -> f32 {
        self.scores[(p * self.tokens() + q) * self.heads + head]
    }
}

/// Affine map over the head axis: `A[p,q] = bias + Σ_h w_h (S_h + S_hᵀ)[p,q]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCombiner {
    pub weights: Vec<f32>,
    pub bias: f32,
}

impl HeadCombiner {
    /// Default initialisation: every head weighted `1/m`, zero bias.
    pub fn uniform(heads: usize) -> Self {
        Self {
            weights: vec![1.0 / heads as f32; heads],
            bias: 0.0,
        }
    }
}

/// Runs the attention forward pass over `tokens` (`[hw, d]`) laid out on a
/// `height × width` grid. Returns the `[hw, d_out]` block output and the
/// stack of pre-softmax scores.
pub fn mhsa_forward(
    tokens: &Tensor,
    height: usize,
    width: usize,
    params: &AttentionParams,
) -> Result<(Tensor, AttentionStack)> {
    let n = height * width;
    if n == 0 {
        return Err(Error::InvalidParameter {
            name: "token grid",
            reason: "at least one token is required",
        });
    }
    check_shape("tokens", tokens, &[n, params.input_dim])?;
    let x = tokens.data();
    let d = params.input_dim;
    let (dk, dv) = (params.key_dim, params.value_dim);
    let m = params.num_heads();
    let scale = 1.0 / (dk as f64).sqrt();

    let mut scores = vec![0.0f32; n * n * m];
    let mut concat = vec![0.0f64; n * m * dv];
    let mut row = vec![0.0f64; n];
    for (h, head) in params.heads.iter().enumerate() {
        let q = matmul(x, n, d, head.query.data(), dk);
        let k = matmul(x, n, d, head.key.data(), dk);
        let v = matmul(x, n, d, head.value.data(), dv);
        for p in 0..n {
            let qp = &q[p * dk..(p + 1) * dk];
            for (t, r) in row.iter_mut().enumerate() {
                let kt = &k[t * dk..(t + 1) * dk];
                *r = qp.iter().zip(kt).map(|(a, b)| a * b).sum::<f64>() * scale;
                scores[(p * n + t) * m + h] = *r as f32;
            }
            softmax_in_place(&mut row);
            let out = &mut concat[(p * m + h) * dv..(p * m + h + 1) * dv];
            for (t, &weight) in row.iter().enumerate() {
                for (o, &vt) in out.iter_mut().zip(&v[t * dv..(t + 1) * dv]) {
                    *o += weight * vt;
                }
            }
        }
    }

    let out_dim = params.output_dim();
    let wo = params.output_weight.data();
    let bo = params.output_bias.data();
    let mut output = Vec::with_capacity(n * out_dim);
    for p in 0..n {
        let xp = &concat[p * m * dv..(p + 1) * m * dv];
        for j in 0..out_dim {
            let mut acc = f64::from(bo[j]);
            for (i, &xi) in xp.iter().enumerate() {
                acc += xi * f64::from(wo[i * out_dim + j]);
            }
            output.push(acc as f32);
        }
    }
    let output = Tensor::new(vec![n, out_dim], output)?;
    let stack = AttentionStack {
        height,
        width,
        heads: m,
        scores,
    };
    Ok((output, stack))
}

/// Row-wise softmax of the stored scores of one head, `[hw, hw]`.
pub fn attention_probabilities(stack: &AttentionStack, head: usize) -> Result<Tensor> {
    if head >= stack.heads {
        return Err(Error::InvalidParameter {
            name: "head",
            reason: "index beyond the stack's head count",
        });
    }
    let n = stack.tokens();
    let mut out = Vec::with_capacity(n * n);
    let mut row = vec![0.0f64; n];
    for p in 0..n {
        for (q, r) in row.iter_mut().enumerate() {
            *r = f64::from(stack.score(p, q, head));
        }
        softmax_in_place(&mut row);
        out.extend(row.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![n, n], out)
}

/// Folds a stack into a symmetric affinity logit matrix.
///
/// Each unordered pair is evaluated once and mirrored, so the result is
/// symmetric bit for bit.
pub fn symmetrize_combine(stack: &AttentionStack, comb: &HeadCombiner) -> Result<AffinityMatrix> {
    if comb.weights.len() != stack.heads {
        return Err(Error::HeadCountMismatch {
            stack: stack.heads,
            combiner: comb.weights.len(),
        });
    }
    let n = stack.tokens();
    let mut logits = vec![0.0f32; n * n];
    for p in 0..n {
        for q in p..n {
            let mut acc = f64::from(comb.bias);
            for (h, &w) in comb.weights.iter().enumerate() {
                let sym = f64::from(stack.score(p, q, h)) + f64::from(stack.score(q, p, h));
                acc += f64::from(w) * sym;
            }
            let v = acc as f32;
            logits[p * n + q] = v;
            logits[q * n + p] = v;
        }
    }
    AffinityMatrix::new(n, logits)
}

fn matmul(a: &[f32], rows: usize, inner: usize, b: &[f32], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        for i in 0..inner {
            let av = f64::from(a[r * inner + i]);
            for c in 0..cols {
                out[r * cols + c] += av * f64::from(b[i * cols + c]);
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn identity(d: usize) -> Tensor {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        t(&[d, d], &data)
    }

    fn identity_params(d: usize, heads: usize) -> AttentionParams {
        let hp = (0..heads)
            .map(|_| HeadProjection {
                query: identity(d),
                key: identity(d),
                value: identity(d),
            })
            .collect();
        let mut wo = vec![0.0; heads * d * d];
        for i in 0..d {
            wo[i * d + i] = 1.0;
        }
        AttentionParams::new(hp, t(&[heads * d, d], &wo), t(&[d], &vec![0.0; d])).unwrap()
    }

    /// Deterministic pseudo-random values for tests without an RNG crate.
    fn lcg(seed: u64, n: usize) -> Vec<f32> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 33) as f32 / (1u64 << 31) as f32) * 2.0 - 1.0
            })
            .collect()
    }

    fn random_params(
        seed: u64,
        d: usize,
        dk: usize,
        dv: usize,
        heads: usize,
        out: usize,
    ) -> AttentionParams {
        let hp = (0..heads as u64)
            .map(|h| HeadProjection {
                query: t(&[d, dk], &lcg(seed + 10 * h, d * dk)),
                key: t(&[d, dk], &lcg(seed + 10 * h + 1, d * dk)),
                value: t(&[d, dv], &lcg(seed + 10 * h + 2, d * dv)),
            })
            .collect();
        AttentionParams::new(
            hp,
            t(&[heads * dv, out], &lcg(seed + 99, heads * dv * out)),
            t(&[out], &lcg(seed + 98, out)),
        )
        .unwrap()
    }

    #[test]
    fn single_token_softmax_is_one() {
        let params = random_params(3, 3, 2, 2, 2, 3);
        let x = t(&[1, 3], &[0.4, -1.0, 2.0]);
        let (out, stack) = mhsa_forward(&x, 1, 1, &params).unwrap();
        assert_eq!(stack.tokens(), 1);
        for h in 0..2 {
            assert_eq!(attention_probabilities(&stack, h).unwrap().data(), &[1.0]);
        }
        // output = concat(V) W_o + b_o when the single softmax weight is 1
        let mut v = Vec::new();
        for head in params.heads() {
            for c in 0..2 {
                let mut acc = 0.0f64;
                for i in 0..3 {
                    acc += f64::from(x.data()[i]) * f64::from(head.value.data()[i * 2 + c]);
                }
                v.push(acc);
            }
        }
        for j in 0..3 {
            let mut acc = f64::from(params.output_bias.data()[j]);
            for (i, vi) in v.iter().enumerate() {
                acc += vi * f64::from(params.output_weight.data()[i * 3 + j]);
            }
            assert!((out.data()[j] as f64 - acc).abs() < 1e-5);
        }
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let params = identity_params(2, 1);
        let x = t(&[2, 2], &[0.3, -0.7, 0.3, -0.7]);
        let (_, stack) = mhsa_forward(&x, 1, 2, &params).unwrap();
        let probs = attention_probabilities(&stack, 0).unwrap();
        assert_eq!(probs.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let params = random_params(11, 4, 3, 2, 3, 4);
        let x = t(&[4, 4], &lcg(7, 16));
        let (_, stack) = mhsa_forward(&x, 2, 2, &params).unwrap();
        for h in 0..3 {
            let probs = attention_probabilities(&stack, h).unwrap();
            for row in probs.data().chunks(4) {
                let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            }
        }
    }

    #[test]
    fn scores_are_scaled_dot_products() {
        let params = identity_params(2, 1);
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, -1.0]);
        let (_, stack) = mhsa_forward(&x, 2, 1, &params).unwrap();
        let s = 1.0 / 2f32.sqrt();
        assert!((stack.score(0, 0, 0) - 5.0 * s).abs() < 1e-6);
        assert!((stack.score(0, 1, 0) - 1.0 * s).abs() < 1e-6);
        assert!((stack.score(1, 1, 0) - 10.0 * s).abs() < 1e-6);
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        let params = random_params(5, 3, 2, 3, 2, 2);
        let x = lcg(21, 9);
        let perm = [2usize, 0, 1];
        let mut xp = vec![0.0; 9];
        for (new, &old) in perm.iter().enumerate() {
            xp[new * 3..new * 3 + 3].copy_from_slice(&x[old * 3..old * 3 + 3]);
        }
        let (out, stack) = mhsa_forward(&t(&[3, 3], &x), 1, 3, &params).unwrap();
        let (out_p, stack_p) = mhsa_forward(&t(&[3, 3], &xp), 1, 3, &params).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..2 {
                let a = out_p.data()[new * 2 + j];
                let b = out.data()[old * 2 + j];
                assert!((a - b).abs() < 1e-6);
            }
            for (new_q, &old_q) in perm.iter().enumerate() {
                for h in 0..2 {
                    assert_eq!(stack_p.score(new, new_q, h), stack.score(old, old_q, h));
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let params = identity_params(2, 1);
        let x = t(&[3, 3], &[0.0; 9]);
        assert!(matches!(
            mhsa_forward(&x, 1, 3, &params),
            Err(Error::ShapeMismatch { .. })
        ));
        let bad = AttentionParams::new(
            vec![HeadProjection {
                query: identity(2),
                key: identity(3),
                value: identity(2),
            }],
            identity(2),
            t(&[2], &[0.0, 0.0]),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn combine_hand_example() {
        let stack =
            AttentionStack::from_tensor(t(&[2, 2, 1], &[0.0, 1.0, 2.0, 0.0]), 1, 2).unwrap();
        let comb = HeadCombiner {
            weights: vec![1.0],
            bias: 0.0,
        };
        let a = symmetrize_combine(&stack, &comb).unwrap();
        assert_eq!(a.logits(), &[0.0, 3.0, 3.0, 0.0]);
    }

    #[test]
    fn zero_combiner_gives_zero_matrix() {
        let stack = AttentionStack::from_tensor(t(&[3, 3, 2], &lcg(4, 18)), 3, 1).unwrap();
        let comb = HeadCombiner {
            weights: vec![0.0, 0.0],
            bias: 0.0,
        };
        let a = symmetrize_combine(&stack, &comb).unwrap();
        assert!(a.logits().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn combine_is_exactly_symmetric() {
        for seed in 0..10 {
            let stack = AttentionStack::from_tensor(t(&[6, 6, 3], &lcg(seed, 108)), 2, 3).unwrap();
            let comb = HeadCombiner {
                weights: lcg(seed + 100, 3),
                bias: 0.37,
            };
            let a = symmetrize_combine(&stack, &comb).unwrap();
            for p in 0..6 {
                for q in 0..6 {
                    assert_eq!(a.get(p, q).to_bits(), a.get(q, p).to_bits());
                }
            }
        }
    }

    #[test]
    fn combiner_head_count_checked() {
        let stack = AttentionStack::from_tensor(t(&[1, 1, 2], &[0.0, 0.0]), 1, 1).unwrap();
        assert_eq!(
            symmetrize_combine(&stack, &HeadCombiner::uniform(3)),
            Err(Error::HeadCountMismatch {
                stack: 2,
                combiner: 3
            })
        );
    }

    #[test]
    fn concat_interleaves_heads() {
        let a = AttentionStack::from_tensor(t(&[1, 1, 1], &[1.0]), 1, 1).unwrap();
        let b = AttentionStack::from_tensor(t(&[1, 1, 2], &[2.0, 3.0]), 1, 1).unwrap();
        let c = AttentionStack::concat(&[a, b]).unwrap();
        assert_eq!(c.num_heads(), 3);
        assert_eq!(c.to_tensor().data(), &[1.0, 2.0, 3.0]);
    }
}
