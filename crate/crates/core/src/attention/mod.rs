//! Multi-head / grouped-query attention, rotary embeddings, the LRSA
//! visibility rule and the chunked prefill state machine.

pub mod prefill;
pub mod rope;
pub mod visibility;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub use prefill::{AttentionKind, PrefillState};
pub use rope::{rope_apply, rope_inverse};
pub use visibility::{
    build_visibility, causal_mask, causal_score_entries, lrsa_score_entries, retentions_for_sequence,
    visibility_mask, VisibilitySpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttnConfig {
    pub d_model: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub rope_base: f64,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            kv_heads: 4,
            head_dim: 16,
            rope_base: 10000.0,
        }
    }
}

impl AttnConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.heads == 0 || self.kv_heads == 0 {
            out.push("model.attn.heads and model.attn.kv_heads must be >= 1".to_string());
        } else if self.heads % self.kv_heads != 0 {
            out.push(format!(
                "model.attn.heads ({}) must be divisible by model.attn.kv_heads ({})",
                self.heads, self.kv_heads
            ));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            out.push(format!("model.attn.head_dim must be even and > 0, got {}", self.head_dim));
        }
        if self.d_model != self.heads * self.head_dim {
            out.push(format!(
                "model.attn.d_model ({}) must equal heads·head_dim ({}·{})",
                self.d_model, self.heads, self.head_dim
            ));
        }
        if !(self.rope_base > 1.0) {
            out.push(format!("model.attn.rope_base must be > 1, got {}", self.rope_base));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }

    /// KV head serving query head `h`.
    pub fn kv_head_of(&self, h: usize) -> usize {
        h / self.group_size()
    }
}

/// `1/√d_h`, the logit scale.
pub fn attention_scale<T: Real>(head_dim: usize) -> T {
    T::one() / T::lit(head_dim as f64).sqrt()
}

/// Result of one masked attention evaluation.
#[derive(Clone, Debug)]
pub struct Attended<T> {
    pub output: Tensor<T>,
    /// Attention score entries that were not masked out.
    pub score_entries: u64,
}

/// `softmax(Q·Kᵀ/√d_h + mask)·V`. `mask` entries must be `0` or `-inf`;
/// `None` means every key is visible.
pub fn attend<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<Attended<T>> {
    let scores = q.matmul(&k.transpose()?)?.scale(attention_scale(q.cols()));
    let (scores, score_entries) = match mask {
        Some(m) => {
            let visible = m.data().iter().filter(|&&x| x != T::neg_infinity()).count();
            (scores.add(m)?, visible as u64)
        }
        None => (scores, (q.rows() * k.rows()) as u64),
    };
    let weights = scores.softmax(1)?;
    Ok(Attended {
        output: weights.matmul(v)?,
        score_entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn equal_weights_average() {
        let q = t(&[1, 1], &[1.]);
        let k = t(&[2, 1], &[1., 1.]);
        let v = t(&[2, 1], &[2., 4.]);
        let a = attend(&q, &k, &v, Some(&Tensor::zeros(&[1, 2]))).unwrap();
        assert_eq!(a.output.data(), &[3.0]);
        assert_eq!(a.score_entries, 2);
        let masked = t(&[1, 2], &[0., f64::NEG_INFINITY]);
        let a = attend(&q, &k, &v, Some(&masked)).unwrap();
        assert_eq!(a.output.data(), &[2.0]);
        assert_eq!(a.score_entries, 1);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let q = t(&[1, 1], &[1.]);
        let k = t(&[1, 1], &[1.]);
        let mask = t(&[1, 1], &[f64::NEG_INFINITY]);
        assert!(matches!(attend(&q, &k, &k, Some(&mask)), Err(Error::DegenerateRow { .. })));
    }

    #[test]
    fn masked_attention_equals_gathered_attention() {
        let mut rng = Rng::new(40);
        let (nq, nk, d) = (5, 9, 4);
        let q = Tensor::new(vec![nq, d], rng.normal_vec(nq * d, 1.0)).unwrap();
        let k = Tensor::new(vec![nk, d], rng.normal_vec(nk * d, 1.0)).unwrap();
        let v = Tensor::new(vec![nk, d], rng.normal_vec(nk * d, 1.0)).unwrap();
        let visible = [0, 2, 3, 7];
        let mut mask = Tensor::full(&[nq, nk], f64::NEG_INFINITY);
        for r in 0..nq {
            for &c in &visible {
                mask.data_mut()[r * nk + c] = 0.0;
            }
        }
        let masked = attend(&q, &k, &v, Some(&mask)).unwrap();
        let gathered = attend(
            &q,
            &k.gather_rows(&visible).unwrap(),
            &v.gather_rows(&visible).unwrap(),
            None,
        )
        .unwrap();
        assert!(masked.output.max_abs_diff(&gathered.output).unwrap() <= 1e-12);
        assert_eq!(masked.score_entries, gathered.score_entries);
    }

    #[test]
    fn config_problems_listed_together() {
        let cfg = AttnConfig {
            d_model: 30,
            heads: 3,
            kv_heads: 2,
            head_dim: 5,
            rope_base: 10000.0,
        };
        let p = cfg.problems();
        assert_eq!(p.len(), 3, "{p:?}");
        assert!(AttnConfig::default().validate().is_ok());
    }

    #[test]
    fn gqa_head_mapping() {
        let cfg = AttnConfig {
            kv_heads: 2,
            ..AttnConfig::default()
        };
        assert_eq!((0..4).map(|h| cfg.kv_head_of(h)).collect::<Vec<_>>(), vec![0, 0, 1, 1]);
    }
}
