//! Cache-backed chunked prefill and single-token decode.
//!
//! Tokens enter in blocks: the sink first, then `chunks_per_step·L` tokens at
//! a time. Each layer appends the block's K/V to its cache, masks the block's
//! queries against the cached rows using the retention sets known so far
//! (logged plus pending), and compresses whatever became ready.

use serde::{Deserialize, Serialize};

use super::{attend, causal_mask, visibility_mask};
use crate::error::{Error, Result};
use crate::kv_cache::{CacheReport, SegmentedKvCache};
use crate::lagkv::LagkvParams;
use crate::model::Model;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Full causal attention; the cache is never compressed.
    Vanilla,
    #[default]
    Lrsa,
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "lrsa" => Ok(Self::Lrsa),
            other => Err(Error::Config(format!("unknown attention mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Vanilla => "vanilla",
            Self::Lrsa => "lrsa",
        })
    }
}

/// Inference state of one sequence.
#[derive(Clone, Debug)]
pub struct PrefillState<T> {
    pub kind: AttentionKind,
    pub cache: SegmentedKvCache<T>,
    pub chunks_per_step: usize,
    /// Visible attention score entries, summed over layers and query heads.
    pub op_counter: u64,
    next_position: usize,
}

impl<T: Real> PrefillState<T> {
    pub fn new(model: &Model<T>, params: LagkvParams, kind: AttentionKind, chunks_per_step: usize) -> Result<Self> {
        let mut problems = params.problems();
        if chunks_per_step == 0 {
            problems.push("chunks_per_step must be >= 1".into());
        }
        if !problems.is_empty() {
            return Err(Error::InvalidConfig(problems));
        }
        let a = model.config.attn;
        Ok(Self {
            kind,
            cache: SegmentedKvCache::new(model.config.layers, a.kv_heads, a.head_dim, params),
            chunks_per_step,
            op_counter: 0,
            next_position: 0,
        })
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn params(&self) -> &LagkvParams {
        self.cache.layer(0).params()
    }

    pub fn report(&self) -> CacheReport {
        self.cache.report()
    }

    /// Ingests `tokens` and returns their final-normed hidden states.
    pub fn prefill(&mut self, model: &Model<T>, tokens: &[usize]) -> Result<Tensor<T>> {
        model.check_tokens(tokens)?;
        let p = *self.params();
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let pos = self.next_position;
            let len = if pos < p.sink_size {
                p.sink_size - pos
            } else {
                self.chunks_per_step * p.lag_size
            }
            .min(tokens.len() - i);
            out.push(self.run_block(model, &tokens[i..i + len], true)?);
            i += len;
        }
        let refs: Vec<&Tensor<T>> = out.iter().collect();
        if refs.is_empty() {
            return Ok(Tensor::zeros(&[0, model.config.d_model()]));
        }
        Tensor::concat_rows(&refs)
    }

    /// Feeds one token and returns its `1 × vocab` logits.
    pub fn decode_step(&mut self, model: &Model<T>, token: usize) -> Result<Tensor<T>> {
        model.check_tokens(&[token])?;
        let hidden = self.run_block(model, &[token], false)?;
        model.logits(&hidden)
    }

    fn run_block(&mut self, model: &Model<T>, tokens: &[usize], masked: bool) -> Result<Tensor<T>> {
        let a = model.config.attn;
        let start = self.next_position;
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let mut x = model.embed(tokens)?;
        for layer in 0..model.config.layers {
            let (qs, ks, vs) = model.attn_inputs(layer, &x, &positions)?;
            let cache = self.cache.layer_mut(layer);
            cache.append_tokens(&ks, &vs, &positions)?;
            let retentions = match (self.kind, masked) {
                (AttentionKind::Lrsa, true) => {
                    let mut r = cache.retention_log().to_vec();
                    r.extend(cache.pending_retentions()?);
                    r
                }
                _ => Vec::new(),
            };
            let mut outs = Vec::with_capacity(a.heads);
            let views = (0..a.kv_heads).map(|j| cache.head_view(j)).collect::<Result<Vec<_>>>()?;
            let masks = if masked {
                views
                    .iter()
                    .enumerate()
                    .map(|(j, view)| match self.kind {
                        AttentionKind::Vanilla => causal_mask::<T>(&positions, &view.positions).map(|m| m.0),
                        AttentionKind::Lrsa => visibility_mask::<T>(
                            j,
                            &positions,
                            &view.positions,
                            &retentions,
                            cache.params(),
                            a.kv_heads,
                        )
                        .map(|m| m.0),
                    })
                    .map(|m| m.map(Some))
                    .collect::<Result<Vec<_>>>()?
            } else {
                vec![None; a.kv_heads]
            };
            for (i, q) in qs.iter().enumerate() {
                let j = a.kv_head_of(i);
                let r = attend(q, &views[j].keys, &views[j].values, masks[j].as_ref())?;
                self.op_counter += r.score_entries;
                outs.push(r.output);
            }
            x = model.attn_output(layer, &x, &outs)?;
            if self.kind == AttentionKind::Lrsa {
                cache.compress_ready()?;
            }
        }
        self.next_position += tokens.len();
        model.final_hidden(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{causal_score_entries, lrsa_score_entries, AttnConfig};
    use crate::kv_cache::expected_token_count;
    use crate::model::{MaskMode, ModelConfig};
    use crate::rng::Rng;

    fn model(kv_heads: usize, seed: u64) -> Model<f64> {
        let cfg = ModelConfig {
            vocab: 13,
            layers: 2,
            attn: AttnConfig {
                d_model: 16,
                heads: 4,
                kv_heads,
                head_dim: 4,
                rope_base: 10000.0,
            },
            mlp_hidden: 20,
            norm_eps: 1e-6,
        };
        Model::init(cfg, &mut Rng::new(seed)).unwrap()
    }

    fn seq(seed: u64, n: usize) -> Vec<usize> {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| rng.below(13)).collect()
    }

    #[test]
    fn prefill_matches_full_forward_bitwise() {
        let p = LagkvParams::new(2, 4, 0.5).unwrap();
        for (kv, cps, n) in [(4, 1, 23), (2, 2, 26), (1, 3, 9), (4, 2, 2)] {
            let m = model(kv, 60 + n as u64);
            let t = seq(n as u64, n);
            for (kind, mode) in [(AttentionKind::Lrsa, MaskMode::Lrsa(&p)), (AttentionKind::Vanilla, MaskMode::Vanilla)] {
                let mut st = PrefillState::new(&m, p, kind, cps).unwrap();
                let h = st.prefill(&m, &t).unwrap();
                let logits = m.logits(&h).unwrap();
                let full = m.forward(&t, mode).unwrap();
                assert!(logits.bitwise_eq(&full), "kv={kv} cps={cps} n={n} {kind}");
                let expect = match kind {
                    AttentionKind::Lrsa => lrsa_score_entries(&p, n),
                    AttentionKind::Vanilla => causal_score_entries(n),
                };
                assert_eq!(st.op_counter, 2 * 4 * expect);
            }
        }
    }

    #[test]
    fn decode_continues_prefill() {
        let p = LagkvParams::new(2, 4, 0.5).unwrap();
        let m = model(2, 70);
        let t = seq(71, 30);
        let mut st = PrefillState::new(&m, p, AttentionKind::Lrsa, 2).unwrap();
        st.prefill(&m, &t[..11]).unwrap();
        let mut rows = Vec::new();
        for &tok in &t[11..] {
            rows.push(st.decode_step(&m, tok).unwrap());
        }
        let full = m.forward(&t, MaskMode::Lrsa(&p)).unwrap();
        for (i, r) in rows.iter().enumerate() {
            assert!(r.bitwise_eq(&full.slice_rows(11 + i, 1).unwrap()), "row {}", 11 + i);
        }
        assert_eq!(st.cache.layer(0).token_count(), expected_token_count(&p, 30));
        assert_eq!(st.op_counter, 2 * 4 * lrsa_score_entries(&p, 30));
    }

    #[test]
    fn vanilla_cache_keeps_everything() {
        let p = LagkvParams::new(2, 4, 0.5).unwrap();
        let m = model(4, 72);
        let mut st = PrefillState::new(&m, p, AttentionKind::Vanilla, 1).unwrap();
        st.prefill(&m, &seq(73, 25)).unwrap();
        assert_eq!(st.report().tokens_cached, vec![25; 8]);
    }

    #[test]
    fn bad_token_and_config() {
        let p = LagkvParams::new(2, 4, 0.5).unwrap();
        let m = model(4, 74);
        assert!(matches!(
            PrefillState::new(&m, p, AttentionKind::Lrsa, 0),
            Err(Error::InvalidConfig(_))
        ));
        let mut st = PrefillState::new(&m, p, AttentionKind::Lrsa, 1).unwrap();
        assert!(matches!(st.prefill(&m, &[1, 99]), Err(Error::TokenOutOfRange { .. })));
        assert_eq!(st.next_position(), 0);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("lrsa".parse::<AttentionKind>().unwrap(), AttentionKind::Lrsa);
        assert!("sparse".parse::<AttentionKind>().is_err());
    }
}
