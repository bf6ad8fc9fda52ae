//! The static LRSA mask.
//!
//! Queries of chunk `q` see the sink, the retained tokens of chunks `≤ q−2`,
//! every token of chunk `q−1`, and chunk `q` causally. Sink queries are
//! plain causal. Because retention depends only on K and V, the mask is the
//! same for every query of a chunk, which is what lets a cache drop the
//! evicted rows outright.

use crate::error::{Error, Result};
use crate::lagkv::{score_heads, select_topk, LagkvParams, RetentionSet};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilitySpec {
    /// 1-based chunk index; 0 for the sink.
    pub chunk_index: usize,
    /// First absolute position of the query chunk.
    pub q_start: usize,
    /// One past its last position.
    pub q_end: usize,
    /// Attendable positions before `q_start`, ascending, per KV head.
    pub per_head: Vec<Vec<usize>>,
}

impl VisibilitySpec {
    /// Whether a query at `query_pos` (inside this chunk) may attend `key_pos`.
    pub fn attendable(&self, head: usize, query_pos: usize, key_pos: usize) -> bool {
        if key_pos > query_pos {
            return false;
        }
        key_pos >= self.q_start || self.per_head[head].binary_search(&key_pos).is_ok()
    }
}

/// Visibility for query chunk `chunk_q`. `retentions` must hold the sets of
/// chunks `1..=chunk_q−2`, in chunk order.
pub fn build_visibility(
    chunk_q: usize,
    retentions: &[RetentionSet],
    params: &LagkvParams,
    kv_heads: usize,
) -> Result<VisibilitySpec> {
    if chunk_q == 0 {
        return Ok(VisibilitySpec {
            chunk_index: 0,
            q_start: 0,
            q_end: params.sink_size,
            per_head: vec![Vec::new(); kv_heads],
        });
    }
    let q_start = params.chunk_start(chunk_q);
    let mut per_head = vec![(0..params.sink_size).collect::<Vec<_>>(); kv_heads];
    for c in 1..chunk_q.saturating_sub(1) {
        let set = retentions
            .get(c - 1)
            .filter(|r| r.chunk_index == c)
            .ok_or_else(|| {
                Error::Sequencing(format!(
                    "chunk {chunk_q} needs the retention set of chunk {c}, which has not been scored"
                ))
            })?;
        if set.per_head.len() != kv_heads {
            return Err(Error::Sequencing(format!(
                "retention set of chunk {c} covers {} heads, expected {kv_heads}",
                set.per_head.len()
            )));
        }
        for (h, dst) in per_head.iter_mut().enumerate() {
            dst.extend(set.positions(h, params));
        }
    }
    if chunk_q >= 2 {
        let prev = params.chunk_start(chunk_q - 1);
        for dst in &mut per_head {
            dst.extend(prev..q_start);
        }
    }
    Ok(VisibilitySpec {
        chunk_index: chunk_q,
        q_start,
        q_end: q_start + params.lag_size,
        per_head,
    })
}

/// Additive `{0, -inf}` mask of shape `queries × keys` for one KV head, and
/// the number of visible entries.
pub fn visibility_mask<T: Real>(
    head: usize,
    query_positions: &[usize],
    key_positions: &[usize],
    retentions: &[RetentionSet],
    params: &LagkvParams,
    kv_heads: usize,
) -> Result<(Tensor<T>, u64)> {
    let mut data = Vec::with_capacity(query_positions.len() * key_positions.len());
    let mut visible = 0u64;
    let mut spec: Option<VisibilitySpec> = None;
    for &qp in query_positions {
        let chunk = params.chunk_of(qp);
        if !matches!(&spec, Some(s) if s.chunk_index == chunk) {
            spec = Some(build_visibility(chunk, retentions, params, kv_heads)?);
        }
        let s = spec.as_ref().expect("spec built above");
        for &kp in key_positions {
            if s.attendable(head, qp, kp) {
                data.push(T::zero());
                visible += 1;
            } else {
                data.push(T::neg_infinity());
            }
        }
    }
    Ok((Tensor::new(vec![query_positions.len(), key_positions.len()], data)?, visible))
}

/// Causal `{0, -inf}` mask and its visible-entry count.
pub fn causal_mask<T: Real>(query_positions: &[usize], key_positions: &[usize]) -> Result<(Tensor<T>, u64)> {
    let mut data = Vec::with_capacity(query_positions.len() * key_positions.len());
    let mut visible = 0u64;
    for &qp in query_positions {
        for &kp in key_positions {
            if kp <= qp {
                data.push(T::zero());
                visible += 1;
            } else {
                data.push(T::neg_infinity());
            }
        }
    }
    Ok((Tensor::new(vec![query_positions.len(), key_positions.len()], data)?, visible))
}

/// Retention sets of every chunk of an `n`-token sequence that has a
/// complete successor. `keys[h]`/`values[h]` are the full `n × d_h`
/// (post-rotation) tensors of KV head `h`.
pub fn retentions_for_sequence<T: Real>(
    keys: &[Tensor<T>],
    values: &[Tensor<T>],
    params: &LagkvParams,
) -> Result<Vec<RetentionSet>> {
    let n = keys.first().map_or(0, Tensor::rows);
    let l = params.lag_size;
    let mut out = Vec::new();
    let mut c = 1;
    while params.chunk_start(c) + 2 * l <= n {
        let (s, next) = (params.chunk_start(c), params.chunk_start(c + 1));
        let inputs = keys
            .iter()
            .zip(values)
            .map(|(k, v)| {
                Ok((
                    k.slice_rows(s, l)?,
                    v.slice_rows(s, l)?,
                    k.slice_rows(next, l)?,
                    v.slice_rows(next, l)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(select_topk(&score_heads(c, &inputs, params)?, params.retain_count())?);
        c += 1;
    }
    Ok(out)
}

/// Visible score entries of one head for an `n`-token LRSA prefill.
///
/// Sink queries contribute `S(S+1)/2`; a chunk `q` holding `m` queries
/// contributes `m·(S + max(q−2,0)·k + [q ≥ 2]·L) + m(m+1)/2`.
pub fn lrsa_score_entries(params: &LagkvParams, n: usize) -> u64 {
    let s = params.sink_size.min(n) as u64;
    let mut total = s * (s + 1) / 2;
    if n <= params.sink_size {
        return total;
    }
    let (l, k) = (params.lag_size as u64, params.retain_count() as u64);
    let m_total = (n - params.sink_size) as u64;
    let chunks = m_total.div_ceil(l);
    for q in 1..=chunks {
        let m = (m_total - (q - 1) * l).min(l);
        let prior = params.sink_size as u64 + q.saturating_sub(2) * k + if q >= 2 { l } else { 0 };
        total += m * prior + m * (m + 1) / 2;
    }
    total
}

/// Visible score entries of one head for full causal attention over `n` tokens.
pub fn causal_score_entries(n: usize) -> u64 {
    let n = n as u64;
    n * (n + 1) / 2
}
