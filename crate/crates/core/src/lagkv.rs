//! Lag-relative token importance scoring.
//!
//! A lag-sized chunk of keys (or values) is normalised channel-wise by the
//! min/max of the *next* chunk, each token gets the spread (population std)
//! of its normalised channels, and a softmax over the chunk turns spreads
//! into scores. Key and value scores are summed, and the top `k` tokens of
//! each KV head survive compression.
//!
//! Nothing here takes a query: the scores depend only on K and V.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Sink / lag / retention parameters of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LagkvParams {
    /// Leading tokens that are never evicted.
    pub sink_size: usize,
    /// Chunk length.
    pub lag_size: usize,
    /// Fraction of each compressed chunk that is kept, in `(0, 1]`.
    pub retention_ratio: f64,
    /// Guard added to the min-max denominator. Zero is allowed but a
    /// constant channel in the reference chunk then divides by zero.
    pub epsilon: f64,
}

impl Default for LagkvParams {
    fn default() -> Self {
        Self {
            sink_size: 16,
            lag_size: 32,
            retention_ratio: 0.5,
            epsilon: 1e-6,
        }
    }
}

impl LagkvParams {
    pub fn new(sink_size: usize, lag_size: usize, retention_ratio: f64) -> Result<Self> {
        let p = Self {
            sink_size,
            lag_size,
            retention_ratio,
            ..Self::default()
        };
        let problems = p.problems();
        if problems.is_empty() {
            Ok(p)
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// Every violated constraint, for batch reporting.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.lag_size == 0 {
            out.push("lagkv.lag_size must be >= 1".to_string());
        }
        if !(self.retention_ratio > 0.0 && self.retention_ratio <= 1.0) {
            out.push(format!(
                "lagkv.retention_ratio must lie in (0, 1], got {}",
                self.retention_ratio
            ));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            out.push(format!("lagkv.epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        out
    }

    /// Tokens kept per compressed chunk: `floor(r·L)` clamped to `[1, L]`.
    pub fn retain_count(&self) -> usize {
        let k = (self.retention_ratio * self.lag_size as f64).floor() as usize;
        k.clamp(1, self.lag_size.max(1))
    }

    /// 1-based chunk index of an absolute position; 0 for sink positions.
    pub fn chunk_of(&self, position: usize) -> usize {
        if position < self.sink_size {
            0
        } else {
            (position - self.sink_size) / self.lag_size + 1
        }
    }

    /// First absolute position of chunk `c` (1-based).
    pub fn chunk_start(&self, c: usize) -> usize {
        debug_assert!(c >= 1);
        self.sink_size + (c - 1) * self.lag_size
    }
}

/// Scores of one chunk, one vector per KV head.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChunkScores<T = f64> {
    pub chunk_index: usize,
    pub per_head: Vec<Vec<T>>,
}

/// Surviving within-chunk indices of one chunk, ascending, one list per KV head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionSet {
    pub chunk_index: usize,
    pub per_head: Vec<Vec<usize>>,
}

impl RetentionSet {
    /// Absolute positions kept for `head`.
    pub fn positions(&self, head: usize, params: &LagkvParams) -> impl Iterator<Item = usize> + '_ {
        let start = params.chunk_start(self.chunk_index);
        self.per_head[head].iter().map(move |&i| start + i)
    }
}

/// Normalises `chunk` channel-wise by the min/max of `reference`:
/// `(x - min_c) / (max_c - min_c + epsilon)`.
pub fn normalize_chunk<T: Real>(chunk: &Tensor<T>, reference: &Tensor<T>, epsilon: T) -> Result<Tensor<T>> {
    if reference.rows() == 0 {
        return Err(Error::Shape {
            shape: reference.shape().to_vec(),
            reason: "reference chunk is empty".into(),
        });
    }
    if chunk.cols() != reference.cols() || chunk.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "normalize_chunk",
            left: chunk.shape().to_vec(),
            right: reference.shape().to_vec(),
        });
    }
    let (lo, hi) = reference.reduce_minmax(0)?;
    let c = chunk.cols();
    let denom: Vec<T> = lo
        .data()
        .iter()
        .zip(hi.data())
        .map(|(&a, &b)| b - a + epsilon)
        .collect();
    let mut out = Vec::with_capacity(chunk.len());
    for t in 0..chunk.rows() {
        for (j, &x) in chunk.row(t).iter().enumerate() {
            out.push((x - lo.data()[j]) / denom[j]);
        }
    }
    Tensor::new(vec![chunk.rows(), c], out)
}

/// Softmax over tokens of the per-token channel std.
pub fn token_scores<T: Real>(normalized: &Tensor<T>) -> Result<Tensor<T>> {
    normalized.reduce_std(1)?.softmax(0)
}

/// Combined key + value score of one chunk for one KV head. Sums to 2.
pub fn score_chunk<T: Real>(
    keys: &Tensor<T>,
    values: &Tensor<T>,
    next_keys: &Tensor<T>,
    next_values: &Tensor<T>,
    params: &LagkvParams,
) -> Result<Tensor<T>> {
    let eps = T::lit(params.epsilon);
    let sk = token_scores(&normalize_chunk(keys, next_keys, eps)?)?;
    let sv = token_scores(&normalize_chunk(values, next_values, eps)?)?;
    sk.add(&sv)
}

/// Scores every KV head of one chunk. `heads[h] = (K_p, V_p, K_next, V_next)`.
pub fn score_heads<T: Real>(
    chunk_index: usize,
    heads: &[(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)],
    params: &LagkvParams,
) -> Result<ChunkScores<T>> {
    let per_head = heads
        .iter()
        .map(|(k, v, kn, vn)| Ok(score_chunk(k, v, kn, vn, params)?.into_data()))
        .collect::<Result<_>>()?;
    Ok(ChunkScores {
        chunk_index,
        per_head,
    })
}

/// The `k` best-scoring indices per head, ties to the lower index, returned
/// in ascending position order.
pub fn select_topk<T: Real>(scores: &ChunkScores<T>, k: usize) -> Result<RetentionSet> {
    let per_head = scores
        .per_head
        .iter()
        .map(|s| {
            if k == 0 || k > s.len() {
                return Err(Error::Index(format!(
                    "top-k with k = {k} over {} tokens",
                    s.len()
                )));
            }
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
            let mut keep = order[..k].to_vec();
            keep.sort_unstable();
            Ok(keep)
        })
        .collect::<Result<_>>()?;
    Ok(RetentionSet {
        chunk_index: scores.chunk_index,
        per_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn rand_t(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(vec![rows, cols], rng.normal_vec(rows * cols, 1.0)).unwrap()
    }

    #[test]
    fn retain_count_rounding() {
        let p = |r, l| LagkvParams {
            lag_size: l,
            retention_ratio: r,
            ..LagkvParams::default()
        };
        assert_eq!(p(0.5, 1024).retain_count(), 512);
        assert_eq!(p(0.5, 5).retain_count(), 2);
        assert_eq!(p(0.01, 8).retain_count(), 1);
        assert_eq!(p(1.0, 8).retain_count(), 8);
    }

    #[test]
    fn invalid_params_reported_together() {
        let err = LagkvParams::new(4, 0, 1.5).unwrap_err();
        match err {
            Error::InvalidConfig(v) => assert_eq!(v.len(), 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn chunk_geometry() {
        let p = LagkvParams::new(2, 4, 0.5).unwrap();
        assert_eq!(p.chunk_of(0), 0);
        assert_eq!(p.chunk_of(1), 0);
        assert_eq!(p.chunk_of(2), 1);
        assert_eq!(p.chunk_of(5), 1);
        assert_eq!(p.chunk_of(6), 2);
        assert_eq!(p.chunk_start(3), 10);
    }

    #[test]
    fn normalize_direct_arithmetic() {
        let chunk = t(&[2, 2], &[1., 3., 2., 5.]);
        let reference = t(&[2, 2], &[0., 1., 2., 5.]);
        let out = normalize_chunk(&chunk, &reference, 0.0).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn normalize_constant_reference_stays_finite() {
        let chunk = t(&[2, 1], &[1., 3.]);
        let reference = t(&[3, 1], &[2., 2., 2.]);
        let out = normalize_chunk(&chunk, &reference, 1e-6).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
        assert!((out.data()[1] - 1e6).abs() < 1e-6);
    }

    #[test]
    fn normalize_matches_loop_oracle() {
        let mut rng = Rng::new(31);
        let chunk = rand_t(&mut rng, 6, 4);
        let reference = rand_t(&mut rng, 6, 4);
        let eps = 1e-6;
        let out = normalize_chunk(&chunk, &reference, eps).unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..6).map(|r| reference.data()[r * 4 + c]).collect();
            let mn = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..6 {
                let want = (chunk.data()[r * 4 + c] - mn) / (mx - mn + eps);
                assert!((out.data()[r * 4 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn token_scores_examples() {
        let flat = t(&[3, 2], &[0.2, 0.2, 0.7, 0.7, 1.0, 1.0]);
        let s = token_scores(&flat).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let rows = t(&[2, 2], &[0.5, 0.5, 1.0, 0.0]);
        let s = token_scores(&rows).unwrap();
        // stds are [0, 0.5]; softmax([0, 0.5])
        let e = 0.5f64.exp();
        assert!((s.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((s.data()[1] - e / (1.0 + e)).abs() < 1e-15);
        let shifted = rows.map(|x| x + 3.25);
        let s2 = token_scores(&shifted).unwrap();
        assert!(s.max_abs_diff(&s2).unwrap() < 1e-15);
    }

    #[test]
    fn identical_k_and_v_double_the_key_score() {
        let mut rng = Rng::new(32);
        let k = rand_t(&mut rng, 5, 4);
        let kn = rand_t(&mut rng, 5, 4);
        let p = LagkvParams::default();
        let both = score_chunk(&k, &k, &kn, &kn, &p).unwrap();
        let single = token_scores(&normalize_chunk(&k, &kn, 1e-6).unwrap()).unwrap();
        assert!(both.max_abs_diff(&single.scale(2.0)).unwrap() < 1e-15);
    }

    #[test]
    fn outlier_token_wins() {
        // Reference range is [0, 1] per channel, so normalised rows equal raw rows.
        let reference = t(&[2, 4], &[0., 0., 0., 0., 1., 1., 1., 1.]);
        let mut rows = vec![0.5; 16];
        rows[8..12].copy_from_slice(&[0., 10., 0., 10.]);
        rows[1] = 0.51;
        rows[6] = 0.49;
        let chunk = t(&[4, 4], &rows);
        let p = LagkvParams {
            epsilon: 1e-9,
            ..LagkvParams::default()
        };
        let s = score_chunk(&chunk, &chunk, &reference, &reference, &p).unwrap();
        let best = (0..4)
            .max_by(|&a, &b| s.data()[a].partial_cmp(&s.data()[b]).unwrap())
            .unwrap();
        assert_eq!(best, 2);
        // brute force: std of [0,10,0,10] is 5, the others are ~0.
        let std2 = t(&[4], &[0., 10., 0., 10.]).reduce_std(0).unwrap().item();
        assert!((std2 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn scores_sum_to_two() {
        let mut rng = Rng::new(33);
        for _ in 0..20 {
            let (k, v) = (rand_t(&mut rng, 8, 4), rand_t(&mut rng, 8, 4));
            let (kn, vn) = (rand_t(&mut rng, 8, 4), rand_t(&mut rng, 8, 4));
            let s = score_chunk(&k, &v, &kn, &vn, &LagkvParams::default()).unwrap();
            assert!((s.sum() - 2.0).abs() < 1e-9);
            assert!(s.data().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn topk_examples() {
        let s = |v: &[f64]| ChunkScores {
            chunk_index: 1,
            per_head: vec![v.to_vec()],
        };
        assert_eq!(select_topk(&s(&[0.1, 0.4, 0.2, 0.3]), 2).unwrap().per_head[0], vec![1, 3]);
        assert_eq!(select_topk(&s(&[0.3, 0.3, 0.2, 0.2]), 2).unwrap().per_head[0], vec![0, 1]);
        assert_eq!(
            select_topk(&s(&[0.9, 0.1, 0.5, 0.3]), 4).unwrap().per_head[0],
            vec![0, 1, 2, 3]
        );
        assert!(select_topk(&s(&[0.1, 0.2]), 3).is_err());
    }

    #[test]
    fn retention_positions_are_absolute() {
        let p = LagkvParams::new(2, 4, 0.5).unwrap();
        let r = RetentionSet {
            chunk_index: 1,
            per_head: vec![vec![1, 3]],
        };
        assert_eq!(r.positions(0, &p).collect::<Vec<_>>(), vec![3, 5]);
    }
}
