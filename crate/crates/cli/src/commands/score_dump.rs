//! Per-layer, per-chunk, per-head LagKV scores and retention sets.

use anyhow::{bail, Result};
use lrsa_core::lagkv::score_heads;
use lrsa_core::{select_topk, Real, Rng, RunConfig};
use serde::Serialize;

use super::{init_model, mask_mode, Outcome, DATA_STREAM, MODEL_STREAM};

#[derive(Clone, Debug, Serialize)]
pub struct HeadDump {
    pub head: usize,
    pub scores: Vec<f64>,
    pub sum: f64,
    /// Kept in-chunk indices, ascending.
    pub retained: Vec<usize>,
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChunkDump {
    pub layer: usize,
    pub chunk: usize,
    pub heads: Vec<HeadDump>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScoreDump {
    pub tokens: Vec<usize>,
    pub retain_count: usize,
    pub chunks: Vec<ChunkDump>,
    /// Every per-head score vector sums to 2 within 1e-9.
    pub sums_ok: bool,
    pub lengths_ok: bool,
    pub ascending: bool,
    pub pass: bool,
}

/// Scores the chunks of one task sequence with the K/V each layer sees in
/// `cfg.mode`.
pub fn run<T: Real>(cfg: &RunConfig) -> Result<Outcome> {
    let base = Rng::new(cfg.seed);
    let model = init_model::<T>(cfg, &mut base.split(MODEL_STREAM))?;
    let tokens = cfg.task.sample(&mut base.split(DATA_STREAM))?.tokens;
    let p = cfg.lagkv;
    if tokens.len() < p.sink_size + 2 * p.lag_size {
        bail!(
            "score-dump needs at least S+2L = {} tokens to score one chunk, task has {}",
            p.sink_size + 2 * p.lag_size,
            tokens.len()
        );
    }
    let k = p.retain_count();
    let trace = model.layer_kv(&tokens, mask_mode(cfg.mode, &p))?;
    let mut chunks = Vec::new();
    for (layer, kv) in trace.iter().enumerate() {
        let mut c = 1;
        while p.chunk_start(c) + 2 * p.lag_size <= tokens.len() {
            let (s, next) = (p.chunk_start(c), p.chunk_start(c + 1));
            let inputs = kv
                .keys
                .iter()
                .zip(&kv.values)
                .map(|(k, v)| {
                    Ok((
                        k.slice_rows(s, p.lag_size)?,
                        v.slice_rows(s, p.lag_size)?,
                        k.slice_rows(next, p.lag_size)?,
                        v.slice_rows(next, p.lag_size)?,
                    ))
                })
                .collect::<lrsa_core::Result<Vec<_>>>()?;
            let scores = score_heads(c, &inputs, &p)?;
            let set = select_topk(&scores, k)?;
            let heads = scores
                .per_head
                .iter()
                .zip(&set.per_head)
                .enumerate()
                .map(|(h, (sc, keep))| {
                    let scores: Vec<f64> = sc.iter().map(|x| x.as_f64()).collect();
                    HeadDump {
                        head: h,
                        sum: scores.iter().sum(),
                        scores,
                        retained: keep.clone(),
                        positions: set.positions(h, &p).collect(),
                    }
                })
                .collect();
            chunks.push(ChunkDump { layer, chunk: c, heads });
            c += 1;
        }
    }
    let heads = || chunks.iter().flat_map(|c| &c.heads);
    let sums_ok = heads().all(|h| (h.sum - 2.0).abs() <= 1e-9);
    let lengths_ok = heads().all(|h| h.retained.len() == k);
    let ascending = heads().all(|h| h.retained.windows(2).all(|w| w[0] < w[1]));
    let pass = sums_ok && lengths_ok && ascending;
    let dump = ScoreDump {
        tokens,
        retain_count: k,
        chunks,
        sums_ok,
        lengths_ok,
        ascending,
        pass,
    };
    Outcome::new("score_dump", &dump, pass)
}
