//! Attention score entries and wall time of LRSA vs causal prefill.

use std::time::Instant;

use anyhow::Result;
use lrsa_core::{causal_score_entries, lrsa_score_entries, AttentionKind, PrefillState, Real, Rng, RunConfig};
use serde::Serialize;

use super::{init_model, random_tokens, Outcome, DATA_STREAM, MODEL_STREAM};

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub lrsa_entries: u64,
    pub lrsa_expected: u64,
    pub full_entries: u64,
    pub full_expected: u64,
    /// Per-head cache size after the LRSA prefill.
    pub lrsa_cached_tokens: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthRow {
    pub from: usize,
    pub to: usize,
    pub lrsa_ratio: f64,
    pub full_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub layers: usize,
    pub heads: usize,
    pub rows: Vec<BenchRow>,
    /// Counters equal the closed forms at every length.
    pub counts_match: bool,
    /// LRSA entries strictly below causal wherever at least one chunk was evicted.
    pub sparser: bool,
    pub growth: Vec<GrowthRow>,
    /// LRSA grows strictly slower than causal between lengths that both evict.
    pub sub_quadratic: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct TimingRow {
    pub n: usize,
    pub lrsa_ms: f64,
    pub full_ms: f64,
}

/// Deterministic report plus wall-clock timings, kept apart so the report
/// stays byte-stable.
pub fn run<T: Real>(cfg: &RunConfig) -> Result<(Outcome, Vec<TimingRow>)> {
    let base = Rng::new(cfg.seed);
    let model = init_model::<T>(cfg, &mut base.split(MODEL_STREAM))?;
    let p = cfg.lagkv;
    let heads = (cfg.model.layers * cfg.model.attn.heads) as u64;
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for n in cfg.bench_lengths() {
        let tokens = random_tokens(&mut base.split(DATA_STREAM), n, cfg.model.vocab);
        let measure = |kind| -> Result<(u64, usize, f64)> {
            let mut best = f64::INFINITY;
            let mut out = (0, 0);
            for _ in 0..cfg.bench.repeats {
                let mut st = PrefillState::new(&model, p, kind, cfg.chunks_per_step)?;
                let t0 = Instant::now();
                st.prefill(&model, &tokens)?;
                best = best.min(t0.elapsed().as_secs_f64() * 1e3);
                out = (st.op_counter, st.cache.layer(0).token_count());
            }
            Ok((out.0, out.1, best))
        };
        let (lrsa, cached, lrsa_ms) = measure(AttentionKind::Lrsa)?;
        let (full, _, full_ms) = measure(AttentionKind::Vanilla)?;
        log::info!("n={n}: lrsa {lrsa} entries in {lrsa_ms:.1} ms, causal {full} in {full_ms:.1} ms");
        rows.push(BenchRow {
            n,
            lrsa_entries: lrsa,
            lrsa_expected: heads * lrsa_score_entries(&p, n),
            full_entries: full,
            full_expected: heads * causal_score_entries(n),
            lrsa_cached_tokens: cached,
        });
        timings.push(TimingRow { n, lrsa_ms, full_ms });
    }
    let counts_match = rows
        .iter()
        .all(|r| r.lrsa_entries == r.lrsa_expected && r.full_entries == r.full_expected);
    // The first eviction happens once chunk 3 starts, i.e. beyond S + 2L.
    let evicts = |n: usize| n > p.sink_size + 2 * p.lag_size && p.retain_count() < p.lag_size;
    let sparser = rows
        .iter()
        .all(|r| if evicts(r.n) { r.lrsa_entries < r.full_entries } else { r.lrsa_entries <= r.full_entries });
    let growth: Vec<GrowthRow> = rows
        .windows(2)
        .map(|w| GrowthRow {
            from: w[0].n,
            to: w[1].n,
            lrsa_ratio: w[1].lrsa_entries as f64 / w[0].lrsa_entries as f64,
            full_ratio: w[1].full_entries as f64 / w[0].full_entries as f64,
        })
        .collect();
    let sub_quadratic = growth
        .iter()
        .filter(|g| evicts(g.from))
        .all(|g| g.lrsa_ratio < g.full_ratio);
    let pass = counts_match && sparser && sub_quadratic;
    let report = BenchReport {
        layers: cfg.model.layers,
        heads: cfg.model.attn.heads,
        rows,
        counts_match,
        sparser,
        growth,
        sub_quadratic,
        pass,
    };
    Ok((Outcome::new("bench", &report, pass)?, timings))
}
