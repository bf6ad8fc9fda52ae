//! Masked full-sequence logits vs cache-backed prefill plus decode.

use anyhow::Result;
use lrsa_core::{AttentionKind, LagkvParams, MaskMode, PrefillState, Precision, Real, Rng, RunConfig, Tensor};
use serde::Serialize;

use super::{init_model, mask_mode, random_tokens, Outcome, DATA_STREAM};

#[derive(Clone, Debug, Serialize)]
pub struct BatchingCheck {
    pub chunks_per_step: Vec<usize>,
    /// Prefill outputs identical bit for bit across every batching.
    pub identical: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReductionCheck {
    /// Retention ratio 1 reproduces causal attention bit for bit.
    pub full_retention_identical: bool,
    /// Inputs of at most one chunk (`n ≤ S+L`) do as well.
    pub single_chunk_identical: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub precision: Precision,
    pub mode: AttentionKind,
    pub seeds: usize,
    pub seq_len: usize,
    pub decode_tokens: usize,
    pub max_abs_diff: f64,
    pub worst_seed: usize,
    pub tolerance: f64,
    /// Op counter equals the closed form on every seed.
    pub op_count_matches: bool,
    pub batching: BatchingCheck,
    pub reduction: ReductionCheck,
    pub pass: bool,
}

pub fn tolerance(p: Precision) -> f64 {
    match p {
        Precision::F64 => 1e-12,
        Precision::F32 => 1e-5,
    }
}

struct SeedResult {
    diff: f64,
    counts_ok: bool,
    batching_ok: bool,
    r1_ok: bool,
    single_ok: bool,
}

fn run_seed<T: Real>(cfg: &RunConfig, seed: usize) -> Result<SeedResult> {
    let base = Rng::new(cfg.seed).split(seed as u64);
    let model = init_model::<T>(cfg, &mut base.split(0))?;
    let n = cfg.task.seq_len;
    let tokens = random_tokens(&mut base.split(DATA_STREAM), n, cfg.model.vocab);
    let params = cfg.lagkv;
    let kind = cfg.mode;

    let full = model.forward(&tokens, mask_mode(kind, &params))?;
    let split = n.saturating_sub(cfg.equivalence.decode_tokens);
    let mut state = PrefillState::new(&model, params, kind, cfg.chunks_per_step)?;
    let mut rows = vec![model.logits(&state.prefill(&model, &tokens[..split])?)?];
    for &t in &tokens[split..] {
        rows.push(state.decode_step(&model, t)?);
    }
    let cached = Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?;
    let diff = full.max_abs_diff(&cached)?.as_f64();

    let per_head = match kind {
        AttentionKind::Lrsa => lrsa_core::lrsa_score_entries(&params, n),
        AttentionKind::Vanilla => lrsa_core::causal_score_entries(n),
    };
    let heads = (cfg.model.layers * cfg.model.attn.heads) as u64;
    let counts_ok = state.op_counter == heads * per_head;

    let mut reference: Option<Tensor<T>> = None;
    let mut batching_ok = true;
    for &cps in &cfg.equivalence.batching {
        let mut st = PrefillState::new(&model, params, kind, cps)?;
        let h = st.prefill(&model, &tokens)?;
        match &reference {
            None => reference = Some(h),
            Some(r) => batching_ok &= r.bitwise_eq(&h),
        }
    }

    let vanilla = model.forward(&tokens, MaskMode::Vanilla)?;
    let r1 = LagkvParams {
        retention_ratio: 1.0,
        ..params
    };
    let r1_ok = model.forward(&tokens, MaskMode::Lrsa(&r1))?.bitwise_eq(&vanilla);
    let short = &tokens[..n.min(params.sink_size + params.lag_size)];
    let single_ok = model
        .forward(short, MaskMode::Lrsa(&params))?
        .bitwise_eq(&model.forward(short, MaskMode::Vanilla)?);

    Ok(SeedResult {
        diff,
        counts_ok,
        batching_ok,
        r1_ok,
        single_ok,
    })
}

pub fn run<T: Real>(cfg: &RunConfig) -> Result<Outcome> {
    let tol = tolerance(cfg.precision);
    let mut max_abs_diff = 0.0;
    let mut worst_seed = 0;
    let (mut counts, mut batching, mut r1, mut single) = (true, true, true, true);
    for seed in 0..cfg.equivalence.seeds {
        let r = run_seed::<T>(cfg, seed)?;
        log::debug!("seed {seed}: max diff {:e}", r.diff);
        if r.diff > max_abs_diff || r.diff.is_nan() {
            max_abs_diff = r.diff;
            worst_seed = seed;
        }
        counts &= r.counts_ok;
        batching &= r.batching_ok;
        r1 &= r.r1_ok;
        single &= r.single_ok;
    }
    let pass = max_abs_diff <= tol && counts && batching && r1 && single;
    let report = EquivalenceReport {
        precision: cfg.precision,
        mode: cfg.mode,
        seeds: cfg.equivalence.seeds,
        seq_len: cfg.task.seq_len,
        decode_tokens: cfg.equivalence.decode_tokens,
        max_abs_diff,
        worst_seed,
        tolerance: tol,
        op_count_matches: counts,
        batching: BatchingCheck {
            chunks_per_step: cfg.equivalence.batching.clone(),
            identical: batching,
        },
        reduction: ReductionCheck {
            full_retention_identical: r1,
            single_chunk_identical: single,
        },
        pass,
    };
    Outcome::new("equivalence", &report, pass)
}
