use lrsa_core::attention::{visibility_mask, AttnConfig};
use lrsa_core::kv_cache::LayerKvCache;
use lrsa_core::lagkv::score_heads;
use lrsa_core::{
    score_chunk, select_topk, AttentionKind, ChunkScores, Graph, LagkvParams, MaskMode, Model, ModelConfig,
    PrefillState, RetentionSet, Rng, Tensor,
};
use proptest::prelude::*;

fn randn(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], rng.normal_vec(rows * cols, 1.0)).unwrap()
}

fn small_model(kv_heads: usize, seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        vocab: 17,
        layers: 2,
        attn: AttnConfig {
            d_model: 16,
            heads: 4,
            kv_heads,
            head_dim: 4,
            rope_base: 10000.0,
        },
        mlp_hidden: 24,
        norm_eps: 1e-6,
    };
    Model::init(cfg, &mut Rng::new(seed)).unwrap()
}

fn tokens(seed: u64, n: usize) -> Vec<usize> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.below(17)).collect()
}

/// Cache size straight from the segment definitions.
fn size_law(s: usize, l: usize, k: usize, n: usize) -> usize {
    if n <= s {
        return n;
    }
    let c = (n - s) / l;
    let t = (n - s) % l;
    s + c.saturating_sub(1) * k + c.min(1) * l + t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn selection_ignores_shared_affine_maps(seed in 0u64..10_000, l in 3usize..12, d in 1usize..6, r in 0.1f64..1.0) {
        let mut rng = Rng::new(seed);
        let params = LagkvParams { sink_size: 0, lag_size: l, retention_ratio: r, epsilon: 0.0 };
        let (k, v, kn, vn) = (randn(&mut rng, l, d), randn(&mut rng, l, d), randn(&mut rng, l, d), randn(&mut rng, l, d));
        let scale: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.2, 5.0)).collect();
        let shift: Vec<f64> = (0..d).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let affine = |t: &Tensor<f64>| {
            let mut out = t.clone();
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x = scale[i % d] * *x + shift[i % d];
            }
            out
        };
        let base = score_chunk(&k, &v, &kn, &vn, &params).unwrap();
        let moved = score_chunk(&affine(&k), &affine(&v), &affine(&kn), &affine(&vn), &params).unwrap();
        let kk = params.retain_count();
        let pick = |s: &Tensor<f64>| select_topk(&ChunkScores { chunk_index: 1, per_head: vec![s.data().to_vec()] }, kk).unwrap();
        prop_assert_eq!(pick(&base), pick(&moved));
        prop_assert!((base.sum() - 2.0).abs() <= 1e-9);
    }

    #[test]
    fn cache_size_law_under_any_blocking(seed in 0u64..10_000, s in 0usize..5, l in 1usize..6, r in 0.05f64..1.0, blocks in proptest::collection::vec(1usize..9, 1..12)) {
        let params = LagkvParams { sink_size: s, lag_size: l, retention_ratio: r, epsilon: 1e-6 };
        let k = ((r * l as f64).floor() as usize).clamp(1, l);
        let mut rng = Rng::new(seed);
        let mut cache = LayerKvCache::<f64>::new(2, 3, params);
        let mut n = 0;
        for b in blocks {
            let keys = vec![randn(&mut rng, b, 3), randn(&mut rng, b, 3)];
            let values = vec![randn(&mut rng, b, 3), randn(&mut rng, b, 3)];
            let pos: Vec<usize> = (n..n + b).collect();
            cache.append_tokens(&keys, &values, &pos).unwrap();
            cache.compress_ready().unwrap();
            n += b;
            prop_assert_eq!(cache.token_count(), size_law(s, l, k, n));
            let kept = cache.retained_positions(1);
            prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(kept.iter().take(s.min(n)).copied().eq(0..s.min(n)));
        }
    }

    #[test]
    fn prefill_is_batching_invariant(seed in 0u64..1000, n in 1usize..40, cps in 1usize..5, kv in prop_oneof![Just(1usize), Just(2), Just(4)]) {
        let model = small_model(kv, seed);
        let params = LagkvParams::new(3, 4, 0.5).unwrap();
        let t = tokens(seed + 1, n);
        let mut a = PrefillState::new(&model, params, AttentionKind::Lrsa, 1).unwrap();
        let mut b = PrefillState::new(&model, params, AttentionKind::Lrsa, cps).unwrap();
        let ha = a.prefill(&model, &t).unwrap();
        let hb = b.prefill(&model, &t).unwrap();
        prop_assert!(ha.bitwise_eq(&hb));
        prop_assert_eq!(a.op_counter, b.op_counter);
        prop_assert_eq!(a.cache.report(), b.cache.report());
    }

    #[test]
    fn cache_path_matches_masked_forward(seed in 0u64..1000, n in 1usize..40, split in 0usize..40, r in prop_oneof![Just(0.25f64), Just(0.5), Just(1.0)]) {
        let model = small_model(2, seed);
        let params = LagkvParams::new(2, 4, r).unwrap();
        let t = tokens(seed + 7, n);
        let split = split.min(n);
        let mut st = PrefillState::new(&model, params, AttentionKind::Lrsa, 2).unwrap();
        let mut rows = vec![model.logits(&st.prefill(&model, &t[..split]).unwrap()).unwrap()];
        for &tok in &t[split..] {
            rows.push(st.decode_step(&model, tok).unwrap());
        }
        let cached = Tensor::concat_rows(&rows.iter().collect::<Vec<_>>()).unwrap();
        let full = model.forward(&t, MaskMode::Lrsa(&params)).unwrap();
        prop_assert!(cached.bitwise_eq(&full));
    }
}

#[test]
fn model_output_is_causal_in_both_modes() {
    let model = small_model(2, 3);
    let params = LagkvParams::new(2, 4, 0.5).unwrap();
    let t = tokens(4, 30);
    for mode in [MaskMode::Vanilla, MaskMode::Lrsa(&params)] {
        let base = model.forward(&t, mode).unwrap();
        for p in [0, 5, 13, 29] {
            let mut t2 = t.clone();
            t2[p] = (t2[p] + 3) % 17;
            let other = model.forward(&t2, mode).unwrap();
            assert!(base.slice_rows(0, p).unwrap().bitwise_eq(&other.slice_rows(0, p).unwrap()));
            assert!(!base.slice_rows(p, 1).unwrap().bitwise_eq(&other.slice_rows(p, 1).unwrap()));
        }
    }
}

#[test]
fn evicted_values_receive_no_gradient_from_later_chunks() {
    let params = LagkvParams::new(2, 4, 0.5).unwrap();
    let n = 2 + 4 * 5;
    let mut rng = Rng::new(11);
    let (q, k, v) = (randn(&mut rng, n, 4), randn(&mut rng, n, 4), randn(&mut rng, n, 4));
    let sets = lrsa_core::attention::retentions_for_sequence(std::slice::from_ref(&k), std::slice::from_ref(&v), &params).unwrap();
    let pos: Vec<usize> = (0..n).collect();
    let (mask, _) = visibility_mask::<f64>(0, &pos, &pos, &sets, &params, 1).unwrap();

    let mut g = Graph::<f64>::new();
    let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
    let kt = g.transpose(kv).unwrap();
    let s = g.matmul(qv, kt).unwrap();
    let s = g.scale(s, 0.5);
    let s = g.add_const(s, &mask).unwrap();
    let w = g.softmax(s, 1).unwrap();
    let o = g.matmul(w, vv).unwrap();
    // Queries of chunks 3.. only; chunk 1 is evicted from their view.
    let late: Vec<usize> = (params.chunk_start(3)..n).collect();
    let o = g.gather_rows(o, &late).unwrap();
    let loss = g.sum(o);
    g.backward(loss).unwrap();

    let kept: Vec<usize> = sets[0].positions(0, &params).collect();
    let grad_v = g.grad(vv).unwrap();
    let grad_k = g.grad(kv).unwrap();
    for p in params.chunk_start(1)..params.chunk_start(2) {
        let zero = grad_v.row(p).iter().chain(grad_k.row(p)).all(|&x| x == 0.0);
        assert_eq!(zero, !kept.contains(&p), "position {p}");
    }
}

#[test]
fn retention_ignores_queries() {
    // Layer 0 keys and values do not depend on the query projection, so
    // neither do its retention sets.
    let a = small_model(2, 21);
    let mut b = a.clone();
    for x in b.params.layers[0].wq.data_mut() {
        *x = -3.0 * *x + 0.5;
    }
    let params = LagkvParams::new(2, 4, 0.5).unwrap();
    let t = tokens(22, 34);
    let (_, pa) = a.forward_with_plan(&t, MaskMode::Lrsa(&params)).unwrap();
    let (_, pb) = b.forward_with_plan(&t, MaskMode::Lrsa(&params)).unwrap();
    assert_eq!(pa.layers[0], pb.layers[0]);
    let _scores_take_only_kv: fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>, &Tensor<f64>, &LagkvParams) -> _ =
        score_chunk::<f64>;
}

#[test]
fn gqa_heads_share_retention() {
    let model = small_model(1, 31);
    let params = LagkvParams::new(2, 4, 0.5).unwrap();
    let t = tokens(32, 30);
    let (_, plan) = model.forward_with_plan(&t, MaskMode::Lrsa(&params)).unwrap();
    let sets: &Vec<RetentionSet> = &plan.layers[1];
    assert!(sets.iter().all(|s| s.per_head.len() == 1));
    let trace = model.layer_kv(&t, MaskMode::Lrsa(&params)).unwrap();
    let l = params.lag_size;
    let s = params.chunk_start(2);
    let inputs = vec![(
        trace[1].keys[0].slice_rows(s, l).unwrap(),
        trace[1].values[0].slice_rows(s, l).unwrap(),
        trace[1].keys[0].slice_rows(s + l, l).unwrap(),
        trace[1].values[0].slice_rows(s + l, l).unwrap(),
    )];
    let again = select_topk(&score_heads(2, &inputs, &params).unwrap(), 2).unwrap();
    assert_eq!(sets[1], again);
}
