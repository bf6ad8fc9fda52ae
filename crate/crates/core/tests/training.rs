use lrsa_core::attention::AttnConfig;
use lrsa_core::autodiff::cross_entropy;
use lrsa_core::model::checkpoint;
use lrsa_core::model::train::train;
use lrsa_core::model::LrSchedule;
use lrsa_core::{gen_copy_task, AttentionKind, Graph, LagkvParams, MaskMode, Model, ModelConfig, Rng, Tensor, TrainConfig};

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab: 8,
        layers: 2,
        attn: AttnConfig {
            d_model: 16,
            heads: 2,
            kv_heads: 1,
            head_dim: 8,
            rope_base: 10000.0,
        },
        mlp_hidden: 32,
        norm_eps: 1e-6,
    }
}

#[test]
fn shuffled_targets_cost_more_on_a_trained_model() {
    let params = LagkvParams::new(2, 4, 0.5).unwrap();
    let mut model = Model::<f64>::init(tiny(), &mut Rng::new(1)).unwrap();
    let cfg = TrainConfig {
        steps: 300,
        lr: 1e-2,
        schedule: LrSchedule::Constant,
        ..TrainConfig::default()
    };
    let mut data = Rng::new(2);
    let report = train(&mut model, &cfg, AttentionKind::Lrsa, &params, || gen_copy_task(&mut data, 24, 8)).unwrap();
    assert!(!report.diverged);

    let mut eval = Rng::new(3);
    let (mut clean, mut shuffled) = (0.0, 0.0);
    for _ in 0..10 {
        let item = gen_copy_task(&mut eval, 24, 8).unwrap();
        clean += model.loss(&item.tokens, &item.targets, MaskMode::Lrsa(&params)).unwrap();
        // Rotate the scored targets by one slot.
        let idx: Vec<usize> = (0..24).filter(|&i| item.targets[i].is_some()).collect();
        let mut targets = item.targets.clone();
        for (j, &i) in idx.iter().enumerate() {
            targets[i] = item.targets[idx[(j + 1) % idx.len()]];
        }
        shuffled += model.loss(&item.tokens, &targets, MaskMode::Lrsa(&params)).unwrap();
    }
    assert!(shuffled > clean + 1.0, "clean {clean}, shuffled {shuffled}");
}

#[test]
fn training_is_deterministic() {
    let params = LagkvParams::new(2, 4, 0.5).unwrap();
    let run = || {
        let mut model = Model::<f64>::init(tiny(), &mut Rng::new(5)).unwrap();
        let cfg = TrainConfig {
            steps: 20,
            ..TrainConfig::default()
        };
        let mut data = Rng::new(6);
        let r = train(&mut model, &cfg, AttentionKind::Lrsa, &params, || gen_copy_task(&mut data, 24, 8)).unwrap();
        (r, checkpoint::save(&model).unwrap())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let restored = checkpoint::load::<f64>(&ca).unwrap();
    let t: Vec<usize> = (0..24).map(|i| i % 8).collect();
    assert_eq!(
        restored.forward(&t, MaskMode::Lrsa(&params)).unwrap(),
        checkpoint::load::<f64>(&cb).unwrap().forward(&t, MaskMode::Lrsa(&params)).unwrap()
    );
}

#[test]
fn zero_head_gradient_is_softmax_minus_onehot() {
    // logits = h·Wᵀ with W = 0: uniform softmax, so dL/dW = (p − y)ᵀ·h / m.
    let mut rng = Rng::new(9);
    let (n, d, v) = (5, 3, 4);
    let h = Tensor::new(vec![n, d], rng.normal_vec(n * d, 1.0)).unwrap();
    let targets = [Some(1), None, Some(3), Some(0), None];
    let mut g = Graph::<f64>::new();
    let hv = g.constant(h.clone());
    let w = g.param(Tensor::zeros(&[v, d]));
    let wt = g.transpose(w).unwrap();
    let logits = g.matmul(hv, wt).unwrap();
    let loss = g.cross_entropy(logits, &targets).unwrap();
    g.backward(loss).unwrap();
    assert!((g.value(loss).item() - (v as f64).ln()).abs() < 1e-15);

    let m = targets.iter().flatten().count() as f64;
    let grad = g.grad(w).unwrap();
    for c in 0..v {
        for j in 0..d {
            let mut expect = 0.0;
            for (i, t) in targets.iter().enumerate() {
                if let Some(t) = t {
                    let y = if *t == c { 1.0 } else { 0.0 };
                    expect += (1.0 / v as f64 - y) * h.row(i)[j];
                }
            }
            assert!((grad.row(c)[j] - expect / m).abs() < 1e-15);
        }
    }
}

#[test]
fn cross_entropy_matches_log_softmax() {
    let mut rng = Rng::new(4);
    let logits = Tensor::new(vec![3, 6], rng.normal_vec(18, 3.0)).unwrap();
    let targets = [Some(2), Some(5), Some(0)];
    let mut want = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        want += lse - row[t.unwrap()];
    }
    let got = cross_entropy(&logits, &targets).unwrap();
    assert!((got - want / 3.0).abs() < 1e-12);
}
