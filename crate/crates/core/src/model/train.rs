//! Training loop and finite-difference gradient check.

use serde::Serialize;

use super::{AdamW, MaskMode, Model, RetentionPlan, TrainConfig};
use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::lagkv::LagkvParams;
use crate::real::Real;
use crate::rng::Rng;
use crate::task::TaskInstance;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub curve: Vec<StepRecord>,
    /// Mean loss over the trailing `loss_window` steps; `None` with no steps.
    pub final_loss: Option<f64>,
    pub diverged: bool,
}

fn mode_for<'a>(kind: AttentionKind, params: &'a LagkvParams) -> MaskMode<'a> {
    match kind {
        AttentionKind::Vanilla => MaskMode::Vanilla,
        AttentionKind::Lrsa => MaskMode::Lrsa(params),
    }
}

/// Loss and averaged gradients over a batch. Items are evaluated on worker
/// threads and reduced in batch order, so the result does not depend on
/// scheduling.
fn batch_grads<T: Real + Send + Sync>(
    model: &Model<T>,
    batch: &[TaskInstance],
    mode: MaskMode<'_>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let results: Vec<Result<(T, Vec<Tensor<T>>, RetentionPlan)>> = if batch.len() == 1 {
        vec![model.loss_and_grads(&batch[0].tokens, &batch[0].targets, mode)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .iter()
                .map(|item| s.spawn(move || model.loss_and_grads(&item.tokens, &item.targets, mode)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    let inv = T::one() / T::lit(batch.len() as f64);
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor<T>>> = None;
    for r in results {
        let (l, grads, _) = r?;
        loss += l.as_f64();
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.accumulate(g)?;
                }
            }
        }
    }
    let grads = total.unwrap_or_default().into_iter().map(|g| g.scale(inv)).collect();
    Ok((loss / batch.len() as f64, grads))
}

/// Runs `cfg.steps` AdamW steps. `next_item` supplies training sequences in
/// order. Stops early (with `diverged` set) on a non-finite or exploding loss.
pub fn train<T: Real + Send + Sync>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    kind: AttentionKind,
    params: &LagkvParams,
    mut next_item: impl FnMut() -> Result<TaskInstance>,
) -> Result<TrainReport> {
    let p = cfg.problems();
    if !p.is_empty() {
        return Err(Error::InvalidConfig(p));
    }
    let mode = mode_for(kind, params);
    let mut opt = AdamW::new(cfg.clone(), &model.params.tensors());
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut diverged = false;
    for step in 1..=cfg.steps {
        let batch = (0..cfg.batch_size).map(|_| next_item()).collect::<Result<Vec<_>>>()?;
        let (loss, grads) = batch_grads(model, &batch, mode)?;
        curve.push(StepRecord {
            step,
            lr: cfg.lr_at(step),
            loss,
        });
        if !loss.is_finite() || loss > cfg.max_loss {
            log::error!("step {step}: loss {loss} diverged");
            diverged = true;
            break;
        }
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("{kind} step {step}: loss {loss:.5} lr {:.2e}", cfg.lr_at(step));
        }
        opt.step(&mut model.params.tensors_mut(), &grads)?;
    }
    let tail = &curve[curve.len().saturating_sub(cfg.loss_window)..];
    let final_loss = (!tail.is_empty()).then(|| tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64);
    Ok(TrainReport {
        curve,
        final_loss,
        diverged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub step: f64,
    pub floor: f64,
}

/// Denominator floor of the relative error: coordinates whose gradients are
/// both below it are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients against central differences with step `h`
/// on `coordinates` random parameter entries. In LRSA mode the retention
/// sets are frozen from the unperturbed pass.
pub fn grad_check(
    model: &Model<f64>,
    item: &TaskInstance,
    kind: AttentionKind,
    params: &LagkvParams,
    coordinates: usize,
    h: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let (_, grads, plan) = model.loss_and_grads(&item.tokens, &item.targets, mode_for(kind, params))?;
    let mode = match kind {
        AttentionKind::Vanilla => MaskMode::Vanilla,
        AttentionKind::Lrsa => MaskMode::Frozen(params, &plan),
    };
    let names = model.params.names();
    let sizes: Vec<usize> = model.params.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut probe = model.clone();
    let mut worst = (0.0, (String::new(), 0));
    for _ in 0..coordinates {
        let mut flat = rng.below(total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let original = model.params.tensors()[which].data()[flat];
        let mut eval = |x: f64| -> Result<f64> {
            probe.params.tensors_mut()[which].data_mut()[flat] = x;
            probe.loss(&item.tokens, &item.targets, mode)
        };
        let numeric = (eval(original + h)? - eval(original - h)?) / (2.0 * h);
        eval(original)?;
        let analytic = grads[which].data()[flat];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if rel > worst.0 || worst.1 .0.is_empty() {
            worst = (rel, (names[which].clone(), flat));
        }
    }
    Ok(GradCheckReport {
        coordinates,
        max_rel_err: worst.0,
        worst: worst.1,
        step: h,
        floor: GRAD_CHECK_FLOOR,
    })
}
