//! Trains the toy model on the configured task and writes the loss curve.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use lrsa_core::model::checkpoint;
use lrsa_core::model::train::{train, StepRecord};
use lrsa_core::{AttentionKind, Precision, Real, Rng, RunConfig};
use serde::Serialize;

use super::{init_model, write_file, Outcome, DATA_STREAM, MODEL_STREAM};

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub mode: AttentionKind,
    pub precision: Precision,
    pub steps_run: usize,
    pub final_loss: Option<f64>,
    pub diverged: bool,
    pub config: RunConfig,
}

/// `step,lr,loss` with shortest round-trip float formatting.
pub fn curve_csv(curve: &[StepRecord]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in curve {
        writeln!(s, "{},{:?},{:?}", r.step, r.lr, r.loss).expect("write to string");
    }
    s
}

/// Trains in `cfg.mode`. Writes `train_<mode>.csv` and, unless the run
/// diverged, `model_<mode>.ckpt` into `out` when given.
pub fn run<T: Real>(cfg: &RunConfig, out: Option<&Path>) -> Result<Outcome> {
    let base = Rng::new(cfg.seed);
    let mut model = init_model::<T>(cfg, &mut base.split(MODEL_STREAM))?;
    let mut data = base.split(DATA_STREAM);
    let report = train(&mut model, &cfg.train, cfg.mode, &cfg.lagkv, || cfg.task.sample(&mut data))?;
    let mode = cfg.mode;
    if let Some(dir) = out {
        write_file(dir, &format!("train_{mode}.csv"), curve_csv(&report.curve).as_bytes())?;
        if !report.diverged {
            write_file(dir, &format!("model_{mode}.ckpt"), &checkpoint::save(&model)?)?;
        }
    }
    let summary = TrainSummary {
        mode,
        precision: cfg.precision,
        steps_run: report.curve.len(),
        final_loss: report.final_loss,
        diverged: report.diverged,
        config: cfg.clone(),
    };
    let name = match mode {
        AttentionKind::Vanilla => "train_vanilla",
        AttentionKind::Lrsa => "train_lrsa",
    };
    let mut outcome = Outcome::new(name, &summary, !report.diverged)?;
    outcome.report["curve_csv"] = serde_json::Value::String(format!("train_{mode}.csv"));
    Ok(outcome)
}
