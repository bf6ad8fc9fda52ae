//! Samples one task instance from the configured generator.

use anyhow::Result;
use lrsa_core::{Rng, RunConfig, TaskInstance, TaskSpec};
use serde::Serialize;

use super::{Outcome, DATA_STREAM};

#[derive(Clone, Debug, Serialize)]
pub struct GenTaskReport {
    pub spec: TaskSpec,
    pub seed: u64,
    pub instance: TaskInstance,
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    let instance = cfg.task.sample(&mut Rng::new(cfg.seed).split(DATA_STREAM))?;
    let ok = instance.tokens.len() == cfg.task.seq_len
        && instance.targets.len() == instance.tokens.len()
        && instance.tokens.iter().all(|&t| t < cfg.task.vocab);
    let report = GenTaskReport {
        spec: cfg.task,
        seed: cfg.seed,
        instance,
    };
    Outcome::new("task", &report, ok)
}
