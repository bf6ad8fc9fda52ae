//! Harness commands. Each returns a JSON report and a pass flag; reports
//! hold only seed-determined values so repeated runs are byte-identical.

pub mod bench;
pub mod equivalence;
pub mod gen_task;
pub mod score_dump;
pub mod train;

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use lrsa_core::{AttentionKind, LagkvParams, MaskMode, Model, Real, Rng, RunConfig};
use serde::Serialize;
use serde_json::Value;

/// Result of one command.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: &'static str,
    pub report: Value,
    pub pass: bool,
}

impl Outcome {
    pub fn new(name: &'static str, report: &impl Serialize, pass: bool) -> Result<Self> {
        Ok(Self {
            name,
            report: serde_json::to_value(report)?,
            pass,
        })
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.report).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(dir, &format!("{}.json", self.name), self.to_json().as_bytes())
    }
}

pub fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn mask_mode(kind: AttentionKind, params: &LagkvParams) -> MaskMode<'_> {
    match kind {
        AttentionKind::Vanilla => MaskMode::Vanilla,
        AttentionKind::Lrsa => MaskMode::Lrsa(params),
    }
}

/// Stream ids carved out of the run seed.
pub(crate) const MODEL_STREAM: u64 = 0;
pub(crate) const DATA_STREAM: u64 = 1;

/// Model built in f64 and cast, so both precisions share the same draw.
pub(crate) fn init_model<T: Real>(cfg: &RunConfig, rng: &mut Rng) -> Result<Model<T>> {
    Ok(Model::<f64>::init(cfg.model, rng)?.cast())
}

pub(crate) fn random_tokens(rng: &mut Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(vocab)).collect()
}
