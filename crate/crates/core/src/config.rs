//! Run configuration shared by every harness command.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, AttnConfig};
use crate::error::{Error, Result};
use crate::lagkv::LagkvParams;
use crate::model::{ModelConfig, TrainConfig};
use crate::task::TaskSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivalenceConfig {
    pub seeds: usize,
    /// Tokens decoded one at a time after the prefill.
    pub decode_tokens: usize,
    pub batching: Vec<usize>,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            seeds: 100,
            decode_tokens: 8,
            batching: vec![1, 2, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Sequence lengths to prefill; empty means `S + c·L` for `c` in 1, 2, 4, 8, 16.
    pub lengths: Vec<usize>,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: Vec::new(),
            repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lagkv: LagkvParams,
    pub chunks_per_step: usize,
    pub precision: Precision,
    pub seed: u64,
    pub mode: AttentionKind,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub equivalence: EquivalenceConfig,
    pub bench: BenchConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lagkv: LagkvParams::default(),
            chunks_per_step: 2,
            precision: Precision::F64,
            seed: 0,
            mode: AttentionKind::Lrsa,
            task: TaskSpec::default(),
            train: TrainConfig::default(),
            equivalence: EquivalenceConfig::default(),
            bench: BenchConfig::default(),
            output: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every violated constraint, in field order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.model.problems();
        out.extend(self.lagkv.problems());
        if self.chunks_per_step == 0 {
            out.push("chunks_per_step must be >= 1".into());
        }
        out.extend(self.task.problems());
        if self.task.vocab > self.model.vocab {
            out.push(format!(
                "task.vocab ({}) exceeds model.vocab ({})",
                self.task.vocab, self.model.vocab
            ));
        }
        out.extend(self.train.problems());
        if self.equivalence.seeds == 0 {
            out.push("equivalence.seeds must be >= 1".into());
        }
        if self.equivalence.batching.contains(&0) {
            out.push("equivalence.batching entries must be >= 1".into());
        }
        if self.bench.repeats == 0 {
            out.push("bench.repeats must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }

    pub fn attn(&self) -> &AttnConfig {
        &self.model.attn
    }

    pub fn bench_lengths(&self) -> Vec<usize> {
        if self.bench.lengths.is_empty() {
            [1, 2, 4, 8, 16]
                .iter()
                .map(|c| self.lagkv.sink_size + c * self.lagkv.lag_size)
                .collect()
        } else {
            self.bench.lengths.clone()
        }
    }
}
