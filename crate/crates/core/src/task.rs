//! Synthetic sequence tasks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Copy,
    Needle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab: usize,
    pub needle_len: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            seq_len: 272,
            vocab: 64,
            needle_len: 4,
        }
    }
}

impl TaskSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self.kind {
            TaskKind::Copy => {
                if self.seq_len < 2 || self.seq_len % 2 != 0 {
                    out.push(format!("task.seq_len must be even and >= 2 for copy, got {}", self.seq_len));
                }
                if self.vocab == 0 {
                    out.push("task.vocab must be >= 1".into());
                }
            }
            TaskKind::Needle => {
                if self.needle_len < 2 {
                    out.push(format!("task.needle_len must be >= 2, got {}", self.needle_len));
                }
                if 2 * self.needle_len + 1 > self.seq_len {
                    out.push(format!(
                        "task.seq_len ({}) must fit the needle twice plus the query marker ({})",
                        self.seq_len,
                        2 * self.needle_len + 1
                    ));
                }
                if self.vocab < 4 {
                    out.push(format!("task.vocab must be >= 4 for needle, got {}", self.vocab));
                }
            }
        }
        out
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<TaskInstance> {
        match self.kind {
            TaskKind::Copy => gen_copy_task(rng, self.seq_len, self.vocab),
            TaskKind::Needle => gen_needle_task(rng, self.seq_len, self.vocab, self.needle_len),
        }
    }
}

/// One training or evaluation sequence. `targets[i]` is the token expected
/// after position `i`, or `None` where the loss ignores the prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    /// Span `[start, end)` of the embedded needle.
    pub needle: Option<(usize, usize)>,
}

impl TaskInstance {
    pub fn scored(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Random first half repeated as the second half. Only predictions whose
/// target lies in the second half are scored, since the first half carries
/// no learnable signal.
pub fn gen_copy_task(rng: &mut Rng, seq_len: usize, vocab: usize) -> Result<TaskInstance> {
    let spec = TaskSpec {
        kind: TaskKind::Copy,
        seq_len,
        vocab,
        needle_len: 0,
    };
    let p = spec.problems();
    if !p.is_empty() {
        return Err(Error::InvalidConfig(p));
    }
    let half = seq_len / 2;
    let first: Vec<usize> = (0..half).map(|_| rng.below(vocab)).collect();
    let tokens: Vec<usize> = first.iter().chain(&first).copied().collect();
    let targets = (0..seq_len)
        .map(|i| (i + 1 >= half && i + 1 < seq_len).then(|| tokens[i + 1]))
        .collect();
    Ok(TaskInstance {
        tokens,
        targets,
        needle: None,
    })
}

/// Filler from the lower half of the vocabulary with a needle drawn from the
/// upper half (excluding the last id, which marks the query). The sequence
/// ends with the marker and the needle again; the needle's second half is
/// scored.
pub fn gen_needle_task(rng: &mut Rng, seq_len: usize, vocab: usize, needle_len: usize) -> Result<TaskInstance> {
    let spec = TaskSpec {
        kind: TaskKind::Needle,
        seq_len,
        vocab,
        needle_len,
    };
    let p = spec.problems();
    if !p.is_empty() {
        return Err(Error::InvalidConfig(p));
    }
    let filler = vocab / 2;
    let marker = vocab - 1;
    let needle: Vec<usize> = (0..needle_len).map(|_| filler + rng.below(marker - filler)).collect();
    let query_start = seq_len - needle_len - 1;
    let pos = rng.below(query_start - needle_len + 1);
    let mut tokens: Vec<usize> = (0..seq_len).map(|_| rng.below(filler)).collect();
    tokens[pos..pos + needle_len].copy_from_slice(&needle);
    tokens[query_start] = marker;
    tokens[query_start + 1..].copy_from_slice(&needle);
    let key_len = needle_len.div_ceil(2);
    let mut targets = vec![None; seq_len];
    for (i, t) in targets.iter_mut().enumerate().take(seq_len - 1).skip(query_start + key_len) {
        *t = Some(tokens[i + 1]);
    }
    Ok(TaskInstance {
        tokens,
        targets,
        needle: Some((pos, pos + needle_len)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_is_deterministic_and_repeats() {
        let a = gen_copy_task(&mut Rng::new(1), 8, 4).unwrap();
        let b = gen_copy_task(&mut Rng::new(1), 8, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens[..4], a.tokens[4..]);
        assert_eq!(a.targets.len(), 8);
        assert_eq!(a.scored(), 4);
        assert_eq!(a.targets[3], Some(a.tokens[4]));
        assert_eq!(a.targets[2], None);
        assert_eq!(a.targets[7], None);
        assert!(a.tokens.iter().all(|&t| t < 4));
    }

    #[test]
    fn copy_rejects_odd_length() {
        assert!(matches!(gen_copy_task(&mut Rng::new(1), 7, 4), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn needle_layout() {
        for seed in 0..20 {
            let t = gen_needle_task(&mut Rng::new(seed), 40, 16, 4).unwrap();
            let (s, e) = t.needle.unwrap();
            assert_eq!(e - s, 4);
            assert!(t.tokens[s..e].iter().all(|&x| (8..15).contains(&x)));
            assert_eq!(t.tokens[35], 15);
            assert_eq!(t.tokens[36..], t.tokens[s..e]);
            let filler: Vec<usize> = (0..40).filter(|i| !(s..e).contains(i) && *i < 35).collect();
            assert!(filler.iter().all(|&i| t.tokens[i] < 8));
            // Targets: the needle's last two tokens.
            assert_eq!(t.scored(), 2);
            assert_eq!(t.targets[37], Some(t.tokens[38]));
            assert_eq!(t, gen_needle_task(&mut Rng::new(seed), 40, 16, 4).unwrap());
        }
    }

    #[test]
    fn needle_too_long() {
        assert!(gen_needle_task(&mut Rng::new(0), 8, 16, 4).is_err());
    }
}
