//! Synthetic recall tasks.
//!
//! Token layout: `0` is filler, keys occupy `1..=n_keys` and values the
//! rest of the vocabulary, so the two alphabets never overlap.

use serde::{Deserialize, Serialize};

use oryx_core::infer::RetrievalTask;
use oryx_core::train::Example;
use oryx_core::{Error, Result, SeededRng};

pub const FILLER: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mqar,
    Needle,
}

fn d_vocab() -> usize {
    64
}
fn d_len() -> usize {
    128
}
fn d_pairs() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    #[serde(default = "d_vocab")]
    pub vocab: usize,
    #[serde(default = "d_len")]
    pub seq_len: usize,
    #[serde(default = "d_pairs")]
    pub n_pairs: usize,
    /// Query count for MQAR; defaults to filling the sequence.
    #[serde(default)]
    pub n_queries: Option<usize>,
    /// Index of the queried pair for the needle task; random when absent.
    #[serde(default)]
    pub needle_position: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticTask {
    pub fn mqar(seq_len: usize, n_pairs: usize, seed: u64) -> Self {
        Self { kind: TaskKind::Mqar, vocab: 64, seq_len, n_pairs, n_queries: None, needle_position: None, seed }
    }

    pub fn needle(context_len: usize, n_pairs: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Needle,
            vocab: 64,
            seq_len: context_len,
            n_pairs,
            n_queries: None,
            needle_position: None,
            seed,
        }
    }

    pub fn n_keys(&self) -> usize {
        (self.vocab - 1) / 2
    }

    pub fn n_values(&self) -> usize {
        self.vocab - 1 - self.n_keys()
    }

    pub fn key_token(&self, i: usize) -> usize {
        1 + i
    }

    pub fn value_token(&self, i: usize) -> usize {
        1 + self.n_keys() + i
    }

    pub fn is_key(&self, tok: usize) -> bool {
        (1..=self.n_keys()).contains(&tok)
    }

    pub fn queries(&self) -> usize {
        self.n_queries.unwrap_or((self.seq_len.saturating_sub(2 * self.n_pairs)) / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab < 5 {
            return bad(format!("vocabulary {} too small for keys and values", self.vocab));
        }
        if self.n_pairs == 0 || self.n_pairs > self.n_keys() || self.n_pairs > self.n_values() {
            return bad(format!("{} pairs do not fit {} keys", self.n_pairs, self.n_keys()));
        }
        match self.kind {
            TaskKind::Mqar => {
                if 2 * self.n_pairs + 2 * self.queries() > self.seq_len || self.queries() == 0 {
                    return bad(format!(
                        "{} pairs and {} queries do not fit length {}",
                        self.n_pairs,
                        self.queries(),
                        self.seq_len
                    ));
                }
            }
            TaskKind::Needle => {
                if 2 * self.n_pairs > self.seq_len {
                    return bad(format!("{} pairs do not fit context length {}", self.n_pairs, self.seq_len));
                }
                if let Some(p) = self.needle_position {
                    if p >= self.n_pairs {
                        return bad(format!("needle position {p} outside {} pairs", self.n_pairs));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One MQAR sequence with the positions whose next token is an answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MqarSequence {
    pub tokens: Vec<usize>,
    /// `(position, answer)`: the token at `position + 1` must be `answer`.
    pub answers: Vec<(usize, usize)>,
}

impl MqarSequence {
    /// Training view: scored only at answer positions.
    pub fn example(&self) -> Example {
        let mut targets = vec![None; self.tokens.len()];
        for &(p, a) in &self.answers {
            targets[p] = Some(a);
        }
        Example { tokens: self.tokens.clone(), targets }
    }
}

fn draw_pairs(task: &SyntheticTask, rng: &mut SeededRng) -> Vec<(usize, usize)> {
    let keys = rng.sample_distinct(task.n_keys(), task.n_pairs);
    let vals = rng.sample_distinct(task.n_values(), task.n_pairs);
    keys.into_iter().zip(vals).map(|(k, v)| (task.key_token(k), task.value_token(v))).collect()
}

/// Sequence `index` of the task: key-value pairs, then queries that each
/// present a key followed by its value, then filler.
pub fn mqar_sequence(task: &SyntheticTask, index: u64) -> Result<MqarSequence> {
    task.validate()?;
    let mut rng = SeededRng::new(task.seed).fork(index);
    let pairs = draw_pairs(task, &mut rng);
    let mut tokens = Vec::with_capacity(task.seq_len);
    for &(k, v) in &pairs {
        tokens.extend([k, v]);
    }
    let mut answers = Vec::with_capacity(task.queries());
    for _ in 0..task.queries() {
        let (k, v) = pairs[rng.below(pairs.len())];
        answers.push((tokens.len(), v));
        tokens.extend([k, v]);
    }
    tokens.resize(task.seq_len, FILLER);
    Ok(MqarSequence { tokens, answers })
}

pub fn generate_mqar(task: &SyntheticTask, start: u64, count: usize) -> Result<Vec<MqarSequence>> {
    (0..count as u64).map(|i| mqar_sequence(task, start + i)).collect()
}

/// Recovers the expected answers by reading the pairs back out of the
/// sequence: every key seen for the second time is answered by the value
/// that followed it the first time.
pub fn scan_mqar_answers(tokens: &[usize], task: &SyntheticTask) -> Vec<(usize, usize)> {
    let mut table = std::collections::HashMap::new();
    let mut out = Vec::new();
    let mut i = 0;
    while i + 1 < tokens.len() {
        let (k, v) = (tokens[i], tokens[i + 1]);
        if !task.is_key(k) {
            break;
        }
        match table.get(&k) {
            Some(&known) => out.push((i, known)),
            None => {
                table.insert(k, v);
            }
        }
        i += 2;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedleItem {
    pub context: Vec<usize>,
    pub query: Vec<usize>,
    pub answer: Vec<usize>,
    /// Pair index of the needle within the haystack.
    pub needle: usize,
}

impl NeedleItem {
    pub fn task(&self) -> RetrievalTask {
        RetrievalTask { context: self.context.clone(), query: self.query.clone(), answer: self.answer.clone() }
    }
}

/// Haystack of distinct key-value pairs (one of them the needle) padded
/// with filler to the context length; the query presents the needle key.
pub fn needle_item(task: &SyntheticTask, index: u64) -> Result<NeedleItem> {
    task.validate()?;
    let mut rng = SeededRng::new(task.seed).fork(index);
    let pairs = draw_pairs(task, &mut rng);
    let needle = match task.needle_position {
        Some(p) => p,
        None => rng.below(pairs.len()),
    };
    let mut context: Vec<usize> = pairs.iter().flat_map(|&(k, v)| [k, v]).collect();
    context.resize(task.seq_len, FILLER);
    let (k, v) = pairs[needle];
    Ok(NeedleItem { context, query: vec![k], answer: vec![v], needle })
}

pub fn generate_needle(task: &SyntheticTask, start: u64, count: usize) -> Result<Vec<NeedleItem>> {
    (0..count as u64).map(|i| needle_item(task, start + i)).collect()
}

/// The value that follows the first occurrence of the query key.
pub fn scan_needle_answer(item: &NeedleItem) -> Option<usize> {
    let key = *item.query.first()?;
    item.context.windows(2).step_by(2).find(|w| w[0] == key).map(|w| w[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_single_query() {
        let task = SyntheticTask { n_queries: Some(1), ..SyntheticTask::mqar(4, 1, 3) };
        let s = mqar_sequence(&task, 0).unwrap();
        assert_eq!(s.tokens.len(), 4);
        assert_eq!(s.tokens[0], s.tokens[2]);
        assert_eq!(s.answers, vec![(2, s.tokens[1])]);
    }

    #[test]
    fn deterministic_and_self_consistent() {
        let task = SyntheticTask::mqar(128, 8, 7);
        let a = generate_mqar(&task, 0, 20).unwrap();
        assert_eq!(a, generate_mqar(&task, 0, 20).unwrap());
        for s in &a {
            assert_eq!(scan_mqar_answers(&s.tokens, &task), s.answers);
            assert!(s.tokens.iter().all(|&t| t < 64));
        }
    }

    #[test]
    fn alphabets_are_disjoint() {
        let task = SyntheticTask::mqar(128, 8, 1);
        let s = mqar_sequence(&task, 5).unwrap();
        for (i, &t) in s.tokens.iter().enumerate() {
            if i % 2 == 0 {
                assert!(task.is_key(t));
            } else {
                assert!(t > task.n_keys());
            }
        }
    }

    #[test]
    fn oversize_requests_are_rejected() {
        assert!(SyntheticTask { n_queries: Some(60), ..SyntheticTask::mqar(128, 8, 0) }.validate().is_err());
        assert!(SyntheticTask::mqar(128, 40, 0).validate().is_err());
        let bad = SyntheticTask { needle_position: Some(8), ..SyntheticTask::needle(64, 8, 0) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn needle_boundaries_and_scan() {
        for pos in [0, 23] {
            let task = SyntheticTask { needle_position: Some(pos), ..SyntheticTask::needle(64, 24, 2) };
            let item = needle_item(&task, 1).unwrap();
            assert_eq!(item.context.len(), 64);
            assert_eq!(item.needle, pos);
            assert_eq!(item.context[2 * pos], item.query[0]);
            assert_eq!(scan_needle_answer(&item), Some(item.answer[0]));
        }
        let task = SyntheticTask::needle(64, 24, 2);
        assert_eq!(generate_needle(&task, 0, 5).unwrap(), generate_needle(&task, 0, 5).unwrap());
    }
}
