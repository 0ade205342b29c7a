//! Synthetic tasks and dataset files.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{Example, Lexicon};
use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_atomic, write_jsonl};
use crate::nn::encoder::HeadKind;
use crate::rng::{RngStreams, StreamRng};

/// A task with train and held-out splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub meta: TaskMeta,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    /// Synonyms used by the RA and BT operators.
    pub lexicon: Lexicon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub id: String,
    pub kind: HeadKind,
    pub vocab_size: usize,
    pub n_classes: usize,
    /// Free-text task description (used for task embeddings).
    pub description: String,
}

impl TaskData {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::input(format!("task '{}' has an empty split", self.meta.id)));
        }
        for ex in self.train.iter().chain(&self.test) {
            ex.validate()?;
            check_example(ex, &self.meta)?;
        }
        Ok(())
    }

    /// The first `n` training examples, keeping the held-out split.
    pub fn with_train_prefix(&self, n: usize) -> Self {
        Self {
            meta: self.meta.clone(),
            train: self.train[..n.min(self.train.len())].to_vec(),
            test: self.test.clone(),
            lexicon: self.lexicon.clone(),
        }
    }

    /// Writes `meta.json`, `train.jsonl`, `test.jsonl` and `lexicon.tsv`
    /// under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("meta.json"), &serde_json::to_vec_pretty(&self.meta)?)?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)?;
        self.lexicon.save(&dir.join("lexicon.tsv"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: TaskMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
        let data = Self {
            train: read_jsonl(&dir.join("train.jsonl"))?,
            test: read_jsonl(&dir.join("test.jsonl"))?,
            lexicon: match dir.join("lexicon.tsv") {
                p if p.exists() => Lexicon::load(&p)?,
                _ => Lexicon::default(),
            },
            meta,
        };
        data.validate()?;
        Ok(data)
    }
}

fn check_example(ex: &Example, meta: &TaskMeta) -> Result<()> {
    if let Some(t) = ex.tokens.iter().find(|&&t| t >= meta.vocab_size) {
        return Err(Error::input(format!("token {t} >= vocab_size {}", meta.vocab_size)));
    }
    let ys: &[usize] = match (meta.kind, &ex.label, &ex.tags) {
        (HeadKind::Classification, Some(l), None) => std::slice::from_ref(l),
        (HeadKind::Tagging, None, Some(t)) => t,
        _ => return Err(Error::input("example target does not match the task kind")),
    };
    if let Some(y) = ys.iter().find(|&&y| y >= meta.n_classes) {
        return Err(Error::input(format!("class {y} >= n_classes {}", meta.n_classes)));
    }
    Ok(())
}

fn block_lexicon(blocks: usize, per: usize) -> Lexicon {
    Lexicon::new((0..blocks).flat_map(|b| (0..per).map(move |k| (b * per + k, b * per + (k + 1) % per))))
}

/// Topic-pair classification.
///
/// Each sequence draws two latent topics; the first half of its tokens come
/// from the first topic's vocabulary and the second half from the second's,
/// with a `noise` fraction replaced by uniform tokens. The label is
/// `(z1 + z2) mod n_classes`, so the token distribution is class-conditional
/// but no single half determines the class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationTask {
    pub vocab_size: usize,
    pub n_classes: usize,
    pub n_topics: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
}

impl Default for ClassificationTask {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            n_classes: 4,
            n_topics: 8,
            min_len: 12,
            max_len: 16,
            noise: 0.25,
        }
    }
}

impl ClassificationTask {
    fn validate(&self) -> Result<()> {
        if self.n_topics == 0 || self.vocab_size < self.n_topics || self.n_classes == 0 {
            return Err(Error::config("classification task needs vocab >= topics >= 1"));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::config("classification lengths need 2 <= min_len <= max_len"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config("noise must lie in [0, 1]"));
        }
        Ok(())
    }

    fn topic_token(&self, z: usize, rng: &mut StreamRng) -> usize {
        let per = self.vocab_size / self.n_topics;
        if rng.random::<f64>() < self.noise {
            rng.random_range(0..self.vocab_size)
        } else {
            z * per + rng.random_range(0..per)
        }
    }

    pub fn sample(&self, rng: &mut StreamRng) -> Example {
        let z1 = rng.random_range(0..self.n_topics);
        let z2 = rng.random_range(0..self.n_topics);
        let len = rng.random_range(self.min_len..=self.max_len);
        let half = len / 2;
        let tokens = (0..len)
            .map(|i| self.topic_token(if i < half { z1 } else { z2 }, rng))
            .collect();
        Example::classification(tokens, (z1 + z2) % self.n_classes)
    }

    /// Each topic token maps to its neighbour within the same topic block.
    pub fn lexicon(&self) -> Lexicon {
        let per = self.vocab_size / self.n_topics;
        block_lexicon(self.n_topics, per)
    }

    pub fn generate(&self, id: &str, n_train: usize, n_test: usize, seed: u64) -> Result<TaskData> {
        self.validate()?;
        let mut rng = RngStreams::new(seed).stream("data-gen");
        let train = (0..n_train).map(|_| self.sample(&mut rng)).collect();
        let test = (0..n_test).map(|_| self.sample(&mut rng)).collect();
        Ok(TaskData {
            lexicon: self.lexicon(),
            meta: TaskMeta {
                id: id.into(),
                kind: HeadKind::Classification,
                vocab_size: self.vocab_size,
                n_classes: self.n_classes,
                description: "classify a sequence by the combination of the topics of its two halves".into(),
            },
            train,
            test,
        })
    }
}

/// Hidden-Markov tagging: sticky tag transitions, each tag emitting from
/// its own token block, with a `noise` fraction of emissions drawn from a
/// block shared by all tags. Tag 0 plays the role of an outside tag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaggingTask {
    pub vocab_size: usize,
    pub n_tags: usize,
    pub stay: f64,
    pub noise: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for TaggingTask {
    fn default() -> Self {
        Self {
            vocab_size: 40,
            n_tags: 4,
            stay: 0.7,
            noise: 0.3,
            min_len: 6,
            max_len: 12,
        }
    }
}

impl TaggingTask {
    fn validate(&self) -> Result<()> {
        if self.n_tags < 2 || self.vocab_size < 2 * (self.n_tags + 1) {
            return Err(Error::config("tagging task needs >= 2 tags and 2 tokens per block"));
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return Err(Error::config("tagging lengths need 1 <= min_len <= max_len"));
        }
        if !(0.0..=1.0).contains(&self.stay) || !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config("stay and noise must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut StreamRng) -> Example {
        let per = self.vocab_size / (self.n_tags + 1);
        let shared = self.n_tags * per;
        let len = rng.random_range(self.min_len..=self.max_len);
        let mut tags = Vec::with_capacity(len);
        let mut tokens = Vec::with_capacity(len);
        let mut tag = rng.random_range(0..self.n_tags);
        for i in 0..len {
            if i > 0 && rng.random::<f64>() >= self.stay {
                tag = rng.random_range(0..self.n_tags);
            }
            let tok = if rng.random::<f64>() < self.noise {
                shared + rng.random_range(0..self.vocab_size - shared)
            } else {
                tag * per + rng.random_range(0..per)
            };
            tags.push(tag);
            tokens.push(tok);
        }
        Example::tagging(tokens, tags)
    }

    /// Each tag-block token maps to its neighbour within the block.
    pub fn lexicon(&self) -> Lexicon {
        block_lexicon(self.n_tags, self.vocab_size / (self.n_tags + 1))
    }

    pub fn generate(&self, id: &str, n_train: usize, n_test: usize, seed: u64) -> Result<TaskData> {
        self.validate()?;
        let mut rng = RngStreams::new(seed).stream("data-gen");
        let train = (0..n_train).map(|_| self.sample(&mut rng)).collect();
        let test = (0..n_test).map(|_| self.sample(&mut rng)).collect();
        Ok(TaskData {
            lexicon: self.lexicon(),
            meta: TaskMeta {
                id: id.into(),
                kind: HeadKind::Tagging,
                vocab_size: self.vocab_size,
                n_classes: self.n_tags,
                description: "tag every token of a sequence with its hidden state".into(),
            },
            train,
            test,
        })
    }
}
