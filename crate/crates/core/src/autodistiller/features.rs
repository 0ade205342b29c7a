//! Dataset featurisation: IDF-weighted corpus embedding, description
//! embedding and reference scores.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::encoder::{EncoderConfig, EncoderModel};
use crate::pipeline::data::TaskData;
use crate::pipeline::eval::evaluate;
use crate::pipeline::train::{train_supervised, SupervisedSettings};
use crate::rng::{streams, RngStreams};

/// Word vectors; unknown words map to the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

const BUNDLED: &str = include_str!("../../assets/embeddings.txt");

impl EmbeddingTable {
    /// Parses `word<TAB>v1 v2 ... vd` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dim = None;
        let mut vectors = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::input(format!("embedding line {}: expected word<TAB>vector", n + 1)))?;
            let v = rest
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::input(format!("embedding line {}: {e}", n + 1)))?;
            if v.is_empty() || *dim.get_or_insert(v.len()) != v.len() {
                return Err(Error::input(format!("embedding line {}: inconsistent width", n + 1)));
            }
            vectors.insert(word.to_string(), v);
        }
        let dim = dim.ok_or_else(|| Error::input("embedding table is empty"))?;
        Ok(Self { dim, vectors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The table shipped with the crate.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED).expect("bundled embeddings parse")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }
}

/// Word form of a token id in the synthetic corpora.
pub fn token_word(id: usize) -> String {
    format!("w{id}")
}

pub fn corpus_words(data: &TaskData) -> Vec<Vec<String>> {
    data.train
        .iter()
        .map(|e| e.tokens.iter().map(|&t| token_word(t)).collect())
        .collect()
}

/// Lower-cased alphanumeric words of a description.
pub fn description_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Document frequencies over a collection of registered datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    pub n_datasets: usize,
    pub doc_freq: BTreeMap<String, usize>,
}

impl IdfTable {
    pub fn new<'a>(corpora: impl IntoIterator<Item = &'a [Vec<String>]>) -> Self {
        let mut doc_freq = BTreeMap::new();
        let mut n = 0;
        for corpus in corpora {
            n += 1;
            let words: BTreeSet<&String> = corpus.iter().flatten().collect();
            for w in words {
                *doc_freq.entry(w.clone()).or_insert(0) += 1;
            }
        }
        Self { n_datasets: n, doc_freq }
    }

    /// `ln((1 + N) / (1 + N_w))`.
    pub fn idf(&self, word: &str) -> f64 {
        let nw = self.doc_freq.get(word).copied().unwrap_or(0);
        ((1 + self.n_datasets) as f64 / (1 + nw) as f64).ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFeatures {
    pub context_embedding: Vec<f64>,
    pub task_embedding: Vec<f64>,
    pub baseline_score: f64,
    pub teacher_score: f64,
    pub n_examples: usize,
}

impl DatasetFeatures {
    /// Flat numeric form used by the meta-regressor.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.context_embedding.clone();
        v.extend(&self.task_embedding);
        v.extend([self.baseline_score, self.teacher_score, self.n_examples as f64]);
        v
    }

    pub fn width(&self) -> usize {
        self.context_embedding.len() + self.task_embedding.len() + 3
    }
}

/// Context embedding `(1/|s|) Σ_w IDF_w v_w` over every corpus token, and
/// the plain mean of the description's word vectors.
pub fn featurize_dataset(
    corpus: &[Vec<String>],
    description: &[String],
    table: &EmbeddingTable,
    idf: &IdfTable,
    baseline_score: f64,
    teacher_score: f64,
) -> Result<DatasetFeatures> {
    let n_tokens: usize = corpus.iter().map(Vec::len).sum();
    if n_tokens == 0 {
        return Err(Error::input("cannot featurise an empty corpus"));
    }
    let d = table.dim();
    let mut ctx = vec![0.0; d];
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in corpus.iter().flatten() {
        *counts.entry(w).or_insert(0) += 1;
    }
    for (w, c) in counts {
        if let Some(v) = table.vector(w) {
            let s = idf.idf(w) * c as f64;
            ctx.iter_mut().zip(v).for_each(|(a, b)| *a += s * b);
        }
    }
    ctx.iter_mut().for_each(|a| *a /= n_tokens as f64);
    let mut task = vec![0.0; d];
    if !description.is_empty() {
        for w in description {
            if let Some(v) = table.vector(w) {
                task.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            }
        }
        task.iter_mut().for_each(|a| *a /= description.len() as f64);
    }
    Ok(DatasetFeatures {
        context_embedding: ctx,
        task_embedding: task,
        baseline_score,
        teacher_score,
        n_examples: corpus.len(),
    })
}

/// Held-out score of a weak reference model: a 1-layer width-8 encoder
/// trained with plain cross-entropy.
pub fn baseline_score(data: &TaskData, settings: &SupervisedSettings) -> Result<f64> {
    let cfg = EncoderConfig::student(1, 8, data.meta.vocab_size, data.meta.n_classes, data.meta.kind);
    let mut rng = RngStreams::new(settings.seed).stream(streams::MODEL_INIT);
    let model = EncoderModel::new(cfg, &mut rng)?;
    let (model, _) = train_supervised(model, &data.train, settings)?;
    evaluate(&model, &data.test, data.meta.kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn table() -> EmbeddingTable {
        EmbeddingTable::parse("a\t1 0\nb\t0 1\nc\t2 2\n").unwrap()
    }

    #[test]
    fn single_dataset_has_zero_context() {
        let corpus = vec![words("a b"), words("c a")];
        let idf = IdfTable::new([corpus.as_slice()]);
        assert_eq!(idf.idf("a"), 0.0);
        let f = featurize_dataset(&corpus, &words("b"), &table(), &idf, 0.5, 0.9).unwrap();
        assert_eq!(f.context_embedding, vec![0.0, 0.0]);
        assert_eq!(f.task_embedding, vec![0.0, 1.0]);
        assert_eq!(f.n_examples, 2);
    }

    #[test]
    fn unique_word_idf() {
        let one = vec![words("a b")];
        let two = vec![words("b b")];
        let idf = IdfTable::new([one.as_slice(), two.as_slice()]);
        assert!((idf.idf("a") - (1.5f64).ln()).abs() < 1e-15);
        assert!((idf.idf("a") - 0.405465).abs() < 1e-6);
        assert_eq!(idf.idf("b"), 0.0);
        let f1 = featurize_dataset(&one, &[], &table(), &idf, 0.0, 1.0).unwrap();
        assert!((f1.context_embedding[0] - 1.5f64.ln() / 2.0).abs() < 1e-15);
        let f2 = featurize_dataset(&two, &[], &table(), &idf, 0.0, 1.0).unwrap();
        assert_eq!(f2.context_embedding, vec![0.0, 0.0]);
    }

    #[test]
    fn duplicating_the_corpus_keeps_the_context() {
        let one = vec![words("a b c"), words("a")];
        let two = vec![words("c")];
        let idf = IdfTable::new([one.as_slice(), two.as_slice()]);
        let f = featurize_dataset(&one, &[], &table(), &idf, 0.0, 1.0).unwrap();
        let doubled: Vec<Vec<String>> = one.iter().chain(&one).cloned().collect();
        let g = featurize_dataset(&doubled, &[], &table(), &idf, 0.0, 1.0).unwrap();
        for (a, b) in f.context_embedding.iter().zip(&g.context_embedding) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(featurize_dataset(&[], &[], &table(), &idf, 0.0, 1.0).is_err());
    }

    #[test]
    fn bundled_table_covers_synthetic_tokens() {
        let t = EmbeddingTable::bundled();
        assert!(t.vector(&token_word(0)).is_some());
        assert!(t.vector(&token_word(63)).is_some());
        assert!(t.vector("sequence").is_some());
        assert_eq!(t.vector("w0").unwrap().len(), t.dim());
    }
}
