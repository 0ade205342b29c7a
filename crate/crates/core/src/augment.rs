//! Stacked data-augmentation policies and mixup.
//!
//! Discrete operators act on token ids and keep the sequence length. Mixup
//! acts on embeddings and is applied at batch level after every discrete
//! operator.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::encoder::{EncoderModel, HeadKind, ModelInput};
use crate::nn::graph::softmax_in_place;
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AugOp {
    /// Contextual augmentation: mask and refill.
    #[serde(rename = "CA")]
    Ca,
    /// Random augmentation: synonym replacement and adjacent swaps.
    #[serde(rename = "RA")]
    Ra,
    /// Paraphrase by round trip.
    #[serde(rename = "BT")]
    Bt,
    Mixup,
}

impl fmt::Display for AugOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugOp::Ca => "CA",
            AugOp::Ra => "RA",
            AugOp::Bt => "BT",
            AugOp::Mixup => "Mixup",
        })
    }
}

impl FromStr for AugOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ca" => Ok(AugOp::Ca),
            "ra" => Ok(AugOp::Ra),
            "bt" => Ok(AugOp::Bt),
            "mixup" => Ok(AugOp::Mixup),
            other => Err(Error::config(format!("unknown augmentation op '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum LambdaDist {
    Uniform,
    /// Symmetric `Beta(a, a)`.
    Beta { a: f64 },
}

impl LambdaDist {
    pub fn sample(&self, rng: &mut impl Rng) -> Result<f64> {
        match *self {
            LambdaDist::Uniform => Ok(rng.random::<f64>()),
            LambdaDist::Beta { a } => {
                let d = Beta::new(a, a).map_err(|e| Error::config(format!("beta({a}): {e}")))?;
                Ok(d.sample(rng))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub ops: Vec<AugOp>,
    pub ra_swap: f64,
    pub ra_replace: f64,
    pub ca_mask: f64,
    pub lambda: LambdaDist,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            ops: Vec::new(),
            ra_swap: 0.1,
            ra_replace: 0.1,
            ca_mask: 0.15,
            lambda: LambdaDist::Uniform,
        }
    }
}

impl AugPolicy {
    pub fn new(ops: Vec<AugOp>) -> Self {
        Self {
            ops,
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn has_mixup(&self) -> bool {
        self.ops.contains(&AugOp::Mixup)
    }

    /// The discrete operators, in order.
    pub fn discrete_ops(&self) -> impl Iterator<Item = AugOp> + '_ {
        self.ops.iter().copied().filter(|&o| o != AugOp::Mixup)
    }

    /// Short label such as `RA+Mixup`, or `none`.
    pub fn label(&self) -> String {
        if self.ops.is_empty() {
            return "none".into();
        }
        self.ops.iter().map(|o| o.to_string()).collect::<Vec<_>>().join("+")
    }

    pub fn validate(&self) -> Result<()> {
        let n_mix = self.ops.iter().filter(|&&o| o == AugOp::Mixup).count();
        if n_mix > 1 || (n_mix == 1 && self.ops.last() != Some(&AugOp::Mixup)) {
            return Err(Error::config("Mixup must appear at most once, as the last op"));
        }
        for (name, p) in [
            ("ra_swap", self.ra_swap),
            ("ra_replace", self.ra_replace),
            ("ca_mask", self.ca_mask),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if let LambdaDist::Beta { a } = self.lambda {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config(format!("beta parameter {a} must be positive")));
            }
        }
        Ok(())
    }
}

/// One example: a class label or a tag per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_label: Option<Vec<Vec<f64>>>,
}

impl Example {
    pub fn classification(tokens: Vec<usize>, label: usize) -> Self {
        Self {
            tokens,
            label: Some(label),
            tags: None,
            soft_label: None,
        }
    }

    pub fn tagging(tokens: Vec<usize>, tags: Vec<usize>) -> Self {
        Self {
            tokens,
            label: None,
            tags: Some(tags),
            soft_label: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::input("example has no tokens"));
        }
        match (&self.label, &self.tags) {
            (Some(_), None) => {}
            (None, Some(t)) if t.len() == self.tokens.len() => {}
            (None, Some(t)) => {
                return Err(Error::input(format!(
                    "{} tags for {} tokens",
                    t.len(),
                    self.tokens.len()
                )))
            }
            _ => return Err(Error::input("example needs exactly one of label or tags")),
        }
        if let Some(soft) = &self.soft_label {
            for row in soft {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                    return Err(Error::input("soft label is not a distribution"));
                }
            }
        }
        Ok(())
    }

    /// Per-row one-hot targets: 1×C for a label, T×C for tags.
    pub fn one_hot(&self, n_classes: usize) -> Result<Tensor> {
        let ids: Vec<usize> = match (&self.label, &self.tags) {
            (Some(l), _) => vec![*l],
            (None, Some(t)) => t.clone(),
            _ => return Err(Error::input("example has no target")),
        };
        let mut d = vec![0.0; ids.len() * n_classes];
        for (r, &y) in ids.iter().enumerate() {
            if y >= n_classes {
                return Err(Error::input(format!("class {y} >= {n_classes}")));
            }
            d[r * n_classes + y] = 1.0;
        }
        Ok(Tensor::matrix(ids.len(), n_classes, d))
    }
}

/// Synonym map over token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    map: BTreeMap<usize, usize>,
}

impl Lexicon {
    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self {
            map: pairs.into_iter().collect(),
        }
    }

    pub fn synonym(&self, token: usize) -> Option<usize> {
        self.map.get(&token).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Parses `token_id<TAB>synonym_id` lines; blank lines and `#` comments
    /// are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split('\t');
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::input(format!("lexicon line {}: expected two fields", n + 1)));
            };
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::input(format!("lexicon line {}: bad id '{s}'", n + 1)))
            };
            map.insert(parse(a)?, parse(b)?);
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.map.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// Token frequencies of a training corpus, sampled by inverse CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramTable {
    tokens: Vec<usize>,
    cumulative: Vec<f64>,
}

impl UnigramTable {
    pub fn from_corpus<'a>(seqs: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
        for s in seqs {
            for &t in s {
                *counts.entry(t).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::input("unigram table needs a nonempty corpus"));
        }
        let total: u64 = counts.values().sum();
        let mut acc = 0u64;
        let mut tokens = Vec::with_capacity(counts.len());
        let mut cumulative = Vec::with_capacity(counts.len());
        for (t, c) in counts {
            acc += c;
            tokens.push(t);
            cumulative.push(acc as f64 / total as f64);
        }
        Ok(Self { tokens, cumulative })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let i = self.cumulative.partition_point(|&c| c <= u);
        self.tokens[i.min(self.tokens.len() - 1)]
    }
}

/// Refills masked positions (the CA operator's model).
pub trait MaskFiller {
    fn fill(&self, tokens: &mut [usize], masked: &[usize], rng: &mut dyn rand::RngCore);
}

/// Produces a same-length paraphrase and the permutation it applied, so
/// per-token labels can follow their tokens (the BT operator's model).
pub trait Paraphraser {
    fn paraphrase(&self, tokens: &[usize], rng: &mut dyn rand::RngCore) -> (Vec<usize>, Vec<usize>);
}

/// Fills each masked slot with a draw from the corpus unigram table.
#[derive(Debug, Clone)]
pub struct UnigramFiller<'a> {
    pub table: &'a UnigramTable,
}

impl MaskFiller for UnigramFiller<'_> {
    fn fill(&self, tokens: &mut [usize], masked: &[usize], mut rng: &mut dyn rand::RngCore) {
        for &i in masked {
            tokens[i] = self.table.sample(&mut rng);
        }
    }
}

/// Replaces every lexicon-covered token, then swaps one random adjacent
/// pair.
#[derive(Debug, Clone)]
pub struct LexiconParaphraser<'a> {
    pub lexicon: &'a Lexicon,
}

impl Paraphraser for LexiconParaphraser<'_> {
    fn paraphrase(&self, tokens: &[usize], rng: &mut dyn rand::RngCore) -> (Vec<usize>, Vec<usize>) {
        let mut out: Vec<usize> = tokens
            .iter()
            .map(|&t| self.lexicon.synonym(t).unwrap_or(t))
            .collect();
        let mut perm: Vec<usize> = (0..tokens.len()).collect();
        if tokens.len() >= 2 {
            let i = rng.random_range(0..tokens.len() - 1);
            out.swap(i, i + 1);
            perm.swap(i, i + 1);
        }
        (out, perm)
    }
}

fn permute_tags(ex: &mut Example, perm: &[usize]) {
    if let Some(tags) = &ex.tags {
        ex.tags = Some(perm.iter().map(|&p| tags[p]).collect());
    }
}

fn random_augment(policy: &AugPolicy, ex: &mut Example, lexicon: &Lexicon, rng: &mut impl Rng) {
    for t in ex.tokens.iter_mut() {
        if policy.ra_replace > 0.0 && rng.random::<f64>() < policy.ra_replace {
            if let Some(s) = lexicon.synonym(*t) {
                *t = s;
            }
        }
    }
    if policy.ra_swap > 0.0 {
        let n = ex.tokens.len();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in 0..n.saturating_sub(1) {
            if rng.random::<f64>() < policy.ra_swap {
                ex.tokens.swap(i, i + 1);
                perm.swap(i, i + 1);
            }
        }
        permute_tags(ex, &perm);
    }
}

/// Applies the discrete operators of `policy` in order with the default
/// stand-in models; mixup is left to batch assembly.
pub fn apply_policy(
    policy: &AugPolicy,
    example: &Example,
    lexicon: &Lexicon,
    unigram: &UnigramTable,
    rng: &mut impl Rng,
) -> Result<Example> {
    apply_policy_with(
        policy,
        example,
        lexicon,
        &UnigramFiller { table: unigram },
        &LexiconParaphraser { lexicon },
        rng,
    )
}

pub fn apply_policy_with(
    policy: &AugPolicy,
    example: &Example,
    lexicon: &Lexicon,
    filler: &dyn MaskFiller,
    paraphraser: &dyn Paraphraser,
    rng: &mut impl Rng,
) -> Result<Example> {
    policy.validate()?;
    example.validate()?;
    let mut ex = example.clone();
    ex.soft_label = None;
    for op in policy.discrete_ops() {
        match op {
            AugOp::Ra => random_augment(policy, &mut ex, lexicon, rng),
            AugOp::Ca => {
                let masked: Vec<usize> = (0..ex.tokens.len())
                    .filter(|_| rng.random::<f64>() < policy.ca_mask)
                    .collect();
                filler.fill(&mut ex.tokens, &masked, rng);
            }
            AugOp::Bt => {
                let (tokens, perm) = paraphraser.paraphrase(&ex.tokens, rng);
                if tokens.len() != ex.tokens.len() {
                    return Err(Error::input("paraphraser changed the sequence length"));
                }
                ex.tokens = tokens;
                permute_tags(&mut ex, &perm);
            }
            AugOp::Mixup => unreachable!("filtered"),
        }
    }
    Ok(ex)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::input(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

fn lerp(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::input(format!(
            "mixup shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `(λ·xi + (1−λ)·xj, λ·yi + (1−λ)·yj)`.
pub fn mixup_classification(xi: &Tensor, xj: &Tensor, yi: &[f64], yj: &[f64], lambda: f64) -> Result<(Tensor, Vec<f64>)> {
    check_lambda(lambda)?;
    if yi.len() != yj.len() {
        return Err(Error::input("mixup labels differ in length"));
    }
    let x = lerp(xi, xj, lambda)?;
    let y = yi.iter().zip(yj).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
    Ok((x, y))
}

/// Per-position mixup of T×h inputs and T×C label rows.
pub fn mixup_tagging(xi: &Tensor, xj: &Tensor, yi: &Tensor, yj: &Tensor, lambda: f64) -> Result<(Tensor, Tensor)> {
    check_lambda(lambda)?;
    if xi.rows() != yi.rows() {
        return Err(Error::input("tag rows must match sequence length"));
    }
    Ok((lerp(xi, xj, lambda)?, lerp(yi, yj, lambda)?))
}

/// Softmax of the teacher's logits for each input: 1×C per sequence for
/// classification, T×C for tagging.
pub fn teacher_relabel(teacher: &EncoderModel, inputs: &[ModelInput]) -> Result<Vec<Tensor>> {
    let logits = teacher.predict_logits(inputs)?;
    let c = logits.cols();
    let mut probs = logits.into_data();
    probs.chunks_mut(c).for_each(softmax_in_place);
    let per_seq = teacher.config.head == HeadKind::Tagging;
    let mut out = Vec::with_capacity(inputs.len());
    let mut row = 0;
    for inp in inputs {
        let r = if per_seq { inp.len() } else { 1 };
        out.push(Tensor::matrix(r, c, probs[row * c..(row + r) * c].to_vec()));
        row += r;
    }
    Ok(out)
}

/// Random partner index for every batch position.
pub fn mixup_partners(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
