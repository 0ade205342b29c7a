//! A small post-norm transformer encoder used for teachers, students and
//! baseline models.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::graph::{Graph, ParamVars, Var};
use crate::nn::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One label per sequence, predicted from the mean-pooled last layer.
    Classification,
    /// One label per position.
    Tagging,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub h_units: usize,
    pub h_mid: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub head: HeadKind,
    pub max_len: usize,
}

impl EncoderConfig {
    /// Desk-scale teacher: 4 layers of width 32.
    pub fn teacher(vocab_size: usize, n_classes: usize, head: HeadKind) -> Self {
        Self {
            n_layers: 4,
            h_units: 32,
            h_mid: 64,
            n_heads: 4,
            vocab_size,
            n_classes,
            head,
            max_len: 64,
        }
    }

    pub fn student(n_layers: usize, h_units: usize, vocab_size: usize, n_classes: usize, head: HeadKind) -> Self {
        Self {
            n_layers,
            h_units,
            h_mid: 2 * h_units,
            n_heads: if h_units.is_multiple_of(4) { 4 } else { 2 },
            vocab_size,
            n_classes,
            head,
            max_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.h_units == 0 || self.h_mid == 0 {
            return Err(Error::config("encoder sizes must be positive"));
        }
        if self.n_heads == 0 || !self.h_units.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "h_units {} not divisible by n_heads {}",
                self.h_units, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.n_classes == 0 || self.max_len == 0 {
            return Err(Error::config("vocab_size, n_classes and max_len must be positive"));
        }
        Ok(())
    }
}

/// One model input: token ids, a pre-embedded matrix, or a mixup of two
/// token sequences interpolated in this model's own embedding space.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    Tokens(Vec<usize>),
    /// Token-embedding matrix of shape T×h_units; positions are added inside.
    Embedded(Tensor),
    Mixed {
        a: Vec<usize>,
        b: Vec<usize>,
        lambda: f64,
    },
}

impl ModelInput {
    pub fn len(&self) -> usize {
        match self {
            ModelInput::Tokens(t) => t.len(),
            ModelInput::Embedded(t) => t.rows(),
            ModelInput::Mixed { a, b, .. } => a.len().min(b.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph handles produced by one batched forward pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// B×C for classification, (ΣT)×C for tagging.
    pub logits: Var,
    /// One (ΣT)×h matrix per block, in layer order.
    pub hidden: Vec<Var>,
    /// Row offsets of each sequence within the stacked matrices.
    pub segments: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let h = config.h_units;
        let mut p = ParamSet::new();
        p.insert("embed.tok", Tensor::randn(config.vocab_size, h, 0.5, rng));
        p.insert("embed.pos", Tensor::randn(config.max_len, h, 0.1, rng));
        for l in 0..config.n_layers {
            let pre = format!("layer{l}.");
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("{pre}{w}"), Tensor::randn(h, h, (1.0 / h as f64).sqrt(), rng));
            }
            for b in ["bq", "bk", "bv", "bo", "ln1.b", "ln2.b"] {
                p.insert(format!("{pre}{b}"), Tensor::zeros(1, h));
            }
            p.insert(format!("{pre}ln1.g"), Tensor::filled(1, h, 1.0));
            p.insert(format!("{pre}ln2.g"), Tensor::filled(1, h, 1.0));
            p.insert(
                format!("{pre}w1"),
                Tensor::randn(h, config.h_mid, (1.0 / h as f64).sqrt(), rng),
            );
            p.insert(format!("{pre}b1"), Tensor::zeros(1, config.h_mid));
            p.insert(
                format!("{pre}w2"),
                Tensor::randn(config.h_mid, h, (1.0 / config.h_mid as f64).sqrt(), rng),
            );
            p.insert(format!("{pre}b2"), Tensor::zeros(1, h));
        }
        p.insert(
            "head.w",
            Tensor::randn(h, config.n_classes, (1.0 / h as f64).sqrt(), rng),
        );
        p.insert("head.b", Tensor::zeros(1, config.n_classes));
        Ok(Self { config, params: p })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn width(&self) -> usize {
        self.config.h_units
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let cfg = &self.config;
        let ids: Vec<&Vec<usize>> = match input {
            ModelInput::Tokens(t) => vec![t],
            ModelInput::Mixed { a, b, lambda } => {
                if !(0.0..=1.0).contains(lambda) {
                    return Err(Error::input(format!("mixup lambda {lambda} outside [0,1]")));
                }
                vec![a, b]
            }
            ModelInput::Embedded(t) => {
                if t.cols() != cfg.h_units {
                    return Err(Error::input(format!(
                        "embedded input width {} != h_units {}",
                        t.cols(),
                        cfg.h_units
                    )));
                }
                vec![]
            }
        };
        for seq in ids {
            if let Some(bad) = seq.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::input(format!(
                    "token id {bad} >= vocab_size {}",
                    cfg.vocab_size
                )));
            }
        }
        let n = input.len();
        if n == 0 {
            return Err(Error::input("empty input sequence"));
        }
        if n > cfg.max_len {
            return Err(Error::input(format!("sequence length {n} > max_len {}", cfg.max_len)));
        }
        Ok(())
    }

    /// Batched forward pass recorded on `g` with parameters bound as `pv`.
    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, batch: &[ModelInput]) -> Result<EncoderOutput> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let cfg = &self.config;
        let tok = pv.get("embed.tok")?;
        let mut parts = Vec::with_capacity(batch.len());
        let mut segments = vec![0];
        let mut pos_idx = Vec::new();
        for input in batch {
            self.check_input(input)?;
            let rows = match input {
                ModelInput::Tokens(t) => g.gather(tok, t)?,
                ModelInput::Embedded(t) => g.constant(t.clone()),
                ModelInput::Mixed { a, b, lambda } => {
                    let n = input.len();
                    let ea = g.gather(tok, &a[..n])?;
                    let eb = g.gather(tok, &b[..n])?;
                    let ea = g.scale(ea, *lambda);
                    let eb = g.scale(eb, 1.0 - lambda);
                    g.add(ea, eb)?
                }
            };
            let n = input.len();
            pos_idx.extend(0..n);
            segments.push(segments.last().unwrap() + n);
            parts.push(rows);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)?
        };
        let pos = g.gather(pv.get("embed.pos")?, &pos_idx)?;
        let mut x = g.add(x, pos)?;
        let mut hidden = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |name: &str| pv.get(&format!("layer{l}.{name}"));
            let lin = |g: &mut Graph, x: Var, w: &str, b: &str| -> Result<Var> {
                let y = g.matmul(x, p(w)?)?;
                g.add_row(y, p(b)?)
            };
            let q = lin(g, x, "wq", "bq")?;
            let k = lin(g, x, "wk", "bk")?;
            let v = lin(g, x, "wv", "bv")?;
            let a = g.attention(q, k, v, &segments, cfg.n_heads)?;
            let o = lin(g, a, "wo", "bo")?;
            let r = g.add(x, o)?;
            x = g.layer_norm(r, p("ln1.g")?, p("ln1.b")?)?;
            let f = lin(g, x, "w1", "b1")?;
            let f = g.gelu(f);
            let f = lin(g, f, "w2", "b2")?;
            let r = g.add(x, f)?;
            x = g.layer_norm(r, p("ln2.g")?, p("ln2.b")?)?;
            hidden.push(x);
        }
        let feats = match cfg.head {
            HeadKind::Classification => g.segment_mean(x, &segments)?,
            HeadKind::Tagging => x,
        };
        let logits = g.matmul(feats, pv.get("head.w")?)?;
        let logits = g.add_row(logits, pv.get("head.b")?)?;
        Ok(EncoderOutput {
            logits,
            hidden,
            segments,
        })
    }

    /// Logits for a batch with no gradient tracking.
    pub fn predict_logits(&self, batch: &[ModelInput]) -> Result<Tensor> {
        let mut g = Graph::new();
        let pv = g.bind_frozen(&self.params);
        let out = self.forward(&mut g, &pv, batch)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let model: EncoderModel = serde_json::from_slice(&bytes)?;
        model.config.validate()?;
        Ok(model)
    }
}

/// Single-sequence forward pass: logits (1×C or T×C) and one T×h hidden
/// state per layer.
pub fn encoder_forward(model: &EncoderModel, input: &ModelInput) -> Result<(Tensor, Vec<Tensor>)> {
    let mut g = Graph::new();
    let pv = g.bind_frozen(&model.params);
    let out = model.forward(&mut g, &pv, std::slice::from_ref(input))?;
    let hidden = out.hidden.iter().map(|&h| g.value(h).clone()).collect();
    Ok((g.value(out.logits).clone(), hidden))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStreams;

    fn tiny(head: HeadKind, layers: usize) -> EncoderModel {
        let cfg = EncoderConfig {
            n_layers: layers,
            h_units: 8,
            h_mid: 16,
            n_heads: 2,
            vocab_size: 10,
            n_classes: 3,
            head,
            max_len: 16,
        };
        EncoderModel::new(cfg, &mut RngStreams::new(1).stream("model-init")).unwrap()
    }

    #[test]
    fn output_shapes_follow_head_kind() {
        let m = tiny(HeadKind::Classification, 2);
        let (logits, hidden) = encoder_forward(&m, &ModelInput::Tokens(vec![1, 2, 3, 4, 5])).unwrap();
        assert_eq!(hidden.len(), 2);
        assert!(hidden.iter().all(|h| h.rows() == 5 && h.cols() == 8));
        assert_eq!((logits.rows(), logits.cols()), (1, 3));

        let m = tiny(HeadKind::Tagging, 1);
        let (logits, _) = encoder_forward(&m, &ModelInput::Tokens(vec![1, 2, 3])).unwrap();
        assert_eq!((logits.rows(), logits.cols()), (3, 3));
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let mut m = tiny(HeadKind::Classification, 2);
        m.params.set_all(0.0);
        let (logits, _) = encoder_forward(&m, &ModelInput::Tokens(vec![3, 1, 4])).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let m = tiny(HeadKind::Classification, 1);
        assert!(encoder_forward(&m, &ModelInput::Tokens(vec![])).is_err());
        assert!(encoder_forward(&m, &ModelInput::Tokens(vec![10])).is_err());
        let wrong = Tensor::zeros(2, 5);
        assert!(encoder_forward(&m, &ModelInput::Embedded(wrong)).is_err());
    }

    #[test]
    fn forward_is_pure_and_batching_is_consistent() {
        let m = tiny(HeadKind::Classification, 2);
        let a = ModelInput::Tokens(vec![1, 2, 3]);
        let b = ModelInput::Tokens(vec![4, 5]);
        let (la, ha) = encoder_forward(&m, &a).unwrap();
        let (la2, ha2) = encoder_forward(&m, &a).unwrap();
        assert_eq!(la, la2);
        assert_eq!(ha, ha2);
        let both = m.predict_logits(&[a, b.clone()]).unwrap();
        let (lb, _) = encoder_forward(&m, &b).unwrap();
        for c in 0..3 {
            assert!((both.get(0, c) - la.get(0, c)).abs() < 1e-12);
            assert!((both.get(1, c) - lb.get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn embedded_input_matches_token_input() {
        let m = tiny(HeadKind::Classification, 1);
        let ids = vec![2, 7, 1];
        let table = m.params.get("embed.tok").unwrap();
        let mut rows = Vec::new();
        for &i in &ids {
            rows.extend_from_slice(table.row_slice(i));
        }
        let emb = Tensor::matrix(3, 8, rows);
        let (a, _) = encoder_forward(&m, &ModelInput::Tokens(ids.clone())).unwrap();
        let (b, _) = encoder_forward(&m, &ModelInput::Embedded(emb)).unwrap();
        let (c, _) = encoder_forward(
            &m,
            &ModelInput::Mixed {
                a: ids.clone(),
                b: vec![0, 0, 0, 0],
                lambda: 1.0,
            },
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}
