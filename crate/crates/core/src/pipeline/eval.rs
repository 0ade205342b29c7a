//! Held-out metrics.

use serde::{Deserialize, Serialize};

use crate::augment::Example;
use crate::error::{Error, Result};
use crate::nn::encoder::{EncoderModel, HeadKind, ModelInput};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Sequence accuracy for classification, per-token accuracy for tagging.
    pub accuracy: f64,
    /// Exact-match F1 over maximal runs of a nonzero tag (tagging only).
    pub span_f1: Option<f64>,
}

/// Predicted class per sequence (classification) or per token (tagging),
/// concatenated in split order.
pub fn predict(model: &EncoderModel, split: &[Example]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for chunk in split.chunks(EVAL_BATCH) {
        let inputs: Vec<ModelInput> = chunk.iter().map(|e| ModelInput::Tokens(e.tokens.clone())).collect();
        let logits = model.predict_logits(&inputs)?;
        for r in 0..logits.rows() {
            out.push(argmax(logits.row_slice(r)));
        }
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate_report(model: &EncoderModel, split: &[Example], kind: HeadKind) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::input("cannot evaluate on an empty split"));
    }
    if model.config.head != kind {
        return Err(Error::input(format!(
            "model head {:?} does not match task kind {kind:?}",
            model.config.head
        )));
    }
    let pred = predict(model, split)?;
    let gold: Vec<usize> = match kind {
        HeadKind::Classification => split
            .iter()
            .map(|e| e.label.ok_or_else(|| Error::input("example has no label")))
            .collect::<Result<_>>()?,
        HeadKind::Tagging => {
            let mut g = Vec::new();
            for e in split {
                g.extend(e.tags.as_ref().ok_or_else(|| Error::input("example has no tags"))?);
            }
            g
        }
    };
    let correct = pred.iter().zip(&gold).filter(|(p, g)| p == g).count();
    let accuracy = correct as f64 / gold.len() as f64;
    let span_f1 = match kind {
        HeadKind::Classification => None,
        HeadKind::Tagging => {
            let mut at = 0;
            let mut gold_seqs = Vec::new();
            let mut pred_seqs = Vec::new();
            for e in split {
                let t = e.tokens.len();
                gold_seqs.push(gold[at..at + t].to_vec());
                pred_seqs.push(pred[at..at + t].to_vec());
                at += t;
            }
            Some(span_f1(&gold_seqs, &pred_seqs))
        }
    };
    Ok(EvalReport { accuracy, span_f1 })
}

/// Reported score: accuracy (per token for tagging).
pub fn evaluate(model: &EncoderModel, split: &[Example], kind: HeadKind) -> Result<f64> {
    Ok(evaluate_report(model, split, kind)?.accuracy)
}

fn spans(tags: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=tags.len() {
        if i == tags.len() || tags[i] != tags[start] {
            if tags[start] != 0 {
                out.push((start, i, tags[start]));
            }
            start = i;
        }
    }
    out
}

/// Micro F1 over exact-match spans; 1.0 when neither side has any span.
pub fn span_f1(gold: &[Vec<usize>], pred: &[Vec<usize>]) -> f64 {
    let (mut tp, mut n_gold, mut n_pred) = (0usize, 0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        let gs = spans(g);
        let ps = spans(p);
        tp += ps.iter().filter(|s| gs.contains(s)).count();
        n_gold += gs.len();
        n_pred += ps.len();
    }
    if n_gold + n_pred == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (n_gold + n_pred) as f64
}

/// `student_score / teacher_score`.
pub fn distillation_ratio(student_score: f64, teacher_score: f64) -> Result<f64> {
    if !(teacher_score > 0.0) {
        return Err(Error::input(format!("teacher score {teacher_score} must be positive")));
    }
    Ok(student_score / teacher_score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::encoder::EncoderConfig;
    use crate::rng::RngStreams;

    fn constant_model(class: usize) -> EncoderModel {
        let cfg = EncoderConfig::student(1, 4, 6, 2, HeadKind::Classification);
        let mut m = EncoderModel::new(cfg, &mut RngStreams::new(0).stream("m")).unwrap();
        m.params.get_mut("head.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let b = m.params.get_mut("head.b").unwrap();
        b.data_mut()[class] = 5.0;
        m
    }

    #[test]
    fn constant_predictor_on_balanced_split() {
        let split: Vec<Example> = (0..10).map(|i| Example::classification(vec![i % 6, 1], i % 2)).collect();
        assert_eq!(evaluate(&constant_model(1), &split, HeadKind::Classification).unwrap(), 0.5);
        let ones: Vec<Example> = split.iter().filter(|e| e.label == Some(1)).cloned().collect();
        assert_eq!(evaluate(&constant_model(1), &ones, HeadKind::Classification).unwrap(), 1.0);
        assert!(evaluate(&constant_model(1), &[], HeadKind::Classification).is_err());
    }

    #[test]
    fn span_f1_counts_exact_runs() {
        let gold = vec![vec![0, 1, 1, 0, 2]];
        assert_eq!(span_f1(&gold, &gold), 1.0);
        // one of two gold spans recovered, one spurious prediction
        let pred = vec![vec![0, 1, 1, 0, 3]];
        assert!((span_f1(&gold, &pred) - 0.5).abs() < 1e-12);
        assert_eq!(span_f1(&[vec![0, 0]], &[vec![0, 0]]), 1.0);
    }

    #[test]
    fn ratio_arithmetic() {
        assert_eq!(distillation_ratio(0.7, 0.7).unwrap(), 1.0);
        assert!((distillation_ratio(48.0, 50.0).unwrap() - 0.96).abs() < 1e-15);
        assert!(distillation_ratio(0.9, 0.8).unwrap() > 1.0);
        assert!(distillation_ratio(0.5, 0.0).is_err());
    }
}
