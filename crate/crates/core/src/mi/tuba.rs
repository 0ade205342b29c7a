//! Fixed critics whose TUBA bound corresponds to a classical
//! intermediate-layer loss, with baseline `a(y) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mi::bound::{tuba_bound, ScoreMatrix};
use crate::nn::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PluginCritic {
    /// `−‖x − y‖²`
    NegMse,
    /// `−‖x − y‖`
    NegL2,
    /// `−‖x/‖x‖ − y/‖y‖‖²`
    NegPkd,
    /// `cos(x, y) − 1`
    CosMinus1,
}

impl PluginCritic {
    pub const ALL: [PluginCritic; 4] = [
        PluginCritic::NegMse,
        PluginCritic::NegL2,
        PluginCritic::NegPkd,
        PluginCritic::CosMinus1,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PluginCritic::NegMse => "neg_mse",
            PluginCritic::NegL2 => "neg_l2",
            PluginCritic::NegPkd => "neg_pkd",
            PluginCritic::CosMinus1 => "cos_minus_1",
        }
    }

    /// Critic value for one pair.
    pub fn score(&self, x: &[f64], y: &[f64]) -> f64 {
        let sq = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum() };
        let norm = |a: &[f64]| a.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_EPS;
        match self {
            PluginCritic::NegMse => -sq(x, y),
            PluginCritic::NegL2 => -sq(x, y).sqrt(),
            PluginCritic::NegPkd => {
                let (nx, ny) = (norm(x), norm(y));
                -x.iter().zip(y).map(|(p, q)| (p / nx - q / ny).powi(2)).sum::<f64>()
            }
            PluginCritic::CosMinus1 => {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                dot / (norm(x) * norm(y)) - 1.0
            }
        }
    }
}

/// B×B plug-in score matrix for paired rows of `x` and `y`.
pub fn plugin_scores(x: &Tensor, y: &Tensor, kind: PluginCritic) -> Result<ScoreMatrix> {
    if x.rows() != y.rows() || x.cols() != y.cols() {
        return Err(Error::input("plug-in critics need equally shaped batches"));
    }
    let b = x.rows();
    let mut s = Vec::with_capacity(b * b);
    for i in 0..b {
        for j in 0..b {
            s.push(kind.score(x.row_slice(i), y.row_slice(j)));
        }
    }
    ScoreMatrix::new(Tensor::matrix(b, b, s), vec![0.0; b])
}

pub fn tuba_plugin_bound(x: &Tensor, y: &Tensor, kind: PluginCritic) -> Result<f64> {
    Ok(tuba_bound(&plugin_scores(x, y, kind)?))
}
