//! Stage-wise boosted regression trees on squared error.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStreams;
use crate::trees::{RegressionTree, TreeParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtSettings {
    pub rounds: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    /// Fraction of rows used to grow each tree's structure.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbdtSettings {
    fn default() -> Self {
        Self {
            rounds: 200,
            max_depth: 3,
            shrinkage: 0.1,
            subsample: 0.8,
            seed: 0,
        }
    }
}

impl GbdtSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 || !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::config("gbdt needs max_depth >= 1 and shrinkage in (0, 1]"));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::config("gbdt subsample must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gbdt {
    pub base: f64,
    pub shrinkage: f64,
    pub trees: Vec<RegressionTree>,
}

impl Gbdt {
    /// Fits `y ≈ base + ν Σ tree(x)`. Each tree's structure is grown on a
    /// row subsample; its leaf values are then the mean residual of all
    /// rows reaching the leaf, so the training loss never increases.
    /// Returns the model and the mean squared error after each round.
    pub fn fit(x: &[Vec<f64>], y: &[f64], settings: &GbdtSettings) -> Result<(Self, Vec<f64>)> {
        settings.validate()?;
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::input("gbdt needs equally many (nonzero) rows and targets"));
        }
        let n = y.len();
        let base = y.iter().sum::<f64>() / n as f64;
        let mut pred = vec![base; n];
        let params = TreeParams {
            max_depth: Some(settings.max_depth),
            ..TreeParams::default()
        };
        let k = ((settings.subsample * n as f64).round() as usize).clamp(1, n);
        let streams = RngStreams::new(settings.seed);
        let mut trees = Vec::with_capacity(settings.rounds);
        let mut losses = Vec::with_capacity(settings.rounds);
        for r in 0..settings.rounds {
            let mut rng = streams.child("round", r as u64).stream("gbdt");
            let resid: Vec<f64> = y.iter().zip(&pred).map(|(t, p)| t - p).collect();
            let mut rows = sample(&mut rng, n, k).into_vec();
            rows.sort_unstable();
            let mut tree = RegressionTree::fit(x, &resid, &rows, &params, &mut rng);
            tree.refit_leaves(x, &resid);
            for (p, xi) in pred.iter_mut().zip(x) {
                *p += settings.shrinkage * tree.predict(xi);
            }
            losses.push(y.iter().zip(&pred).map(|(t, p)| (t - p).powi(2)).sum::<f64>() / n as f64);
            trees.push(tree);
        }
        Ok((
            Self {
                base,
                shrinkage: settings.shrinkage,
                trees,
            },
            losses,
        ))
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.base + self.shrinkage * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}
