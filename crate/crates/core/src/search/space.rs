//! The finite space of distillation configurations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugOp, AugPolicy};
use crate::error::{Error, Result};
use crate::losses::{InterLossKind, PredLossKind};
use crate::mapping::MappingStrategy;
use crate::pipeline::config::DistillerConfig;

/// Names of the four axes, in point order.
pub const AXES: [&str; 4] = ["inter_loss", "pred_loss", "mapping", "aug"];

/// Product of four categorical axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub inter: Vec<InterLossKind>,
    pub pred: Vec<PredLossKind>,
    pub mapping: Vec<MappingStrategy>,
    pub aug: Vec<Vec<AugOp>>,
}

/// Index of one value on every axis.
pub type SearchPoint = [usize; 4];

impl Default for SearchSpace {
    /// 8 intermediate losses × 2 prediction losses × 3 mappings × 20
    /// augmentation policies.
    fn default() -> Self {
        Self {
            inter: vec![
                InterLossKind::Mse,
                InterLossKind::L2,
                InterLossKind::Cos,
                InterLossKind::Pkd,
                InterLossKind::Ce,
                InterLossKind::MiAlpha { alpha: 0.1 },
                InterLossKind::MiAlpha { alpha: 0.5 },
                InterLossKind::MiAlpha { alpha: 0.9 },
            ],
            pred: vec![PredLossKind::Mse, PredLossKind::Ce],
            mapping: vec![MappingStrategy::Skip, MappingStrategy::Last, MappingStrategy::Emd],
            aug: aug_policies(),
        }
    }
}

/// Ordered sequences of at most two distinct discrete operators (the empty
/// one included), each with and without a trailing Mixup.
pub fn aug_policies() -> Vec<Vec<AugOp>> {
    let ops = [AugOp::Ca, AugOp::Ra, AugOp::Bt];
    let mut seqs: Vec<Vec<AugOp>> = vec![Vec::new()];
    seqs.extend(ops.iter().map(|&o| vec![o]));
    for &a in &ops {
        for &b in &ops {
            if a != b {
                seqs.push(vec![a, b]);
            }
        }
    }
    let mut out = Vec::with_capacity(2 * seqs.len());
    for s in seqs {
        let mut m = s.clone();
        m.push(AugOp::Mixup);
        out.push(s);
        out.push(m);
    }
    out
}

impl SearchSpace {
    pub fn axis_sizes(&self) -> [usize; 4] {
        [self.inter.len(), self.pred.len(), self.mapping.len(), self.aug.len()]
    }

    pub fn size(&self) -> usize {
        self.axis_sizes().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.axis_sizes().contains(&0) {
            return Err(Error::config("every search axis needs at least one value"));
        }
        for k in &self.inter {
            k.validate()?;
        }
        for a in &self.aug {
            AugPolicy::new(a.clone()).validate()?;
        }
        Ok(())
    }

    /// Every point in canonical (lexicographic index) order.
    pub fn points(&self) -> Vec<SearchPoint> {
        let s = self.axis_sizes();
        let mut out = Vec::with_capacity(self.size());
        for a in 0..s[0] {
            for b in 0..s[1] {
                for c in 0..s[2] {
                    for d in 0..s[3] {
                        out.push([a, b, c, d]);
                    }
                }
            }
        }
        out
    }

    /// Uniform draw over the product space.
    pub fn sample(&self, rng: &mut impl Rng) -> SearchPoint {
        let s = self.axis_sizes();
        [
            rng.random_range(0..s[0]),
            rng.random_range(0..s[1]),
            rng.random_range(0..s[2]),
            rng.random_range(0..s[3]),
        ]
    }

    /// `base` with the four searched components replaced; loss weights
    /// reset to the defaults for the chosen augmentation.
    pub fn config(&self, p: SearchPoint, base: &DistillerConfig) -> DistillerConfig {
        let mut c = base.clone();
        c.inter_loss = self.inter[p[0]];
        c.pred_loss = self.pred[p[1]];
        c.mapping = self.mapping[p[2]];
        let aug = AugPolicy {
            ops: self.aug[p[3]].clone(),
            ..base.aug.clone()
        };
        c.with_aug(aug)
    }

    /// The point whose components equal those of `c`, if any.
    pub fn locate(&self, c: &DistillerConfig) -> Option<SearchPoint> {
        Some([
            self.inter.iter().position(|k| *k == c.inter_loss)?,
            self.pred.iter().position(|k| *k == c.pred_loss)?,
            self.mapping.iter().position(|k| *k == c.mapping)?,
            self.aug.iter().position(|k| *k == c.aug.ops)?,
        ])
    }

    /// Display label of every value of every axis.
    pub fn labels(&self) -> [Vec<String>; 4] {
        [
            self.inter.iter().map(ToString::to_string).collect(),
            self.pred.iter().map(ToString::to_string).collect(),
            self.mapping.iter().map(ToString::to_string).collect(),
            self.aug.iter().map(|a| AugPolicy::new(a.clone()).label()).collect(),
        ]
    }
}

/// Axis labels of a config's four components.
pub fn config_labels(c: &DistillerConfig) -> [String; 4] {
    [c.inter_loss.to_string(), c.pred_loss.to_string(), c.mapping.to_string(), c.aug.label()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStreams;

    #[test]
    fn default_space_shape() {
        let s = SearchSpace::default();
        assert_eq!(s.axis_sizes(), [8, 2, 3, 20]);
        assert_eq!(s.size(), 960);
        s.validate().unwrap();
        let labels = s.labels();
        let mut aug = labels[3].clone();
        aug.sort();
        aug.dedup();
        assert_eq!(aug.len(), 20);
        assert!(labels[3].contains(&"none".to_string()));
        assert!(labels[3].contains(&"BT+CA+Mixup".to_string()));
    }

    #[test]
    fn sampled_configs_are_valid_members() {
        let s = SearchSpace::default();
        let base = DistillerConfig::default();
        let mut rng = RngStreams::new(3).stream("s");
        for _ in 0..200 {
            let p = s.sample(&mut rng);
            let c = s.config(p, &base);
            c.validate().unwrap();
            assert_eq!(s.locate(&c), Some(p));
            assert_eq!(c.weights.beta2 > 0.0, !c.aug.is_empty());
        }
    }
}
