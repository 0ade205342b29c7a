//! Meta-regressor from (dataset features, config) to distillation ratio,
//! recommendation and leave-one-dataset-out evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodistiller::features::DatasetFeatures;
use crate::autodistiller::gbdt::{Gbdt, GbdtSettings};
use crate::error::{Error, Result};
use crate::pipeline::config::DistillerConfig;
use crate::pipeline::train::RunRecord;
use crate::search::space::{config_labels, SearchSpace};

/// One meta-dataset line: a run record joined with its dataset features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRow {
    #[serde(flatten)]
    pub record: RunRecord,
    pub features: DatasetFeatures,
}

impl MetaRow {
    pub fn target(&self) -> f64 {
        self.record.distillation_ratio
    }

    fn sort_key(&self) -> (String, String, u64) {
        (
            self.record.dataset_id.clone(),
            self.record.config.to_text(),
            self.target().to_bits(),
        )
    }
}

/// Feature layout: dataset features, then one column per observed label
/// of each searched axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub dataset_width: usize,
    /// `(axis index, label)` per one-hot column.
    pub config_columns: Vec<(usize, String)>,
}

impl FeatureSchema {
    fn from_rows(rows: &[MetaRow]) -> Result<Self> {
        let dataset_width = rows[0].features.width();
        if rows.iter().any(|r| r.features.width() != dataset_width) {
            return Err(Error::input("meta rows have differing feature widths"));
        }
        let mut cols: Vec<(usize, String)> = rows
            .iter()
            .flat_map(|r| config_labels(&r.record.config).into_iter().enumerate())
            .collect();
        cols.sort();
        cols.dedup();
        Ok(Self {
            dataset_width,
            config_columns: cols,
        })
    }

    /// Unseen labels leave every column of their axis at zero.
    pub fn encode(&self, features: &DatasetFeatures, config: &DistillerConfig) -> Result<Vec<f64>> {
        if features.width() != self.dataset_width {
            return Err(Error::input(format!(
                "dataset features have width {}, model expects {}",
                features.width(),
                self.dataset_width
            )));
        }
        let mut v = features.to_vector();
        let labels = config_labels(config);
        v.extend(
            self.config_columns
                .iter()
                .map(|(a, l)| if labels[*a] == *l { 1.0 } else { 0.0 }),
        );
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub schema: FeatureSchema,
    pub gbdt: Gbdt,
    pub settings: GbdtSettings,
    /// Mean squared error after each boosting round.
    pub train_loss: Vec<f64>,
}

impl MetaModel {
    pub fn predict(&self, features: &DatasetFeatures, config: &DistillerConfig) -> Result<f64> {
        Ok(self.gbdt.predict(&self.schema.encode(features, config)?))
    }
}

/// Fits the boosted trees on successful rows (at least 10). Rows are put
/// in a canonical order first, so input order does not matter.
pub fn train_meta(rows: &[MetaRow], settings: &GbdtSettings) -> Result<MetaModel> {
    let mut rows: Vec<MetaRow> = rows.iter().filter(|r| r.record.is_ok()).cloned().collect();
    if rows.len() < 10 {
        return Err(Error::input(format!("meta training needs at least 10 rows, got {}", rows.len())));
    }
    rows.sort_by_key(MetaRow::sort_key);
    let schema = FeatureSchema::from_rows(&rows)?;
    let x = rows
        .iter()
        .map(|r| schema.encode(&r.features, &r.record.config))
        .collect::<Result<Vec<_>>>()?;
    let y: Vec<f64> = rows.iter().map(MetaRow::target).collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite distillation ratio in meta rows"));
    }
    let (gbdt, train_loss) = Gbdt::fit(&x, &y, settings)?;
    Ok(MetaModel {
        schema,
        gbdt,
        settings: *settings,
        train_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub rank: usize,
    pub predicted_ratio: f64,
    pub config: DistillerConfig,
}

/// Scores every point of `space` (on top of `base`) and returns the `n`
/// best, ties kept in canonical space order.
pub fn recommend(
    model: &MetaModel,
    features: &DatasetFeatures,
    space: &SearchSpace,
    base: &DistillerConfig,
    n: usize,
) -> Result<Vec<Recommendation>> {
    if n == 0 {
        return Err(Error::input("top-n must be at least 1"));
    }
    space.validate()?;
    let mut scored = space
        .points()
        .into_iter()
        .map(|p| {
            let c = space.config(p, base);
            Ok((model.predict(features, &c)?, c))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(i, (p, c))| Recommendation {
            rank: i + 1,
            predicted_ratio: p,
            config: c,
        })
        .collect())
}

fn mid_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of mid-ranks; `None` when either side has no rank
/// variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::input("spearman needs two equal-length samples of at least 2"));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::input("spearman input contains NaN"));
    }
    let (rx, ry) = (mid_ranks(xs), mid_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodoFold {
    pub dataset_id: String,
    pub n_rows: usize,
    /// `None` when the correlation is undefined (fold skipped in the mean).
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodoReport {
    pub folds: Vec<LodoFold>,
    /// Unweighted mean over folds with a defined correlation.
    pub mean_spearman: Option<f64>,
    pub n_undefined: usize,
}

/// Leave-one-dataset-out: for each dataset, train on the others and rank
/// its rows.
pub fn lodo_eval(rows: &[MetaRow], settings: &GbdtSettings) -> Result<LodoReport> {
    let mut groups: BTreeMap<&str, Vec<&MetaRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.record.is_ok()) {
        groups.entry(r.record.dataset_id.as_str()).or_default().push(r);
    }
    if groups.len() < 2 {
        return Err(Error::input("leave-one-dataset-out needs at least 2 datasets"));
    }
    if let Some((id, g)) = groups.iter().find(|(_, g)| g.len() < 5) {
        return Err(Error::input(format!("dataset '{id}' has {} rows, need at least 5", g.len())));
    }
    let mut folds = Vec::with_capacity(groups.len());
    for (&id, held) in &groups {
        let train: Vec<MetaRow> = groups
            .iter()
            .filter(|(k, _)| **k != id)
            .flat_map(|(_, g)| g.iter().map(|r| (*r).clone()))
            .collect();
        let model = train_meta(&train, settings)?;
        let pred = held
            .iter()
            .map(|r| model.predict(&r.features, &r.record.config))
            .collect::<Result<Vec<_>>>()?;
        let actual: Vec<f64> = held.iter().map(|r| r.target()).collect();
        folds.push(LodoFold {
            dataset_id: id.to_string(),
            n_rows: held.len(),
            spearman: spearman(&pred, &actual)?,
        });
    }
    let defined: Vec<f64> = folds.iter().filter_map(|f| f.spearman).collect();
    Ok(LodoReport {
        mean_spearman: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        n_undefined: folds.len() - defined.len(),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_hand_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
        let r = spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap().unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), None);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        // ties take the mean rank
        assert_eq!(mid_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }
}
