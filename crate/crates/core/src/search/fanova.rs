//! Functional-ANOVA importance of the searched components.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::train::RunRecord;
use crate::rng::RngStreams;
use crate::search::space::{config_labels, AXES};
use crate::trees::{RegressionTree, TreeParams};

/// Scores indexed by one categorical level per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTable {
    pub axes: Vec<String>,
    /// Level labels of every axis.
    pub levels: Vec<Vec<String>>,
    /// Level index per axis, and the score.
    pub rows: Vec<(Vec<usize>, f64)>,
}

impl FactorTable {
    /// Successful records keyed by their four components; levels are the
    /// observed labels in sorted order. Also returns the failed count.
    pub fn from_records(records: &[RunRecord]) -> (Self, usize) {
        let ok: Vec<&RunRecord> = records.iter().filter(|r| r.is_ok()).collect();
        let labels: Vec<[String; 4]> = ok.iter().map(|r| config_labels(&r.config)).collect();
        let mut levels: Vec<Vec<String>> = vec![Vec::new(); 4];
        for l in &labels {
            for (a, v) in l.iter().enumerate() {
                levels[a].push(v.clone());
            }
        }
        for lv in &mut levels {
            lv.sort();
            lv.dedup();
        }
        let rows = labels
            .iter()
            .zip(&ok)
            .map(|(l, r)| {
                let idx = (0..4).map(|a| levels[a].binary_search(&l[a]).expect("observed")).collect();
                (idx, r.distillation_ratio)
            })
            .collect();
        let table = Self {
            axes: AXES.iter().map(|s| s.to_string()).collect(),
            levels,
            rows,
        };
        (table, records.len() - ok.len())
    }

    fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    fn validate(&self) -> Result<()> {
        let k = self.axes.len();
        if k == 0 || self.levels.len() != k {
            return Err(Error::input("factor table needs one level list per axis"));
        }
        for (idx, y) in &self.rows {
            if idx.len() != k || idx.iter().zip(&self.levels).any(|(&i, l)| i >= l.len()) {
                return Err(Error::input("row level index out of range"));
            }
            if !y.is_finite() {
                return Err(Error::input("non-finite score"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisImportance {
    pub axis: String,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairImportance {
    pub axes: [String; 2],
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub individual: Vec<AxisImportance>,
    pub pairwise: Vec<PairImportance>,
    /// Variance of the decomposed function; 0 flags a degenerate input
    /// whose fractions are all reported as 0.
    pub total_variance: f64,
    pub n_records: usize,
    pub n_failed: usize,
}

impl ImportanceReport {
    pub fn individual(&self, axis: &str) -> Option<f64> {
        self.individual.iter().find(|a| a.axis == axis).map(|a| a.fraction)
    }

    pub fn pairwise(&self, a: &str, b: &str) -> Option<f64> {
        self.pairwise
            .iter()
            .find(|p| (p.axes[0] == a && p.axes[1] == b) || (p.axes[0] == b && p.axes[1] == a))
            .map(|p| p.fraction)
    }

    /// Plot-ready rows: `kind,axis_a,axis_b,fraction`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,axis_a,axis_b,fraction\n");
        for a in &self.individual {
            let _ = writeln!(s, "individual,{},,{:.6}", a.axis, a.fraction);
        }
        for p in &self.pairwise {
            let _ = writeln!(s, "pairwise,{},{},{:.6}", p.axes[0], p.axes[1], p.fraction);
        }
        s
    }
}

/// Unweighted mean of per-dataset reports over the same axes.
pub fn mean_report(reports: &[ImportanceReport]) -> Result<ImportanceReport> {
    let first = reports.first().ok_or_else(|| Error::input("no reports to average"))?;
    let n = reports.len() as f64;
    let mut out = first.clone();
    for (k, a) in out.individual.iter_mut().enumerate() {
        a.fraction = reports.iter().map(|r| r.individual[k].fraction).sum::<f64>() / n;
    }
    for (k, p) in out.pairwise.iter_mut().enumerate() {
        p.fraction = reports.iter().map(|r| r.pairwise[k].fraction).sum::<f64>() / n;
    }
    out.total_variance = reports.iter().map(|r| r.total_variance).sum::<f64>() / n;
    out.n_records = reports.iter().map(|r| r.n_records).sum();
    out.n_failed = reports.iter().map(|r| r.n_failed).sum();
    Ok(out)
}

fn cell_index(idx: &[usize], sizes: &[usize]) -> usize {
    idx.iter().zip(sizes).fold(0, |acc, (&i, &s)| acc * s + i)
}

fn cell_levels(mut cell: usize, sizes: &[usize]) -> Vec<usize> {
    let mut out = vec![0; sizes.len()];
    for a in (0..sizes.len()).rev() {
        out[a] = cell % sizes[a];
        cell /= sizes[a];
    }
    out
}

/// Exact decomposition of a complete grid of cell values.
fn decompose(axes: &[String], sizes: &[usize], grid: &[f64], n_records: usize, n_failed: usize) -> ImportanceReport {
    let k = sizes.len();
    let n = grid.len() as f64;
    let mu = grid.iter().sum::<f64>() / n;
    let total = grid.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let levels: Vec<Vec<usize>> = (0..grid.len()).map(|c| cell_levels(c, sizes)).collect();
    let main: Vec<Vec<f64>> = (0..k)
        .map(|a| {
            let mut m = vec![0.0; sizes[a]];
            for (c, v) in grid.iter().enumerate() {
                m[levels[c][a]] += v;
            }
            let per = n / sizes[a] as f64;
            m.iter().map(|s| s / per - mu).collect()
        })
        .collect();
    // rounding leaves ~1e-32 of spurious variance on constant input
    let degenerate = !(total > 1e-20 * (1.0 + mu * mu));
    let frac = |v: f64| if degenerate { 0.0 } else { (v / total).max(0.0) };
    let individual = (0..k)
        .map(|a| AxisImportance {
            axis: axes[a].clone(),
            fraction: frac(main[a].iter().map(|e| e * e).sum::<f64>() / sizes[a] as f64),
        })
        .collect();
    let mut pairwise = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let mut m = vec![0.0; sizes[a] * sizes[b]];
            for (c, v) in grid.iter().enumerate() {
                m[levels[c][a] * sizes[b] + levels[c][b]] += v;
            }
            let per = n / (sizes[a] * sizes[b]) as f64;
            let mut var = 0.0;
            for i in 0..sizes[a] {
                for j in 0..sizes[b] {
                    let f = m[i * sizes[b] + j] / per - mu - main[a][i] - main[b][j];
                    var += f * f;
                }
            }
            pairwise.push(PairImportance {
                axes: [axes[a].clone(), axes[b].clone()],
                fraction: frac(var / (sizes[a] * sizes[b]) as f64),
            });
        }
    }
    ImportanceReport {
        individual,
        pairwise,
        total_variance: if degenerate { 0.0 } else { total },
        n_records,
        n_failed,
    }
}

/// Exact functional ANOVA of a full-factorial table; replicated cells are
/// averaged, a missing cell is an input error.
pub fn brute_force_anova(table: &FactorTable) -> Result<ImportanceReport> {
    table.validate()?;
    let sizes = table.sizes();
    let cells: usize = sizes.iter().product();
    let mut sum = vec![0.0; cells];
    let mut count = vec![0usize; cells];
    for (idx, y) in &table.rows {
        let c = cell_index(idx, &sizes);
        sum[c] += y;
        count[c] += 1;
    }
    if let Some(c) = count.iter().position(|&n| n == 0) {
        return Err(Error::input(format!("grid cell {:?} has no value", cell_levels(c, &sizes))));
    }
    let grid: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    Ok(decompose(&table.axes, &sizes, &grid, table.rows.len(), 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestSettings {
    pub trees: usize,
    pub seed: u64,
    pub min_records: usize,
}

impl Default for ForestSettings {
    fn default() -> Self {
        Self {
            trees: 64,
            seed: 0,
            min_records: 20,
        }
    }
}

fn one_hot(idx: &[usize], offsets: &[usize], width: usize) -> Vec<f64> {
    let mut x = vec![0.0; width];
    for (a, &i) in idx.iter().enumerate() {
        x[offsets[a] + i] = 1.0;
    }
    x
}

/// Random-forest fANOVA: fits bootstrap trees on one-hot axes, predicts
/// the full grid of observed levels, and decomposes the averaged
/// prediction exactly.
pub fn fanova_importance(table: &FactorTable, settings: &ForestSettings) -> Result<ImportanceReport> {
    table.validate()?;
    if table.rows.len() < settings.min_records {
        return Err(Error::input(format!(
            "fANOVA needs at least {} successful records, got {}",
            settings.min_records,
            table.rows.len()
        )));
    }
    let sizes = table.sizes();
    if let Some(a) = sizes.iter().position(|&s| s < 2) {
        return Err(Error::input(format!("axis '{}' has fewer than 2 observed values", table.axes[a])));
    }
    if settings.trees == 0 {
        return Err(Error::config("forest needs at least one tree"));
    }
    let mut rows = table.rows.clone();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut width = 0;
    for &s in &sizes {
        offsets.push(width);
        width += s;
    }
    let x: Vec<Vec<f64>> = rows.iter().map(|(i, _)| one_hot(i, &offsets, width)).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let groups: Vec<Vec<usize>> = offsets.iter().zip(&sizes).map(|(&o, &s)| (o..o + s).collect()).collect();
    let params = TreeParams {
        max_depth: None,
        min_leaf: 1,
        groups_per_node: (groups.len() as f64).sqrt().ceil() as usize,
        groups: Some(groups),
    };
    let cells: usize = sizes.iter().product();
    let grid_x: Vec<Vec<f64>> = (0..cells).map(|c| one_hot(&cell_levels(c, &sizes), &offsets, width)).collect();
    let mut grid = vec![0.0; cells];
    let streams = RngStreams::new(settings.seed);
    for t in 0..settings.trees {
        let mut rng = streams.child("tree", t as u64).stream("forest");
        let boot: Vec<usize> = (0..rows.len()).map(|_| rand::Rng::random_range(&mut rng, 0..rows.len())).collect();
        let tree = RegressionTree::fit(&x, &y, &boot, &params, &mut rng);
        for (g, gx) in grid.iter_mut().zip(&grid_x) {
            *g += tree.predict(gx);
        }
    }
    grid.iter_mut().for_each(|g| *g /= settings.trees as f64);
    Ok(decompose(&table.axes, &sizes, &grid, table.rows.len(), 0))
}

/// fANOVA over search records; failed trials are excluded and counted.
pub fn fanova_from_records(records: &[RunRecord], settings: &ForestSettings) -> Result<ImportanceReport> {
    let (table, failed) = FactorTable::from_records(records);
    let mut r = fanova_importance(&table, settings)?;
    r.n_failed = failed;
    Ok(r)
}
