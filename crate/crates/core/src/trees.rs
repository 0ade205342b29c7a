//! Regression trees shared by the importance forest and the boosted
//! meta-regressor.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf(f64),
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Feature groups sampled per node (e.g. the one-hot columns of one
    /// categorical axis); `None` considers every feature.
    pub groups: Option<Vec<Vec<usize>>>,
    /// Number of groups drawn at each node.
    pub groups_per_node: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: None,
            min_leaf: 1,
            groups: None,
            groups_per_node: 0,
        }
    }
}

/// CART regression tree minimising squared error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

fn mean_of(y: &[f64], rows: &[usize]) -> f64 {
    rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64
}

struct Builder<'a, R> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    params: &'a TreeParams,
    rng: &'a mut R,
    nodes: Vec<Node>,
}

impl<R: Rng> Builder<'_, R> {
    /// Sampled feature groups first, then the rest as a fallback for nodes
    /// where the sample offers no useful split.
    fn candidates(&mut self) -> Vec<Vec<usize>> {
        let n_features = self.x.first().map_or(0, Vec::len);
        match &self.params.groups {
            None => vec![(0..n_features).collect()],
            Some(groups) => {
                let k = self.params.groups_per_node.clamp(1, groups.len());
                let mut picked: Vec<usize> = sample(self.rng, groups.len(), k).into_vec();
                picked.sort_unstable();
                let first = picked.iter().flat_map(|&g| groups[g].iter().copied()).collect();
                let rest = (0..groups.len())
                    .filter(|g| !picked.contains(g))
                    .flat_map(|g| groups[g].iter().copied())
                    .collect();
                vec![first, rest]
            }
        }
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<(usize, f64, f64)> {
        self.candidates()
            .into_iter()
            .find_map(|features| self.best_split_among(rows, &features))
    }

    fn best_split_among(&self, rows: &[usize], features: &[usize]) -> Option<(usize, f64, f64)> {
        let min_leaf = self.params.min_leaf.max(1);
        let mut best: Option<(usize, f64, f64)> = None;
        let total: f64 = rows.iter().map(|&r| self.y[r]).sum();
        let n = rows.len() as f64;
        for &f in features {
            let mut sorted: Vec<(f64, f64)> = rows.iter().map(|&r| (self.x[r][f], self.y[r])).collect();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = 0.0;
            for k in 0..sorted.len() - 1 {
                left += sorted[k].1;
                let nl = (k + 1) as f64;
                if sorted[k].0 == sorted[k + 1].0 || k + 1 < min_leaf || sorted.len() - k - 1 < min_leaf {
                    continue;
                }
                let right = total - left;
                // maximising this is minimising the children's squared error
                let gain = left * left / nl + right * right / (n - nl);
                if best.is_none_or(|(_, _, g)| gain > g + 1e-12) {
                    best = Some((f, 0.5 * (sorted[k].0 + sorted[k + 1].0), gain));
                }
            }
        }
        let parent = total * total / n;
        best.filter(|&(_, _, g)| g > parent + 1e-12)
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(mean_of(self.y, &rows)));
        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || rows.len() < 2 * self.params.min_leaf.max(1) {
            return id;
        }
        let Some((feature, threshold, _)) = self.best_split(&rows) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

impl RegressionTree {
    /// Fits on the given rows of `x`/`y` (repeats allowed, e.g. a
    /// bootstrap sample).
    pub fn fit(x: &[Vec<f64>], y: &[f64], rows: &[usize], params: &TreeParams, rng: &mut impl Rng) -> Self {
        assert!(!rows.is_empty(), "tree needs at least one row");
        let mut b = Builder {
            x,
            y,
            params,
            rng,
            nodes: Vec::new(),
        };
        b.grow(rows.to_vec(), 0);
        Self { nodes: b.nodes }
    }

    fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(_) => return i,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf(v) => v,
            Node::Split { .. } => unreachable!("leaf_index returns leaves"),
        }
    }

    /// Resets every leaf to the mean target of the `x` rows reaching it;
    /// leaves that no row reaches keep their value.
    pub fn refit_leaves(&mut self, x: &[Vec<f64>], y: &[f64]) {
        let mut sums = vec![(0.0, 0usize); self.nodes.len()];
        for (row, &t) in x.iter().zip(y) {
            let s = &mut sums[self.leaf_index(row)];
            s.0 += t;
            s.1 += 1;
        }
        for (node, (s, c)) in self.nodes.iter_mut().zip(sums) {
            if let Node::Leaf(v) = node {
                if c > 0 {
                    *v = s / c as f64;
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }
}
