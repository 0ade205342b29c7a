//! Teacher-to-student layer mappings: fixed one-to-one pairings and the
//! many-to-many transport mapping.
//!
//! Matrices are indexed `(teacher layer i, student layer j)`, both 0-based
//! internally; the public pairing helpers report 1-based layer numbers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MappingStrategy {
    Skip,
    Last,
    #[serde(rename = "EMD")]
    Emd,
}

impl fmt::Display for MappingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MappingStrategy::Skip => "Skip",
            MappingStrategy::Last => "Last",
            MappingStrategy::Emd => "EMD",
        })
    }
}

impl FromStr for MappingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "skip" => Ok(MappingStrategy::Skip),
            "last" => Ok(MappingStrategy::Last),
            "emd" => Ok(MappingStrategy::Emd),
            _ => Err(Error::config(format!("unknown mapping '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingMatrix {
    pub strategy: MappingStrategy,
    /// M×N weights.
    pub weights: Tensor,
}

impl MappingMatrix {
    pub fn teacher_layers(&self) -> usize {
        self.weights.rows()
    }

    pub fn student_layers(&self) -> usize {
        self.weights.cols()
    }

    /// 1-based `(teacher, student)` pairs with nonzero weight.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let (m, n) = (self.teacher_layers(), self.student_layers());
        let mut out = Vec::new();
        for j in 0..n {
            for i in 0..m {
                if self.weights.get(i, j) > 0.0 {
                    out.push((i + 1, j + 1));
                }
            }
        }
        out
    }
}

/// One-to-one mapping for `m` teacher and `n` student layers.
pub fn build_mapping(strategy: MappingStrategy, m: usize, n: usize) -> Result<MappingMatrix> {
    if n == 0 || n > m {
        return Err(Error::input(format!("need 1 <= N <= M, got M={m} N={n}")));
    }
    let mut w = Tensor::zeros(m, n);
    for s in 1..=n {
        let t = match strategy {
            MappingStrategy::Skip => s * (m / n),
            MappingStrategy::Last => s + m - n,
            MappingStrategy::Emd => {
                return Err(Error::input("EMD weights come from solve_transport"));
            }
        };
        w.data_mut()[(t - 1) * n + (s - 1)] = 1.0;
    }
    Ok(MappingMatrix {
        strategy,
        weights: w,
    })
}

/// Balanced transportation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowProblem {
    /// M×N costs.
    pub cost: Tensor,
    pub supplies: Vec<f64>,
    pub demands: Vec<f64>,
}

impl FlowProblem {
    pub fn uniform(cost: Tensor) -> Self {
        let (m, n) = (cost.rows(), cost.cols());
        Self {
            cost,
            supplies: vec![1.0 / m as f64; m],
            demands: vec![1.0 / n as f64; n],
        }
    }

    fn validate(&self) -> Result<()> {
        let (m, n) = (self.cost.rows(), self.cost.cols());
        if self.supplies.len() != m || self.demands.len() != n {
            return Err(Error::input("marginal lengths do not match the cost matrix"));
        }
        if !self.cost.is_finite() {
            return Err(Error::numeric("non-finite transport cost"));
        }
        if self
            .supplies
            .iter()
            .chain(&self.demands)
            .any(|&v| !(v > 0.0) || !v.is_finite())
        {
            return Err(Error::input("supplies and demands must be positive"));
        }
        let (a, b): (f64, f64) = (self.supplies.iter().sum(), self.demands.iter().sum());
        if (a - b).abs() > 1e-12 {
            return Err(Error::input(format!("unbalanced problem: {a} vs {b}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportSolution {
    /// M×N flow.
    pub flow: Tensor,
    pub objective: f64,
    /// Dual variables with `u_i + v_j <= c_ij`, tight wherever flow > 0.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

const CAP_EPS: f64 = 1e-15;

/// Exact min-cost transport by successive shortest paths.
///
/// Nodes: source `0`, suppliers `1..=m`, consumers `m+1..=m+n`, sink
/// `m+n+1`. Each augmentation ships along a cheapest residual path, found
/// with Bellman–Ford since backward arcs carry negative costs.
pub fn solve_transport(p: &FlowProblem) -> Result<TransportSolution> {
    p.validate()?;
    let (m, n) = (p.cost.rows(), p.cost.cols());
    let c = p.cost.data();
    let mut flow = vec![0.0; m * n];
    let mut supply_left = p.supplies.clone();
    let mut demand_left = p.demands.clone();
    let total: f64 = p.supplies.iter().sum();
    let mut shipped = 0.0;
    let nodes = m + n + 2;
    let sink = m + n + 1;
    let max_rounds = 4 * (m + n) * (m * n + 1) + 16;
    let mut rounds = 0;
    while total - shipped > 1e-14 * total.max(1.0) {
        rounds += 1;
        if rounds > max_rounds {
            return Err(Error::numeric("transport solver did not converge"));
        }
        let mut dist = vec![f64::INFINITY; nodes];
        let mut pred = vec![usize::MAX; nodes];
        dist[0] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            let mut relax = |from: usize, to: usize, w: f64, dist: &mut Vec<f64>, pred: &mut Vec<usize>| {
                if dist[from].is_finite() && dist[from] + w < dist[to] - 1e-15 {
                    dist[to] = dist[from] + w;
                    pred[to] = from;
                    changed = true;
                }
            };
            for i in 0..m {
                if supply_left[i] > CAP_EPS {
                    relax(0, 1 + i, 0.0, &mut dist, &mut pred);
                }
            }
            for i in 0..m {
                for j in 0..n {
                    relax(1 + i, 1 + m + j, c[i * n + j], &mut dist, &mut pred);
                    if flow[i * n + j] > CAP_EPS {
                        relax(1 + m + j, 1 + i, -c[i * n + j], &mut dist, &mut pred);
                    }
                }
            }
            for j in 0..n {
                if demand_left[j] > CAP_EPS {
                    relax(1 + m + j, sink, 0.0, &mut dist, &mut pred);
                }
            }
            if !changed {
                break;
            }
        }
        if !dist[sink].is_finite() {
            return Err(Error::numeric("no augmenting path in a balanced problem"));
        }
        let mut path = vec![sink];
        let mut at = sink;
        while at != 0 {
            at = pred[at];
            if at == usize::MAX || path.len() > nodes {
                return Err(Error::numeric("broken augmenting path"));
            }
            path.push(at);
        }
        path.reverse();
        let mut amount = f64::INFINITY;
        for w in path.windows(2) {
            let (a, b) = (w[0], w[1]);
            let cap = if a == 0 {
                supply_left[b - 1]
            } else if b == sink {
                demand_left[a - 1 - m]
            } else if a <= m {
                f64::INFINITY
            } else {
                flow[(b - 1) * n + (a - 1 - m)]
            };
            amount = amount.min(cap);
        }
        for w in path.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a == 0 {
                supply_left[b - 1] -= amount;
            } else if b == sink {
                demand_left[a - 1 - m] -= amount;
            } else if a <= m {
                flow[(a - 1) * n + (b - 1 - m)] += amount;
            } else {
                let f = &mut flow[(b - 1) * n + (a - 1 - m)];
                *f -= amount;
                if *f < CAP_EPS {
                    *f = 0.0;
                }
            }
        }
        shipped += amount;
    }
    let (u, v) = potentials(c, &flow, m, n);
    let objective = flow.iter().zip(c).map(|(f, c)| f * c).sum();
    Ok(TransportSolution {
        flow: Tensor::matrix(m, n, flow),
        objective,
        u,
        v,
    })
}

/// Shortest-path potentials on the bipartite residual graph, from a virtual
/// root joined to every node at zero cost.
fn potentials(c: &[f64], flow: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut d = vec![0.0; m + n];
    for _ in 0..(m + n + 1) {
        let mut changed = false;
        for i in 0..m {
            for j in 0..n {
                let w = c[i * n + j];
                if d[i] + w < d[m + j] - 1e-15 {
                    d[m + j] = d[i] + w;
                    changed = true;
                }
                if flow[i * n + j] > 0.0 && d[m + j] - w < d[i] - 1e-15 {
                    d[i] = d[m + j] - w;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let u = d[..m].iter().map(|x| -x).collect();
    let v = d[m..].to_vec();
    (u, v)
}

/// Transport-weighted intermediate loss over all teacher/student layer
/// pairs. `costs[i][j]` is the recorded loss between teacher layer `i` and
/// student layer `j`; the flow is solved on their current values and held
/// constant, so gradients pass only through the costs.
pub fn emd_loss_var(g: &mut Graph, costs: &[Vec<Var>]) -> Result<(Var, MappingMatrix)> {
    let m = costs.len();
    let n = costs.first().map_or(0, Vec::len);
    if m == 0 || n == 0 || costs.iter().any(|r| r.len() != n) {
        return Err(Error::input("cost grid must be a nonempty rectangle"));
    }
    let values: Vec<f64> = costs.iter().flatten().map(|&v| g.scalar_value(v)).collect();
    let sol = solve_transport(&FlowProblem::uniform(Tensor::matrix(m, n, values)))?;
    let total: f64 = sol.flow.data().iter().sum();
    let mut terms = Vec::new();
    for i in 0..m {
        for j in 0..n {
            let w = sol.flow.get(i, j);
            if w > 0.0 {
                terms.push(g.scale(costs[i][j], w / total));
            }
        }
    }
    let stacked = g.concat_rows(&terms)?;
    let loss = g.sum(stacked);
    Ok((
        loss,
        MappingMatrix {
            strategy: MappingStrategy::Emd,
            weights: sol.flow,
        },
    ))
}

/// Value-only EMD loss for a precomputed M×N cost matrix.
pub fn emd_loss(cost: &Tensor) -> Result<(f64, MappingMatrix)> {
    let sol = solve_transport(&FlowProblem::uniform(cost.clone()))?;
    let total: f64 = sol.flow.data().iter().sum();
    Ok((
        sol.objective / total,
        MappingMatrix {
            strategy: MappingStrategy::Emd,
            weights: sol.flow,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skip_and_last_pairings() {
        let skip = build_mapping(MappingStrategy::Skip, 12, 4).unwrap();
        assert_eq!(skip.pairs(), vec![(3, 1), (6, 2), (9, 3), (12, 4)]);
        let last = build_mapping(MappingStrategy::Last, 12, 4).unwrap();
        assert_eq!(last.pairs(), vec![(9, 1), (10, 2), (11, 3), (12, 4)]);
        for s in [MappingStrategy::Skip, MappingStrategy::Last] {
            assert_eq!(build_mapping(s, 3, 3).unwrap().pairs(), vec![(1, 1), (2, 2), (3, 3)]);
        }
        assert!(build_mapping(MappingStrategy::Skip, 2, 3).is_err());
    }

    #[test]
    fn trivial_transport() {
        let s = solve_transport(&FlowProblem {
            cost: Tensor::scalar(2.5),
            supplies: vec![1.0],
            demands: vec![1.0],
        })
        .unwrap();
        assert_eq!(s.flow.data(), &[1.0]);
        assert_eq!(s.objective, 2.5);
        let s = solve_transport(&FlowProblem::uniform(Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]))).unwrap();
        assert_eq!(s.flow.data(), &[0.5, 0.0, 0.0, 0.5]);
        assert_eq!(s.objective, 0.0);
    }

    #[test]
    fn unbalanced_is_rejected() {
        let p = FlowProblem {
            cost: Tensor::zeros(2, 2),
            supplies: vec![0.5, 0.5],
            demands: vec![0.5, 0.6],
        };
        assert!(matches!(solve_transport(&p), Err(Error::Input(_))));
    }

    #[test]
    fn two_by_one_moves_all_mass() {
        let (loss, map) = emd_loss(&Tensor::matrix(2, 1, vec![0.4, 1.0])).unwrap();
        assert!((loss - 0.7).abs() < 1e-15);
        assert_eq!(map.weights.data(), &[0.5, 0.5]);
    }

    #[test]
    fn emd_gradient_flows_through_costs_only() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(0.2));
        let b = g.param(Tensor::scalar(0.9));
        let a2 = g.square(a).unwrap();
        let (loss, _) = emd_loss_var(&mut g, &[vec![a2], vec![b]]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((grads.get(a).unwrap()[0] - 0.2).abs() < 1e-15);
        assert!((grads.get(b).unwrap()[0] - 0.5).abs() < 1e-15);
    }
}
