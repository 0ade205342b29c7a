//! The interpolated multisample bound and the TUBA bound it generalises.
//!
//! With `m_j = (1/B) Σ_i exp(f(x_i, y_j))` (the positive included) and
//! `d_j = α·m_j + (1−α)·q(y_j)`:
//!
//! ```text
//! I_α = mean_i[f(x_i,y_i) − log d_i] − mean_{i≠j}[exp(f(x_i,y_j)) / d_j] + 1
//! ```
//!
//! The product-of-marginals term is a plain ratio. Everything is evaluated
//! in log space; results are in nats.

use crate::error::{Error, Result};
use crate::nn::graph::{log_sum_exp, CustomOp, Graph, Var};
use crate::nn::tensor::Tensor;

/// Critic scores for one batch: `scores[i][j] = f(x_i, y_j)`, plus
/// `log q(y_j)` for each column.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    scores: Tensor,
    log_baseline: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(scores: Tensor, log_baseline: Vec<f64>) -> Result<Self> {
        let b = scores.rows();
        if scores.cols() != b {
            return Err(Error::input(format!(
                "score matrix must be square, got {}x{}",
                b,
                scores.cols()
            )));
        }
        if b < 2 {
            return Err(Error::input("score matrix needs at least two samples"));
        }
        if log_baseline.len() != b {
            return Err(Error::input(format!(
                "baseline has {} entries for batch {b}",
                log_baseline.len()
            )));
        }
        if !scores.is_finite() || log_baseline.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite critic scores"));
        }
        Ok(Self {
            scores,
            log_baseline,
        })
    }

    /// Square matrix from nested rows with `log q ≡ 0`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let b = rows.len();
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        if data.len() != b * b {
            return Err(Error::input("score rows must form a square matrix"));
        }
        Self::new(Tensor::matrix(b, b, data), vec![0.0; b])
    }

    pub fn batch(&self) -> usize {
        self.scores.rows()
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn log_baseline(&self) -> &[f64] {
        &self.log_baseline
    }
}

/// The two expectations of the bound, evaluated separately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    /// `mean_i[f(x_i,y_i) − log d_i]`.
    pub joint: f64,
    /// `mean_{i≠j}[exp(f(x_i,y_j)) / d_j]`.
    pub marginal: f64,
}

impl BoundTerms {
    pub fn bound(&self) -> f64 {
        self.joint - self.marginal + 1.0
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::input(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `log d_j` for every column.
fn log_denominators(scores: &[f64], log_q: &[f64], b: usize, alpha: f64) -> Vec<f64> {
    let ln_b = (b as f64).ln();
    let mut col = vec![0.0; b];
    (0..b)
        .map(|j| {
            for i in 0..b {
                col[i] = scores[i * b + j];
            }
            let log_m = log_sum_exp(&col) - ln_b;
            if alpha == 1.0 {
                log_m
            } else if alpha == 0.0 {
                log_q[j]
            } else {
                let a = alpha.ln() + log_m;
                let c = (1.0 - alpha).ln() + log_q[j];
                let hi = a.max(c);
                hi + ((a - hi).exp() + (c - hi).exp()).ln()
            }
        })
        .collect()
}

fn terms_from(scores: &[f64], log_d: &[f64], b: usize) -> BoundTerms {
    let joint = (0..b).map(|i| scores[i * b + i] - log_d[i]).sum::<f64>() / b as f64;
    let mut marginal = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i != j {
                marginal += (scores[i * b + j] - log_d[j]).exp();
            }
        }
    }
    marginal /= (b * (b - 1)) as f64;
    BoundTerms { joint, marginal }
}

pub fn mi_alpha_terms(sm: &ScoreMatrix, alpha: f64) -> Result<BoundTerms> {
    check_alpha(alpha)?;
    let b = sm.batch();
    let s = sm.scores.data();
    let log_d = log_denominators(s, &sm.log_baseline, b, alpha);
    Ok(terms_from(s, &log_d, b))
}

/// The interpolated bound `I_α` in nats.
pub fn mi_alpha_bound(sm: &ScoreMatrix, alpha: f64) -> Result<f64> {
    Ok(mi_alpha_terms(sm, alpha)?.bound())
}

/// TUBA with baseline `a(y_j) = exp(log_a[j])`:
/// `mean_i[f(x_i,y_i) − log a_i] − mean_{i≠j}[exp(f(x_i,y_j)) / a_j] + 1`.
pub fn tuba_bound(sm: &ScoreMatrix) -> f64 {
    let b = sm.batch();
    let s = sm.scores.data();
    let la = &sm.log_baseline;
    let joint = (0..b).map(|i| s[i * b + i] - la[i]).sum::<f64>() / b as f64;
    let mut marginal = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i != j {
                marginal += (s[i * b + j] - la[j]).exp();
            }
        }
    }
    joint - marginal / (b * (b - 1)) as f64 + 1.0
}

#[derive(Debug)]
struct MiAlphaOp {
    alpha: f64,
    batch: usize,
    log_d: Vec<f64>,
}

impl CustomOp for MiAlphaOp {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let b = self.batch;
        let bf = b as f64;
        let c = 1.0 / (bf * (bf - 1.0));
        let s = inputs[0].data();
        let lq = inputs[1].data();
        let up = grad[0];
        // ratio[i][j] = exp(S_ij − L_j)
        let mut ratio = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                ratio[i * b + j] = (s[i * b + j] - self.log_d[j]).exp();
            }
        }
        // dI/dL_j = −1/B + c·Σ_{i≠j} ratio_ij
        let dl: Vec<f64> = (0..b)
            .map(|j| {
                let off: f64 = (0..b).filter(|&i| i != j).map(|i| ratio[i * b + j]).sum();
                -1.0 / bf + c * off
            })
            .collect();
        let mut ds = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                let direct = if i == j { 1.0 / bf } else { -c * ratio[i * b + j] };
                let via_m = dl[j] * self.alpha / bf * ratio[i * b + j];
                ds[i * b + j] = up * (direct + via_m);
            }
        }
        let dq: Vec<f64> = (0..b)
            .map(|j| up * dl[j] * (1.0 - self.alpha) * (lq[j] - self.log_d[j]).exp())
            .collect();
        vec![Some(ds), Some(dq)]
    }
}

/// Records `I_α` on the graph. `scores` is B×B and `log_q` holds B values.
pub fn mi_alpha_bound_var(g: &mut Graph, scores: Var, log_q: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let st = g.value(scores);
    let b = st.rows();
    if st.cols() != b || b < 2 {
        return Err(Error::input(format!(
            "score matrix must be square with B >= 2, got {}x{}",
            b,
            st.cols()
        )));
    }
    if g.value(log_q).len() != b {
        return Err(Error::input("baseline length must equal the batch size"));
    }
    if !st.is_finite() || !g.value(log_q).is_finite() {
        return Err(Error::numeric("non-finite critic scores"));
    }
    let s = st.data().to_vec();
    let lq = g.value(log_q).data().to_vec();
    let log_d = log_denominators(&s, &lq, b, alpha);
    let value = terms_from(&s, &log_d, b).bound();
    Ok(g.custom(
        &[scores, log_q],
        Tensor::scalar(value),
        Box::new(MiAlphaOp {
            alpha,
            batch: b,
            log_d,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::ParamSet;
    use crate::nn::check_gradients;

    #[test]
    fn uninformative_critic_gives_zero() {
        let sm = ScoreMatrix::new(Tensor::zeros(4, 4), vec![0.0; 4]).unwrap();
        for alpha in [0.0, 0.1, 0.5, 0.9, 1.0] {
            assert!(mi_alpha_bound(&sm, alpha).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_zero_hand_example() {
        // 2 − (1/2)(e^0 + e^0) + 1
        let sm = ScoreMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert!((mi_alpha_bound(&sm, 0.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_one_joint_term_is_capped_by_log_batch() {
        let ln2 = 2f64.ln();
        let mut last = f64::NEG_INFINITY;
        for s in [1.0, 5.0, 20.0, 60.0] {
            let sm = ScoreMatrix::from_rows(&[vec![s, 0.0], vec![0.0, s]]).unwrap();
            let t = mi_alpha_terms(&sm, 1.0).unwrap();
            assert!(t.joint <= ln2 + 1e-12);
            assert!(t.joint > last);
            last = t.joint;
            // marginal = 2/(e^s + 1): bounded and vanishing
            assert!((t.marginal - 2.0 / (s.exp() + 1.0)).abs() < 1e-12);
        }
        assert!((last - ln2).abs() < 1e-12);
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        let sm = ScoreMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(mi_alpha_bound(&sm, 1.5).is_err());
        assert!(mi_alpha_bound(&sm, -0.1).is_err());
    }

    #[test]
    fn batch_of_one_is_rejected() {
        assert!(ScoreMatrix::new(Tensor::zeros(1, 1), vec![0.0]).is_err());
    }

    #[test]
    fn large_scores_do_not_overflow_for_positive_alpha() {
        let sm = ScoreMatrix::from_rows(&[vec![800.0, 790.0], vec![795.0, 805.0]]).unwrap();
        assert!(mi_alpha_bound(&sm, 0.5).unwrap().is_finite());
    }

    #[test]
    fn graph_op_matches_value_and_gradients() {
        let scores = vec![0.3, -0.2, 1.1, 0.4, 0.9, -0.7, 0.05, 0.2, 1.3];
        let lq = vec![0.1, -0.3, 0.25];
        let mut p = ParamSet::new();
        p.insert("s", Tensor::matrix(3, 3, scores.clone()));
        p.insert("q", Tensor::row(lq.clone()));
        for alpha in [0.0, 0.3, 0.9, 1.0] {
            let sm = ScoreMatrix::new(Tensor::matrix(3, 3, scores.clone()), lq.clone()).unwrap();
            let mut g = Graph::new();
            let s = g.constant(Tensor::matrix(3, 3, scores.clone()));
            let q = g.constant(Tensor::row(lq.clone()));
            let v = mi_alpha_bound_var(&mut g, s, q, alpha).unwrap();
            assert!((g.scalar_value(v) - mi_alpha_bound(&sm, alpha).unwrap()).abs() < 1e-14);
            let err = check_gradients(
                |g, pv| mi_alpha_bound_var(g, pv.get("s")?, pv.get("q")?, alpha),
                &p,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "alpha {alpha}: {err}");
        }
    }
}
