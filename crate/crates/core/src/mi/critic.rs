use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mi::bound::ScoreMatrix;
use crate::nn::graph::{Graph, ParamVars, Var};
use crate::nn::tensor::{ParamSet, Tensor};

/// Shape of the scoring network `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticArch {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff: usize,
}

impl CriticArch {
    /// Two encoder layers with the feed-forward width scaled to desk size.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            width: 16,
            heads: 4,
            ff: 32,
        }
    }

    /// Narrower variant for large-batch MI benchmarking.
    pub fn bench() -> Self {
        Self {
            layers: 2,
            width: 8,
            heads: 2,
            ff: 16,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.ff == 0 {
            return Err(Error::config("critic sizes must be positive"));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config("critic width must be divisible by heads"));
        }
        Ok(())
    }
}

/// Scoring network `f(x, y)` and log-baseline `log q(y)`.
///
/// Each `(x, y)` pair is embedded as one fused token `W_x x + W_y y + b`
/// and passed through `layers` post-norm encoder blocks. On a one-token
/// sequence the attention weights are identically 1, so each block's
/// attention reduces to its value and output projections; all `B²` pairs
/// of a batch are then scored with plain matrix products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticPair {
    pub arch: CriticArch,
    pub x_dim: usize,
    pub y_dim: usize,
    pub params: ParamSet,
}

impl CriticPair {
    pub fn new(arch: CriticArch, x_dim: usize, y_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        if x_dim == 0 || y_dim == 0 {
            return Err(Error::input("critic input dimensions must be positive"));
        }
        let w = arch.width;
        let mut p = ParamSet::new();
        p.insert("f.wx", Tensor::randn(x_dim, w, (1.0 / x_dim as f64).sqrt(), rng));
        p.insert("f.wy", Tensor::randn(y_dim, w, (1.0 / y_dim as f64).sqrt(), rng));
        p.insert("f.b", Tensor::zeros(1, w));
        for l in 0..arch.layers {
            let pre = format!("f.layer{l}.");
            let s = (1.0 / w as f64).sqrt();
            p.insert(format!("{pre}wv"), Tensor::randn(w, w, s, rng));
            p.insert(format!("{pre}wo"), Tensor::randn(w, w, s, rng));
            p.insert(format!("{pre}w1"), Tensor::randn(w, arch.ff, s, rng));
            p.insert(
                format!("{pre}w2"),
                Tensor::randn(arch.ff, w, (1.0 / arch.ff as f64).sqrt(), rng),
            );
            for b in ["bv", "bo", "b2", "ln1.b", "ln2.b"] {
                p.insert(format!("{pre}{b}"), Tensor::zeros(1, w));
            }
            p.insert(format!("{pre}b1"), Tensor::zeros(1, arch.ff));
            p.insert(format!("{pre}ln1.g"), Tensor::filled(1, w, 1.0));
            p.insert(format!("{pre}ln2.g"), Tensor::filled(1, w, 1.0));
        }
        p.insert("f.out.w", Tensor::randn(w, 1, 0.1 / (w as f64).sqrt(), rng));
        p.insert("f.out.b", Tensor::zeros(1, 1));
        let qh = w;
        p.insert("q.w1", Tensor::randn(y_dim, qh, (1.0 / y_dim as f64).sqrt(), rng));
        p.insert("q.b1", Tensor::zeros(1, qh));
        p.insert("q.w2", Tensor::zeros(qh, 1));
        p.insert("q.b2", Tensor::zeros(1, 1));
        Ok(Self {
            arch,
            x_dim,
            y_dim,
            params: p,
        })
    }

    /// Records the B×B score matrix and the 1×B log-baseline row.
    pub fn score_graph(&self, g: &mut Graph, pv: &ParamVars, x: Var, y: Var) -> Result<(Var, Var)> {
        let (bx, dx) = (g.value(x).rows(), g.value(x).cols());
        let (by, dy) = (g.value(y).rows(), g.value(y).cols());
        if dx != self.x_dim || dy != self.y_dim {
            return Err(Error::input(format!(
                "critic expects ({}, {}) inputs, got ({dx}, {dy})",
                self.x_dim, self.y_dim
            )));
        }
        if bx != by {
            return Err(Error::input("critic needs paired batches of equal size"));
        }
        let ex = g.matmul(x, pv.get("f.wx")?)?;
        let ex = g.add_row(ex, pv.get("f.b")?)?;
        let ey = g.matmul(y, pv.get("f.wy")?)?;
        let mut h = g.pairwise_add(ex, ey)?;
        for l in 0..self.arch.layers {
            let p = |n: &str| pv.get(&format!("f.layer{l}.{n}"));
            let v = g.matmul(h, p("wv")?)?;
            let v = g.add_row(v, p("bv")?)?;
            let a = g.matmul(v, p("wo")?)?;
            let a = g.add_row(a, p("bo")?)?;
            let r = g.add(h, a)?;
            h = g.layer_norm(r, p("ln1.g")?, p("ln1.b")?)?;
            let f = g.matmul(h, p("w1")?)?;
            let f = g.add_row(f, p("b1")?)?;
            let f = g.gelu(f);
            let f = g.matmul(f, p("w2")?)?;
            let f = g.add_row(f, p("b2")?)?;
            let r = g.add(h, f)?;
            h = g.layer_norm(r, p("ln2.g")?, p("ln2.b")?)?;
        }
        let s = g.matmul(h, pv.get("f.out.w")?)?;
        let s = g.add_row(s, pv.get("f.out.b")?)?;
        let scores = g.reshape(s, bx, bx)?;
        let q = g.matmul(y, pv.get("q.w1")?)?;
        let q = g.add_row(q, pv.get("q.b1")?)?;
        let q = g.tanh(q);
        let q = g.matmul(q, pv.get("q.w2")?)?;
        let q = g.add_row(q, pv.get("q.b2")?)?;
        let log_q = g.reshape(q, 1, bx)?;
        Ok((scores, log_q))
    }

    pub fn score_matrix(&self, x: &Tensor, y: &Tensor) -> Result<ScoreMatrix> {
        let mut g = Graph::new();
        let pv = g.bind_frozen(&self.params);
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let (s, q) = self.score_graph(&mut g, &pv, xv, yv)?;
        ScoreMatrix::new(g.value(s).clone(), g.value(q).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_gradients;
    use crate::rng::RngStreams;

    #[test]
    fn fresh_critic_has_unit_baseline_and_finite_scores() {
        let mut rng = RngStreams::new(3).stream("critic-init");
        let c = CriticPair::new(CriticArch::desk(), 3, 2, &mut rng).unwrap();
        let x = Tensor::randn(5, 3, 1.0, &mut rng);
        let y = Tensor::randn(5, 2, 1.0, &mut rng);
        let sm = c.score_matrix(&x, &y).unwrap();
        assert_eq!(sm.batch(), 5);
        assert!(sm.log_baseline().iter().all(|&v| v == 0.0));
        assert!(sm.scores().is_finite());
    }

    #[test]
    fn score_entry_depends_on_its_own_pair() {
        let mut rng = RngStreams::new(4).stream("critic-init");
        let c = CriticPair::new(CriticArch::bench(), 1, 1, &mut rng).unwrap();
        let x = Tensor::matrix(2, 1, vec![0.5, -1.0]);
        let y = Tensor::matrix(2, 1, vec![2.0, 0.3]);
        let full = c.score_matrix(&x, &y).unwrap();
        let single = c
            .score_matrix(&Tensor::matrix(2, 1, vec![-1.0, -1.0]), &Tensor::matrix(2, 1, vec![2.0, 2.0]))
            .unwrap();
        assert!((full.scores().get(1, 0) - single.scores().get(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_input_error() {
        let mut rng = RngStreams::new(5).stream("critic-init");
        let c = CriticPair::new(CriticArch::bench(), 2, 2, &mut rng).unwrap();
        let r = c.score_matrix(&Tensor::zeros(3, 1), &Tensor::zeros(3, 2));
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let mut rng = RngStreams::new(6).stream("critic-init");
        let arch = CriticArch {
            layers: 2,
            width: 4,
            heads: 2,
            ff: 6,
        };
        let mut c = CriticPair::new(arch, 2, 2, &mut rng).unwrap();
        // non-zero baseline head so its path is exercised
        c.params.insert("q.w2", Tensor::randn(4, 1, 0.5, &mut rng));
        let x = Tensor::randn(3, 2, 1.0, &mut rng);
        let y = Tensor::randn(3, 2, 1.0, &mut rng);
        let err = check_gradients(
            |g, pv| {
                let xv = g.constant(x.clone());
                let yv = g.constant(y.clone());
                let (s, q) = c.score_graph(g, pv, xv, yv)?;
                crate::mi::bound::mi_alpha_bound_var(g, s, q, 0.5)
            },
            &c.params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
