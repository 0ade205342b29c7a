use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mi::bound::{mi_alpha_bound, mi_alpha_bound_var};
use crate::mi::critic::{CriticArch, CriticPair};
use crate::nn::graph::Graph;
use crate::nn::optim::OptimState;
use crate::nn::tensor::Tensor;
use crate::rng::{streams, RngStreams, StreamRng};

/// A stream of paired `(x, y)` batches.
pub trait PairedSource {
    fn dims(&self) -> (usize, usize);
    fn sample(&mut self, batch: usize, rng: &mut StreamRng) -> (Tensor, Tensor);
}

/// `d` independent coordinate pairs, each standard bivariate Gaussian with
/// correlation `rho`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPairs {
    pub rho: f64,
    pub d: usize,
}

impl GaussianPairs {
    pub fn new(rho: f64, d: usize) -> Result<Self> {
        if !rho.is_finite() || rho.abs() >= 1.0 || d == 0 {
            return Err(Error::input(format!("invalid Gaussian source rho={rho} d={d}")));
        }
        Ok(Self { rho, d })
    }
}

impl PairedSource for GaussianPairs {
    fn dims(&self) -> (usize, usize) {
        (self.d, self.d)
    }

    fn sample(&mut self, batch: usize, rng: &mut StreamRng) -> (Tensor, Tensor) {
        let n = batch * self.d;
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let s = (1.0 - self.rho * self.rho).sqrt();
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(rng);
            let e: f64 = StandardNormal.sample(rng);
            x.push(a);
            y.push(self.rho * a + s * e);
        }
        (Tensor::matrix(batch, self.d, x), Tensor::matrix(batch, self.d, y))
    }
}

/// Minibatches drawn with replacement from a fixed paired sample.
#[derive(Debug, Clone)]
pub struct FixedPairs {
    x: Tensor,
    y: Tensor,
}

impl FixedPairs {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        if x.rows() != y.rows() || x.rows() < 2 {
            return Err(Error::input("fixed pairs need equal row counts of at least 2"));
        }
        Ok(Self { x, y })
    }
}

impl PairedSource for FixedPairs {
    fn dims(&self) -> (usize, usize) {
        (self.x.cols(), self.y.cols())
    }

    fn sample(&mut self, batch: usize, rng: &mut StreamRng) -> (Tensor, Tensor) {
        let (dx, dy) = self.dims();
        let mut xs = Vec::with_capacity(batch * dx);
        let mut ys = Vec::with_capacity(batch * dy);
        for _ in 0..batch {
            let r = rng.random_range(0..self.x.rows());
            xs.extend_from_slice(self.x.row_slice(r));
            ys.extend_from_slice(self.y.row_slice(r));
        }
        (Tensor::matrix(batch, dx, xs), Tensor::matrix(batch, dy, ys))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiTrainSettings {
    pub alpha: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub arch: CriticArch,
    pub seed: u64,
}

impl MiTrainSettings {
    pub fn new(alpha: f64, steps: usize, seed: u64) -> Self {
        Self {
            alpha,
            steps,
            batch: 128,
            lr: 2e-3,
            arch: CriticArch::bench(),
            seed,
        }
    }
}

/// Maximises the bound by Adam ascent on streamed batches. The returned
/// estimate is the mean bound over the final 10% of steps (at least one);
/// with `steps = 0` it is the bound of the initial critic on one batch.
pub fn train_mi_alpha(source: &mut dyn PairedSource, settings: &MiTrainSettings) -> Result<(CriticPair, f64)> {
    if !(0.0..=1.0).contains(&settings.alpha) {
        return Err(Error::input(format!("alpha {} outside [0, 1]", settings.alpha)));
    }
    if settings.batch < 2 {
        return Err(Error::input("batch size must be at least 2"));
    }
    let rs = RngStreams::new(settings.seed);
    let (dx, dy) = source.dims();
    let mut critic = CriticPair::new(settings.arch, dx, dy, &mut rs.stream(streams::CRITIC_INIT))?;
    let mut data_rng = rs.stream(streams::SAMPLING);
    if settings.steps == 0 {
        let (x, y) = source.sample(settings.batch, &mut data_rng);
        let est = mi_alpha_bound(&critic.score_matrix(&x, &y)?, settings.alpha)?;
        return Ok((critic, est));
    }
    let tail = (settings.steps / 10).max(1);
    let mut opt = OptimState::new(settings.lr).with_clip(5.0);
    let mut acc = 0.0;
    for step in 0..settings.steps {
        let (x, y) = source.sample(settings.batch, &mut data_rng);
        let mut g = Graph::new();
        let pv = g.bind(&critic.params);
        let xv = g.constant(x);
        let yv = g.constant(y);
        let (s, q) = critic.score_graph(&mut g, &pv, xv, yv)?;
        let bound = mi_alpha_bound_var(&mut g, s, q, settings.alpha)?;
        let value = g.scalar_value(bound);
        if step >= settings.steps - tail {
            acc += value;
        }
        let loss = g.scale(bound, -1.0);
        let grads = g.backward(loss)?;
        grads.write_into(&mut critic.params, &pv);
        opt.step(&mut critic.params)?;
    }
    Ok((critic, acc / tail as f64))
}

/// Mean and sample variance of the bound over `n_batches` fresh batches
/// for each α, with the critic held fixed.
pub fn bound_spread_by_alpha(
    critic: &CriticPair,
    source: &mut dyn PairedSource,
    alphas: &[f64],
    batch: usize,
    n_batches: usize,
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    if n_batches < 2 {
        return Err(Error::input("need at least two batches for a variance"));
    }
    let mut rng = RngStreams::new(seed).stream(streams::SAMPLING);
    let mut scores = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let (x, y) = source.sample(batch, &mut rng);
        scores.push(critic.score_matrix(&x, &y)?);
    }
    alphas
        .iter()
        .map(|&a| {
            let vals = scores
                .iter()
                .map(|sm| mi_alpha_bound(sm, a))
                .collect::<Result<Vec<f64>>>()?;
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            Ok((a, mean, var))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_returns_initial_critic() {
        let mut src = GaussianPairs::new(0.5, 1).unwrap();
        let s = MiTrainSettings {
            batch: 16,
            ..MiTrainSettings::new(0.5, 0, 9)
        };
        let (critic, est) = train_mi_alpha(&mut src, &s).unwrap();
        let fresh = CriticPair::new(
            s.arch,
            1,
            1,
            &mut RngStreams::new(9).stream(streams::CRITIC_INIT),
        )
        .unwrap();
        assert_eq!(critic, fresh);
        let mut rng = RngStreams::new(9).stream(streams::SAMPLING);
        let (x, y) = src.sample(16, &mut rng);
        let expect = mi_alpha_bound(&fresh.score_matrix(&x, &y).unwrap(), 0.5).unwrap();
        assert_eq!(est, expect);
    }

    #[test]
    fn training_is_deterministic_and_increases_the_bound() {
        let s = MiTrainSettings {
            batch: 32,
            ..MiTrainSettings::new(0.5, 150, 4)
        };
        let run = || train_mi_alpha(&mut GaussianPairs::new(0.9, 1).unwrap(), &s).unwrap();
        let (c1, e1) = run();
        let (c2, e2) = run();
        assert_eq!(c1, c2);
        assert_eq!(e1, e2);
        assert!(e1 > 0.2, "{e1}");
    }

    #[test]
    fn fixed_pairs_must_match_in_length() {
        assert!(FixedPairs::new(Tensor::zeros(3, 1), Tensor::zeros(4, 1)).is_err());
    }
}
