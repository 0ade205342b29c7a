//! Prediction-layer and intermediate-layer distillation losses.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mi::bound::mi_alpha_bound_var;
use crate::mi::critic::CriticPair;
use crate::nn::graph::{softmax_in_place, Graph, ParamVars, Var};
use crate::nn::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PredLossKind {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "MSE")]
    Mse,
}

impl fmt::Display for PredLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredLossKind::Ce => "CE",
            PredLossKind::Mse => "MSE",
        })
    }
}

impl FromStr for PredLossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CE" => Ok(PredLossKind::Ce),
            "MSE" => Ok(PredLossKind::Mse),
            _ => Err(Error::config(format!("unknown prediction loss '{s}'"))),
        }
    }
}

/// What the student's logits are compared with.
#[derive(Debug, Clone, PartialEq)]
pub enum PredTarget {
    /// Teacher logits: CE uses their softmax, MSE the logits themselves.
    TeacherLogits(Tensor),
    /// Label distributions, one row per logit row (one-hot, mixed or soft).
    Distribution(Tensor),
    /// Hard class ids, one per logit row.
    Hard(Vec<usize>),
}

impl PredTarget {
    /// Resolves to the dense matrix compared against the logits.
    fn resolve(&self, kind: PredLossKind, rows: usize, classes: usize) -> Result<Tensor> {
        let t = match self {
            PredTarget::TeacherLogits(l) => {
                check_dims(l, rows, classes)?;
                if !l.is_finite() {
                    return Err(Error::numeric("non-finite teacher logits"));
                }
                match kind {
                    PredLossKind::Mse => l.clone(),
                    PredLossKind::Ce => {
                        let mut d = l.data().to_vec();
                        d.chunks_mut(classes).for_each(softmax_in_place);
                        Tensor::matrix(rows, classes, d)
                    }
                }
            }
            PredTarget::Distribution(d) => {
                check_dims(d, rows, classes)?;
                for r in 0..rows {
                    let row = d.row_slice(r);
                    let s: f64 = row.iter().sum();
                    if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| !(v >= 0.0)) {
                        return Err(Error::input(format!("target row {r} is not a distribution")));
                    }
                }
                d.clone()
            }
            PredTarget::Hard(labels) => {
                if labels.len() != rows {
                    return Err(Error::input(format!("{} labels for {rows} rows", labels.len())));
                }
                let mut d = vec![0.0; rows * classes];
                for (r, &y) in labels.iter().enumerate() {
                    if y >= classes {
                        return Err(Error::input(format!("label {y} >= {classes} classes")));
                    }
                    d[r * classes + y] = 1.0;
                }
                Tensor::matrix(rows, classes, d)
            }
        };
        Ok(t)
    }
}

fn check_dims(t: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if t.rows() != rows || t.cols() != cols {
        return Err(Error::input(format!(
            "target is {}x{}, logits are {rows}x{cols}",
            t.rows(),
            t.cols()
        )));
    }
    Ok(())
}

/// Records the prediction-layer loss, averaged over logit rows.
pub fn pred_loss_var(g: &mut Graph, kind: PredLossKind, logits: Var, target: &PredTarget) -> Result<Var> {
    let lt = g.value(logits);
    if lt.data().iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("NaN logits"));
    }
    let (rows, classes) = (lt.rows(), lt.cols());
    let t = g.constant(target.resolve(kind, rows, classes)?);
    match kind {
        PredLossKind::Ce => {
            let ls = g.log_softmax_rows(logits);
            let p = g.mul(ls, t)?;
            let s = g.sum(p);
            Ok(g.scale(s, -1.0 / rows as f64))
        }
        PredLossKind::Mse => {
            let d = g.sub(logits, t)?;
            let sq = g.square(d)?;
            Ok(g.mean(sq))
        }
    }
}

pub fn pred_loss(kind: PredLossKind, logits: &Tensor, target: &PredTarget) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let v = pred_loss_var(&mut g, kind, l, target)?;
    Ok(g.scalar_value(v))
}

/// Intermediate-layer loss family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InterLossKind {
    Mse,
    L2,
    Cos,
    Pkd,
    Ce,
    MiAlpha { alpha: f64 },
}

impl InterLossKind {
    pub fn is_mi(&self) -> bool {
        matches!(self, InterLossKind::MiAlpha { .. })
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            InterLossKind::MiAlpha { alpha } => Some(*alpha),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let InterLossKind::MiAlpha { alpha } = self {
            if !(0.0..=1.0).contains(alpha) {
                return Err(Error::config(format!("MI alpha {alpha} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for InterLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InterLossKind::Mse => f.write_str("MSE"),
            InterLossKind::L2 => f.write_str("L2"),
            InterLossKind::Cos => f.write_str("Cos"),
            InterLossKind::Pkd => f.write_str("PKD"),
            InterLossKind::Ce => f.write_str("CE"),
            InterLossKind::MiAlpha { alpha } => write!(f, "MI_alpha@{alpha}"),
        }
    }
}

impl FromStr for InterLossKind {
    type Err = Error;
    /// Accepts `MSE`, `L2`, `Cos`, `PKD`, `CE`, `MI_alpha@0.9` (case-insensitive).
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let kind = match lower.as_str() {
            "mse" => InterLossKind::Mse,
            "l2" => InterLossKind::L2,
            "cos" => InterLossKind::Cos,
            "pkd" => InterLossKind::Pkd,
            "ce" => InterLossKind::Ce,
            _ => {
                let rest = lower
                    .strip_prefix("mi_alpha@")
                    .or_else(|| lower.strip_prefix("mi-alpha@"))
                    .ok_or_else(|| Error::config(format!("unknown intermediate loss '{s}'")))?;
                let alpha: f64 = rest
                    .parse()
                    .map_err(|_| Error::config(format!("bad alpha in '{s}'")))?;
                InterLossKind::MiAlpha { alpha }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// Student-to-teacher width bridge: a learned `h_s × h_t` matrix, or the
/// identity when the widths already agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Projection {
    Identity,
    Learned(Tensor),
}

impl Projection {
    pub fn new(h_s: usize, h_t: usize, rng: &mut impl Rng) -> Self {
        if h_s == h_t {
            Projection::Identity
        } else {
            Projection::Learned(Tensor::randn(h_s, h_t, 0.5 / (h_s as f64).sqrt(), rng))
        }
    }
}

/// Batch information needed by the MI-α loss: the critic (with its bound
/// variables) and the row offsets of each sequence.
pub struct MiContext<'a> {
    pub critic: &'a CriticPair,
    pub critic_vars: &'a ParamVars,
    pub segments: &'a [usize],
}

/// Records an intermediate loss between student states `hs` (rows×h_s)
/// and teacher states `ht` (rows×h_t). `proj` is the projection variable,
/// or `None` for the identity.
pub fn inter_loss_var(
    g: &mut Graph,
    kind: InterLossKind,
    hs: Var,
    ht: Var,
    proj: Option<Var>,
    mi: Option<&MiContext<'_>>,
) -> Result<Var> {
    kind.validate()?;
    let u = match proj {
        Some(w) => g.matmul(hs, w)?,
        None => hs,
    };
    let v = ht;
    let (ur, uc) = (g.value(u).rows(), g.value(u).cols());
    let (vr, vc) = (g.value(v).rows(), g.value(v).cols());
    if uc != vc || ur != vr {
        return Err(Error::input(format!(
            "projected student states {ur}x{uc} vs teacher states {vr}x{vc}"
        )));
    }
    let rows = ur as f64;
    match kind {
        InterLossKind::Mse => {
            let d = g.sub(u, v)?;
            let sq = g.square(d)?;
            Ok(g.mean(sq))
        }
        InterLossKind::L2 => {
            let d = g.sub(u, v)?;
            let n = g.row_norm(d);
            Ok(g.mean(n))
        }
        InterLossKind::Cos => {
            let un = g.row_normalize(u, NORM_EPS);
            let vn = g.row_normalize(v, NORM_EPS);
            let c = g.row_dot(un, vn)?;
            let m = g.mean(c);
            let neg = g.scale(m, -1.0);
            Ok(g.offset(neg, 1.0))
        }
        InterLossKind::Pkd => {
            let un = g.row_normalize(u, NORM_EPS);
            let vn = g.row_normalize(v, NORM_EPS);
            let d = g.sub(un, vn)?;
            let sq = g.square(d)?;
            let s = g.sum(sq);
            Ok(g.scale(s, 1.0 / rows))
        }
        InterLossKind::Ce => {
            let target = g.softmax_rows(v);
            let ls = g.log_softmax_rows(u);
            let p = g.mul(target, ls)?;
            let s = g.sum(p);
            Ok(g.scale(s, -1.0 / rows))
        }
        InterLossKind::MiAlpha { alpha } => {
            let ctx = mi.ok_or_else(|| Error::input("MI-alpha loss needs batch context"))?;
            if ctx.segments.len() < 3 {
                return Err(Error::input("MI-alpha loss needs a batch of at least 2"));
            }
            let pu = g.segment_mean(u, ctx.segments)?;
            let pt = g.segment_mean(v, ctx.segments)?;
            let (s, q) = ctx.critic.score_graph(g, ctx.critic_vars, pu, pt)?;
            let b = mi_alpha_bound_var(g, s, q, alpha)?;
            Ok(g.scale(b, -1.0))
        }
    }
}

/// Value-only convenience wrapper around [`inter_loss_var`].
pub fn inter_loss(
    kind: InterLossKind,
    hs: &Tensor,
    ht: &Tensor,
    proj: &Projection,
    mi: Option<(&CriticPair, &[usize])>,
) -> Result<f64> {
    let mut g = Graph::new();
    let hsv = g.constant(hs.clone());
    let htv = g.constant(ht.clone());
    let pv = match proj {
        Projection::Identity => None,
        Projection::Learned(w) => Some(g.constant(w.clone())),
    };
    let v = match mi {
        Some((critic, segments)) => {
            let cv = g.bind_frozen(&critic.params);
            let ctx = MiContext {
                critic,
                critic_vars: &cv,
                segments,
            };
            inter_loss_var(&mut g, kind, hsv, htv, pv, Some(&ctx))?
        }
        None => inter_loss_var(&mut g, kind, hsv, htv, pv, None)?,
    };
    Ok(g.scalar_value(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mi::critic::CriticArch;
    use crate::nn::check_gradients;
    use crate::nn::tensor::ParamSet;
    use crate::rng::RngStreams;

    #[test]
    fn prediction_loss_examples() {
        let l = Tensor::row(vec![0.0, 0.0]);
        let soft = PredTarget::Distribution(Tensor::row(vec![0.5, 0.5]));
        assert!((pred_loss(PredLossKind::Ce, &l, &soft).unwrap() - 2f64.ln()).abs() < 1e-12);
        let l = Tensor::row(vec![2.0, 0.0]);
        let hard = PredTarget::Hard(vec![0]);
        let expect = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((pred_loss(PredLossKind::Ce, &l, &hard).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.1269).abs() < 1e-4);
        let t = PredTarget::TeacherLogits(l.clone());
        assert_eq!(pred_loss(PredLossKind::Mse, &l, &t).unwrap(), 0.0);
    }

    #[test]
    fn mse_against_hard_label_uses_one_hot() {
        let l = Tensor::row(vec![1.0, 1.0]);
        let v = pred_loss(PredLossKind::Mse, &l, &PredTarget::Hard(vec![1])).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn nan_logits_and_bad_targets() {
        let l = Tensor::row(vec![f64::NAN, 0.0]);
        let r = pred_loss(PredLossKind::Ce, &l, &PredTarget::Hard(vec![0]));
        assert!(matches!(r, Err(Error::Numeric(_))));
        let l = Tensor::row(vec![0.0, 0.0]);
        let bad = PredTarget::Distribution(Tensor::row(vec![0.7, 0.7]));
        assert!(pred_loss(PredLossKind::Ce, &l, &bad).is_err());
        let wide = PredTarget::Distribution(Tensor::row(vec![0.2, 0.3, 0.5]));
        assert!(pred_loss(PredLossKind::Ce, &l, &wide).is_err());
    }

    fn states(seed: u64) -> (Tensor, Tensor) {
        let mut rng = RngStreams::new(seed).stream("sampling");
        (Tensor::randn(4, 3, 1.0, &mut rng), Tensor::randn(4, 3, 1.0, &mut rng))
    }

    #[test]
    fn identical_states_give_zero() {
        let (a, _) = states(1);
        for k in [InterLossKind::Mse, InterLossKind::L2, InterLossKind::Cos, InterLossKind::Pkd] {
            assert!(inter_loss(k, &a, &a, &Projection::Identity, None).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn normalised_losses_ignore_scale() {
        let (a, b) = states(2);
        let doubled = Tensor::matrix(4, 3, a.data().iter().map(|v| 2.0 * v).collect());
        let id = Projection::Identity;
        assert!(inter_loss(InterLossKind::Pkd, &a, &doubled, &id, None).unwrap() < 1e-9);
        assert!(inter_loss(InterLossKind::Cos, &a, &doubled, &id, None).unwrap() < 1e-9);
        assert!(inter_loss(InterLossKind::Mse, &a, &doubled, &id, None).unwrap() > 0.0);
        for c in [0.5, 3.0] {
            let scaled = Tensor::matrix(4, 3, b.data().iter().map(|v| c * v).collect());
            for k in [InterLossKind::Pkd, InterLossKind::Cos] {
                let d = inter_loss(k, &a, &scaled, &id, None).unwrap() - inter_loss(k, &a, &b, &id, None).unwrap();
                assert!(d.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn orthogonal_unit_vectors() {
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::matrix(2, 2, vec![0.0, 1.0, -1.0, 0.0]);
        let id = Projection::Identity;
        assert!((inter_loss(InterLossKind::Cos, &a, &b, &id, None).unwrap() - 1.0).abs() < 1e-12);
        assert!((inter_loss(InterLossKind::Pkd, &a, &b, &id, None).unwrap() - 2.0).abs() < 1e-11);
    }

    #[test]
    fn width_mismatch_and_missing_context() {
        let (a, _) = states(3);
        let t = Tensor::zeros(4, 5);
        assert!(inter_loss(InterLossKind::Mse, &a, &t, &Projection::Identity, None).is_err());
        let r = inter_loss(InterLossKind::MiAlpha { alpha: 0.5 }, &a, &a, &Projection::Identity, None);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [
            InterLossKind::Mse,
            InterLossKind::L2,
            InterLossKind::Cos,
            InterLossKind::Pkd,
            InterLossKind::Ce,
            InterLossKind::MiAlpha { alpha: 0.9 },
        ] {
            assert_eq!(k.to_string().parse::<InterLossKind>().unwrap(), k);
        }
        assert!("MI_alpha@1.5".parse::<InterLossKind>().is_err());
    }

    #[test]
    fn gradients_through_projection_and_states() {
        let mut rng = RngStreams::new(8).stream("model-init");
        let mut p = ParamSet::new();
        p.insert("hs", Tensor::randn(4, 3, 1.0, &mut rng));
        p.insert("w", Tensor::randn(3, 5, 0.5, &mut rng));
        let ht = Tensor::randn(4, 5, 1.0, &mut rng);
        let critic = CriticPair::new(
            CriticArch {
                layers: 1,
                width: 4,
                heads: 2,
                ff: 4,
            },
            5,
            5,
            &mut rng,
        )
        .unwrap();
        let segments = [0, 2, 4];
        for k in [
            InterLossKind::Mse,
            InterLossKind::L2,
            InterLossKind::Cos,
            InterLossKind::Pkd,
            InterLossKind::Ce,
            InterLossKind::MiAlpha { alpha: 0.9 },
        ] {
            let err = check_gradients(
                |g, pv| {
                    let htv = g.constant(ht.clone());
                    let cv = g.bind_frozen(&critic.params);
                    let ctx = MiContext {
                        critic: &critic,
                        critic_vars: &cv,
                        segments: &segments,
                    };
                    inter_loss_var(g, k, pv.get("hs")?, htv, Some(pv.get("w")?), Some(&ctx))
                },
                &p,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{k}: {err}");
        }
    }
}
