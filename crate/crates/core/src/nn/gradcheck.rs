use crate::error::{Error, Result};
use crate::nn::graph::{Graph, ParamVars, Var};
use crate::nn::tensor::ParamSet;

const DENOM_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients against central finite differences.
///
/// Returns the maximum over all coordinates of
/// `|analytic - fd| / max(DENOM_FLOOR, |analytic| + |fd|)`. The floor keeps
/// coordinates with an exactly zero gradient (e.g. a bias feeding a
/// normalisation) from turning central-difference round-off, of order
/// `f64::EPSILON * |loss| / eps`, into a large relative error.
pub fn check_gradients<F>(loss_fn: F, params: &ParamSet, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::input("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let pv = g.bind(params);
    let loss = loss_fn(&mut g, &pv)?;
    if !g.scalar_value(loss).is_finite() {
        return Err(Error::numeric("loss is not finite at the check point"));
    }
    let grads = g.backward(loss)?;
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let pv = g.bind_frozen(p);
        let l = loss_fn(&mut g, &pv)?;
        let v = g.scalar_value(l);
        if !v.is_finite() {
            return Err(Error::numeric("loss is not finite near the check point"));
        }
        Ok(v)
    };
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (name, var) in pv.iter() {
        let n = params.get(name).map_or(0, |t| t.len());
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = params.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let err = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs()).max(DENOM_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn params(vals: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::row(vals.to_vec()));
        p
    }

    #[test]
    fn quadratic_is_exact() {
        let err = check_gradients(
            |g, pv| {
                let p = pv.get("p")?;
                let sq = g.square(p)?;
                let s = g.sum(sq);
                Ok(g.scale(s, 0.5))
            },
            &params(&[0.3, -1.2, 2.5]),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let err = check_gradients(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &params(&[1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softmax_cross_entropy_matches_finite_differences() {
        let err = check_gradients(
            |g, pv| {
                let ls = g.log_softmax_rows(pv.get("p")?);
                let t = g.constant(Tensor::row(vec![0.0, 1.0, 0.0]));
                let m = g.mul(ls, t)?;
                let s = g.sum(m);
                Ok(g.scale(s, -1.0))
            },
            &params(&[0.5, -0.3, 1.7]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn non_finite_loss_is_a_numeric_error() {
        let r = check_gradients(
            |g, pv| {
                let l = g.ln(pv.get("p")?);
                Ok(g.sum(l))
            },
            &params(&[-1.0]),
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
