//! Central-difference verification of reverse-mode gradients.

use super::param::ParamSet;
use crate::error::{Error, Result};

/// Compare reverse-mode gradients against central differences over every
/// trainable scalar in `params`, returning the largest relative error.
///
/// `f(params, with_grad)` evaluates the scalar objective at the current
/// parameter values; with `with_grad` it must also accumulate gradients
/// into the set (gradients are zeroed here first). Non-trainable
/// parameters contribute nothing to the check set.
///
/// The per-entry error is |a − n| / max(|a|, |n|, 1), with n the central
/// difference (f(θ+eps) − f(θ−eps)) / (2·eps); the unit floor keeps
/// finite-difference roundoff on near-zero entries from dominating.
pub fn grad_check<F>(params: &mut ParamSet, eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut ParamSet, bool) -> Result<f64>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Config(format!(
            "grad_check eps must lie in (0, 1e-3], got {eps}"
        )));
    }

    params.zero_grads();
    let base = f(params, true)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("objective is non-finite: {base}")));
    }

    let trainable_ids: Vec<_> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let analytic: Vec<Vec<f64>> = trainable_ids
        .iter()
        .map(|&id| params.get(id).grad.data().to_vec())
        .collect();

    let mut max_rel = 0.0f64;
    for (slot, &id) in trainable_ids.iter().enumerate() {
        let numel = params.get(id).value.numel();
        for k in 0..numel {
            let original = params.get(id).value.data()[k];

            params.get_mut(id).value.data_mut()[k] = original + eps;
            let plus = f(params, false)?;
            params.get_mut(id).value.data_mut()[k] = original - eps;
            let minus = f(params, false)?;
            params.get_mut(id).value.data_mut()[k] = original;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(
                    "objective became non-finite during finite differencing".into(),
                ));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[slot][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::scalar_loss;
    use crate::numerics::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn quadratic_gradient_matches_analytic() {
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::from_vec(vec![1], vec![3.0]).unwrap(), true);

        let err = grad_check(&mut params, 1e-5, |ps, with_grad| {
            scalar_loss(ps, with_grad, |tape, bind| {
                let xv = bind.id(x);
                let sq = tape.mul(xv, xv)?;
                Ok(tape.sum_all(sq))
            })
        })
        .unwrap();
        assert!(err < 1e-9, "rel error {err}");
        // analytic gradient of x^2 at 3 is 6
        assert!((params.get(x).grad.data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_gradient_verified() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        let z = params.add(
            "logits",
            Tensor::rand_uniform(vec![2, 3], -1.0, 1.0, &mut rng),
            true,
        );
        let err = grad_check(&mut params, 1e-5, |ps, with_grad| {
            scalar_loss(ps, with_grad, |tape, bind| {
                tape.cross_entropy(bind.id(z), &[0, 2])
            })
        })
        .unwrap();
        assert!(err < 1e-6, "rel error {err}");
    }

    #[test]
    fn frozen_parameters_are_excluded() {
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::from_vec(vec![1], vec![2.0]).unwrap(), true);
        // frozen and unused by the objective in a differentiable way; were it
        // included, the deliberately wrong analytic gradient would be caught
        let frozen = params.add("frozen", Tensor::from_vec(vec![1], vec![1.0]).unwrap(), false);

        let err = grad_check(&mut params, 1e-5, |ps, with_grad| {
            let v = scalar_loss(ps, with_grad, |tape, bind| {
                let xv = bind.id(x);
                let sq = tape.mul(xv, xv)?;
                Ok(tape.sum_all(sq))
            })?;
            if with_grad {
                // corrupt the frozen gradient; must not affect the check
                ps.get_mut(frozen).grad.data_mut()[0] = 1234.5;
            }
            Ok(v)
        })
        .unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn rejects_bad_eps() {
        let mut params = ParamSet::new();
        assert!(matches!(
            grad_check(&mut params, 0.0, |_, _| Ok(0.0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            grad_check(&mut params, 1e-2, |_, _| Ok(0.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_non_finite_objective() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::from_vec(vec![1], vec![1.0]).unwrap(), true);
        assert!(matches!(
            grad_check(&mut params, 1e-5, |_, _| Ok(f64::NAN)),
            Err(Error::Numeric(_))
        ));
    }
}
