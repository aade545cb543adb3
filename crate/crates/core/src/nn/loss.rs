use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean per-pixel binary cross-entropy and its gradient with respect to
/// `pred`. Pixels whose prediction was clamped receive zero gradient.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!(
            "bce: prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let lo = T::from_f64_lossy(PROB_CLAMP);
    let hi = T::one() - lo;
    let count = pred.len() as f64;
    let inv = T::from_f64_lossy(1.0 / count);
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let pc = p.max(lo).min(hi);
        let (pcf, tf) = (pc.as_f64(), t.as_f64());
        total -= tf * pcf.ln() + (1.0 - tf) * (1.0 - pcf).ln();
        let g = if p < lo || p > hi {
            T::zero()
        } else {
            (-t / pc + (T::one() - t) / (T::one() - pc)) * inv
        };
        grad.push(g);
    }
    let loss = total / count;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "bce loss".into(),
        });
    }
    Ok((loss, Tensor::from_vec(pred.dims(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn one_half_is_ln2() {
        let (l, _) = bce_loss(&t(&[0.5; 4]), &t(&[1., 0., 0., 1.])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn closed_form_pair() {
        let (l, g) = bce_loss(&t(&[0.9, 0.1]), &t(&[1., 0.])).unwrap();
        assert!((l - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!((g.data()[0] + 1.0 / 0.9 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn exact_prediction_hits_clamp_floor() {
        let (l, g) = bce_loss(&t(&[1.0, 0.0]), &t(&[1., 0.])).unwrap();
        assert!(l > 0.0 && l < 1e-6, "{l}");
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch() {
        assert!(bce_loss(&t(&[0.5]), &t(&[1., 0.])).is_err());
    }
}
