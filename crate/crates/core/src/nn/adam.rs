//! Adam with bias correction and L2 weight decay folded into the gradient.

use crate::error::{Error, Result};
use crate::tensor::{ModelWeights, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimiser state for one model. Moments mirror the weight layout.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar = f32> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moments: ModelWeights<T>,
    pub second_moments: ModelWeights<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, weights: &ModelWeights<T>) -> Self {
        AdamState {
            config,
            step_count: 0,
            first_moments: weights.zeros_like(),
            second_moments: weights.zeros_like(),
        }
    }

    /// One update: `g ← g + wd·w`, moment updates, bias-corrected step.
    pub fn step(&mut self, weights: &mut ModelWeights<T>, grads: &ModelWeights<T>) -> Result<()> {
        weights.check_same_layout(grads)?;
        weights.check_same_layout(&self.first_moments)?;
        grads.ensure_finite("adam gradient")?;

        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one_m_b1 = T::from_f64_lossy(1.0 - c.beta1);
        let one_m_b2 = T::from_f64_lossy(1.0 - c.beta2);
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.learning_rate);
        let wd = T::from_f64_lossy(c.weight_decay);
        let eps = T::from_f64_lossy(c.eps);

        let moments = self
            .first_moments
            .iter_mut()
            .zip(self.second_moments.iter_mut());
        for (((name, w), (_, g)), ((_, m), (_, v))) in
            weights.iter_mut().zip(grads.iter()).zip(moments)
        {
            let w = w.data_mut();
            let m = m.data_mut();
            let v = v.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i] + wd * w[i];
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] = w[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            if !w.iter().all(|x| x.is_finite()) {
                return Err(Error::Training(format!("non-finite weight after update: {name}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: f64) -> ModelWeights<f64> {
        let mut w = ModelWeights::new();
        w.insert("w", Tensor::scalar(v)).unwrap();
        w
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut w = single(0.0);
        let mut st = AdamState::new(cfg, &w);
        st.step(&mut w, &single(1.0)).unwrap();
        let got = w.get("w").unwrap().data()[0];
        assert!((got - (-1e-4 / (1.0 + 1e-8))).abs() < 1e-18, "{got}");
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut w = single(0.37);
        let mut st = AdamState::new(cfg, &w);
        for _ in 0..5 {
            st.step(&mut w, &single(0.0)).unwrap();
        }
        assert_eq!(w.get("w").unwrap().data()[0], 0.37);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        };
        let mut w = single(-1.25);
        let mut st = AdamState::new(cfg, &w);
        for g in [3.0, -2.0, 0.5] {
            st.step(&mut w, &single(g)).unwrap();
        }
        assert_eq!(w.get("w").unwrap().data()[0].to_bits(), (-1.25f64).to_bits());
    }

    #[test]
    fn three_steps_on_quadratic_match_hand_trace() {
        // f(w) = (w - 3)^2, g = 2(w - 3); w0 = 1, lr = 0.1, wd = 0.01.
        let cfg = AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.01,
            ..AdamConfig::default()
        };
        let mut w = single(1.0);
        let mut st = AdamState::new(cfg, &w);
        for _ in 0..3 {
            let wv = w.get("w").unwrap().data()[0];
            st.step(&mut w, &single(2.0 * (wv - 3.0))).unwrap();
        }

        // scripted trace, written out step by step
        let (b1, b2, eps, lr, wd) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64, 0.01f64);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        // step 1
        let g = 2.0 * (x - 3.0) + wd * x;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        x -= lr * (m / (1.0 - b1)) / ((v / (1.0 - b2)).sqrt() + eps);
        // step 2
        let g = 2.0 * (x - 3.0) + wd * x;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        x -= lr * (m / (1.0 - b1 * b1)) / ((v / (1.0 - b2 * b2)).sqrt() + eps);
        // step 3
        let g = 2.0 * (x - 3.0) + wd * x;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        x -= lr * (m / (1.0 - b1 * b1 * b1)) / ((v / (1.0 - b2 * b2 * b2)).sqrt() + eps);

        let got = w.get("w").unwrap().data()[0];
        assert!((got - x).abs() < 1e-12, "{got} vs {x}");
        assert_eq!(st.step_count, 3);
    }

    #[test]
    fn layout_mismatch_is_error() {
        let mut w = single(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &w);
        let mut g = ModelWeights::new();
        g.insert("other", Tensor::scalar(1.0)).unwrap();
        assert!(st.step(&mut w, &g).is_err());
    }
}
