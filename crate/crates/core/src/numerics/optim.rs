use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for every parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![T::ZERO; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay Adam update at learning rate `lr`.
    ///
    /// `mask`, when given, selects which parameters are updated; the others keep
    /// both their values and their moment estimates.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        lr: f64,
        mask: Option<&[bool]>,
    ) -> Result<(), NumericsError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(NumericsError::DataLength {
                shape: vec![params.len()],
                len: grads.len(),
            });
        }
        self.step += 1;
        let t = self.step as f64;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let decay = T::from_f64(1.0 - lr * c.weight_decay);
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2_sqrt = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);

        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = grads[i].data();
            let p = params.get_mut(id);
            if g.len() != p.len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adamw",
                    left: p.shape().to_vec(),
                    right: grads[i].shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                *w *= decay;
                *w -= step_size * m[j] / (v[j].sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamId;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let mut p = store(1.5);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[Tensor::scalar(0.0)], 1e-2, None).unwrap();
        assert_eq!(p.get(ParamId(0)).data()[0], 1.5);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn single_step_matches_closed_form() {
        // After one step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
        let (w0, g, lr, eps) = (0.3, -0.7, 1e-2, 1e-8);
        let mut p = store(w0);
        let cfg = AdamWConfig { lr, weight_decay: 0.0, eps, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[Tensor::scalar(g)], lr, None).unwrap();
        let expected = w0 - lr * g / (g.abs() + eps);
        assert!((p.get(ParamId(0)).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_wd_value() {
        let (w0, lr, wd) = (2.0, 1e-2, 0.1);
        let mut p = store(w0);
        let cfg = AdamWConfig { lr, weight_decay: wd, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[Tensor::scalar(0.0)], lr, None).unwrap();
        let w1 = p.get(ParamId(0)).data()[0];
        assert!((w0 - w1 - lr * wd * w0).abs() < 1e-15);
    }

    #[test]
    fn masked_params_are_untouched() {
        let mut p = store(1.0);
        p.insert("b", Tensor::scalar(1.0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let grads = [Tensor::scalar(1.0), Tensor::scalar(1.0)];
        opt.step(&mut p, &grads, 1e-2, Some(&[false, true])).unwrap();
        assert_eq!(p.get(ParamId(0)).data()[0], 1.0);
        assert!(p.get(ParamId(1)).data()[0] < 1.0);
    }
}
