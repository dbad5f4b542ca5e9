use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// RMSprop without momentum or weight decay.
///
/// ```text
/// acc ← α·acc + (1 − α)·g²
/// p   ← p − η·g / (√acc + ε)
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    /// One accumulator per parameter tensor, in store order.
    acc: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64, alpha: f64, eps: f64) -> Self {
        Self {
            lr,
            alpha,
            eps,
            acc: Vec::new(),
        }
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.acc
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("rmsprop", &[params.len()], &[grads.len()]));
        }
        for ((_, name, _), g) in params.iter().zip(grads) {
            if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient {} at element {bad} of `{name}`",
                    g.data()[bad]
                )));
            }
        }
        if self.acc.is_empty() {
            self.acc = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        }
        for ((p, g), acc) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.acc) {
            if p.shape() != g.shape() {
                return Err(Error::shape("rmsprop", p.shape(), g.shape()));
            }
            for ((w, gv), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.iter_mut()) {
                *a = self.alpha * *a + (1.0 - self.alpha) * gv * gv;
                *w -= self.lr * gv / (a.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("p", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    fn grad(v: f64) -> Vec<Tensor> {
        vec![Tensor::new(vec![1], vec![v]).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(0.7);
        let mut opt = RmsProp::new(5e-4, 0.99, 1e-5);
        opt.step(&mut s, &grad(0.0)).unwrap();
        assert_eq!(s.tensors()[0].data(), &[0.7]);
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = store(0.0);
        let mut opt = RmsProp::new(5e-4, 0.99, 1e-5);
        opt.step(&mut s, &grad(1.0)).unwrap();
        // acc = 0.01, step = 5e-4 / (0.1 + 1e-5)
        assert!((opt.accumulators()[0][0] - 0.01).abs() < 1e-15);
        let expected = -5e-4 / (0.1 + 1e-5);
        assert!((s.tensors()[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn repeated_gradient_shrinks_step() {
        let mut s = store(0.0);
        let mut opt = RmsProp::new(5e-4, 0.99, 1e-5);
        opt.step(&mut s, &grad(1.0)).unwrap();
        let first = -s.tensors()[0].data()[0];
        opt.step(&mut s, &grad(1.0)).unwrap();
        let second = -s.tensors()[0].data()[0] - first;
        assert!(second < first);
        assert!(opt.accumulators()[0][0] > 0.01);
    }

    #[test]
    fn nan_gradient_is_divergence() {
        let mut s = store(0.0);
        let mut opt = RmsProp::new(5e-4, 0.99, 1e-5);
        let err = opt.step(&mut s, &grad(f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
        assert_eq!(s.tensors()[0].data(), &[0.0]);
    }
}
