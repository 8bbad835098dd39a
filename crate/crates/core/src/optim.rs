//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    /// First moments, one per parameter tensor, in parameter order.
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(1e-4)
    }
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            beta1: 0.9,
            beta2: 0.999,
            lr,
            eps: 1e-8,
        }
    }

    /// One update from the `grad` of every parameter. Moments are created
    /// on the first call.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if self.m.is_empty() && self.v.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad.is_none() {
                return Err(Error::contract(format!("parameter {i} has no gradient; run backward first")));
            }
            if self.m[i].shape() != p.shape() || self.v[i].shape() != p.shape() {
                return Err(Error::dim(format!(
                    "moment shape {:?} does not match parameter {i} of shape {:?}",
                    self.m[i].shape(),
                    p.shape()
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        let one = T::one();
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.take().expect("checked above");
            for (((x, &g), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                let delta = lr * m_hat / (v_hat.sqrt() + eps);
                // subtracting a signed zero could flip the sign of a zero parameter
                if delta != T::zero() {
                    *x -= delta;
                }
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: Vec<f64>, grad: Vec<f64>) -> Tensor<f64> {
        let mut t = Tensor::from_vec([values.len()], values).unwrap().with_grad();
        t.grad = Some(grad);
        t
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = param(vec![0.5; 4], vec![1.0; 4]);
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut [&mut p]).unwrap();
        for &x in p.data() {
            assert!((0.5 - x - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_or_rate_leaves_parameters() {
        let mut p = param(vec![0.25, -1.5], vec![0.0, 0.0]);
        AdamState::new(1e-3).step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[0.25, -1.5]);
        let mut q = param(vec![0.25, -0.0], vec![3.0, -2.0]);
        AdamState::new(0.0).step(&mut [&mut q]).unwrap();
        assert_eq!(q.data()[0].to_bits(), 0.25f64.to_bits());
        assert_eq!(q.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = Tensor::<f64>::zeros([2]).with_grad();
        assert!(AdamState::new(1e-3).step(&mut [&mut p]).is_err());
    }

    #[test]
    fn quadratic_decreases_monotonically() {
        let mut x = Tensor::<f64>::ones([3]).with_grad();
        let mut adam = AdamState::new(1e-3);
        let f = |x: &Tensor<f64>| x.data().iter().map(|v| v * v).sum::<f64>();
        let mut last = f(&x);
        for _ in 0..100 {
            x.grad = Some(x.data().iter().map(|v| 2.0 * v).collect());
            adam.step(&mut [&mut x]).unwrap();
            let now = f(&x);
            assert!(now < last);
            last = now;
        }
    }
}
