//! Adam with standard hyperparameters and bias correction. Moments live in
//! the training precision and are lazily shaped from the first gradient.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub struct Adam<E: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update over a flat parameter list; `params[i]` pairs with
    /// `grads[i]` across every call.
    pub fn step(&mut self, params: &mut [&mut Tensor<E>], grads: &[Tensor<E>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument("one gradient per parameter tensor".into()));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidArgument("parameter list changed between steps".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(Error::InvalidShape("gradient shape drifted".into()));
            }
            for i in 0..g.numel() {
                let gi = g.data()[i].f64();
                let mi = self.beta1 * m.data()[i].f64() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i].f64() + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = E::of(mi);
                v.data_mut()[i] = E::of(vi);
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                p.data_mut()[i] = E::of(p.data()[i].f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_gradient_direction() {
        // With bias correction, step 1 reduces to lr * sign(g) up to eps.
        let mut adam = Adam::<f64>::new(0.1);
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]);
        let g = Tensor::new(vec![2], vec![0.5, -3.0]);
        adam.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.data()[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p.data()[1] - (-2.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut adam = Adam::<f64>::new(0.05);
        let mut p = Tensor::new(vec![1], vec![4.0]);
        for _ in 0..2000 {
            let g = Tensor::new(vec![1], vec![2.0 * (p.data()[0] - 1.5)]);
            adam.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!((p.data()[0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn rejects_mismatched_lists() {
        let mut adam = Adam::<f64>::new(0.1);
        let mut p = Tensor::zeros(vec![2]);
        assert!(adam.step(&mut [&mut p], &[]).is_err());
        let g = Tensor::zeros(vec![2]);
        adam.step(&mut [&mut p], &[g]).unwrap();
        let g3 = Tensor::zeros(vec![3]);
        assert!(adam.step(&mut [&mut p], &[g3]).is_err());
    }
}
