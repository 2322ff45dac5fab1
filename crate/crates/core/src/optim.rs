//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[&Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(lr, &shapes)
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            p.expect_same_shape(g)?;
            p.expect_same_shape(&self.m[i])?;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::from_fn(&[3], |i| i as f64);
        let before = p.clone();
        let mut adam = Adam::for_params(0.1, &[&p]);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[&Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_steps_at_lr() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = Adam::for_params(0.01, &[&p]);
        let g = Tensor::scalar(3.7);
        let mut last = 0.0;
        for _ in 0..2000 {
            last = p.item();
            adam.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert!(((last - p.item()) - 0.01).abs() < 1e-6);
    }

    #[test]
    fn matches_scalar_reimplementation() {
        // minimize (x - 2)^2 / 2 from x = -1
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut p = Tensor::scalar(-1.0);
        let mut adam = Adam::for_params(lr, &[&p]);
        let (mut x, mut m, mut v) = (-1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = Tensor::scalar(p.item() - 2.0);
            adam.step(&mut [&mut p], &[&g]).unwrap();
            let gx = x - 2.0;
            m = b1 * m + (1.0 - b1) * gx;
            v = b2 * v + (1.0 - b2) * gx * gx;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            assert!((x - p.item()).abs() <= 1e-10);
        }
    }
}
