//! Adam and the step-decay learning-rate schedule.

use crate::layers::StateRef;
use crate::net::Transporter;
use crate::tensor::{Real, Tensor};

/// `base * decay^floor(epoch / every)`.
pub fn learning_rate(base: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    base * decay.powi((epoch / every.max(1)) as i32)
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Real> Adam<T> {
    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update of every parameter of `net` from its accumulated gradient.
    pub fn update(&mut self, net: &mut Transporter<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step_size = T::of(lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        net.visit(&mut |_, s| {
            let StateRef::Param(p) = s else {
                return;
            };
            if m_all.len() == idx {
                m_all.push(Tensor::zeros(p.value.shape()));
                v_all.push(Tensor::zeros(p.value.shape()));
            }
            let (m, v) = (m_all[idx].data_mut(), v_all[idx].data_mut());
            let g = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                *w -= step_size * m[i] / (v[i].sqrt() + eps);
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_every_ten_epochs() {
        let lr = |e| learning_rate(0.001, 0.95, 10, e);
        assert_eq!(lr(0), 0.001);
        assert_eq!(lr(9), 0.001);
        assert!((lr(10) - 0.00095).abs() < 1e-12);
        assert!((lr(19) - 0.00095).abs() < 1e-12);
        assert!((lr(99) - 0.001 * 0.95f64.powi(9)).abs() < 1e-12);
    }
}
